"""
Parameter and FLOP accounting for both architectures.

There are three ways to count:

* **formula**: the closed forms, evaluated exactly
* **itemized**: the sum of per-component line items (embeddings, every
  layer's attention and feed-forward, unembedding). This is the authoritative
  count; a :py:class:`Tally` keeps the line items so reports can show them.
* **actual**: element counts of an instantiated model's tensors, which also
  includes the LayerNorm gains that neither of the others counts

A FLOP is one multiply or one add; a multiply-accumulate is 2 FLOPs. Forward
FLOPs are per sequence of ``seq_len`` tokens, training FLOPs are per token
and count the backward pass as twice the forward pass.

The transformer's itemized FLOPs follow the usual decomposition: embeddings
``2 N V D``; per layer QKV ``6 N D H D_h``, attention logits ``2 N^2 H D_h``,
softmax ``3 H N^2``, attention reduction ``2 N^2 H D_h``, output projection
``2 N H D_h D``, feed-forward ``4 N D D_FF``; unembedding ``2 N D V``.
"""
from collections import namedtuple
from dataclasses import dataclass, field, replace
from fractions import Fraction

import torch

from resmat.config import ConfigError
from resmat.models import build_model


class Tally:
    """
    Ordered ``(label, count)`` line items.

    .. py:attribute:: items

      List of ``(label, count)`` pairs, in the order they were added
    """

    def __init__(self, items=()):
        self.items = list(items)

    def add(self, label, count):
        self.items.append((label, int(count)))
        return self

    @property
    def total(self):
        return sum(c for _, c in self.items)

    def __getitem__(self, label):
        return sum(c for name, c in self.items if name == label)

    def group_totals(self):
        """``{prefix: subtotal}`` where the prefix is the label up to ``':'``"""
        totals = {}
        for label, count in self.items:
            key = label.split(':', 1)[0]
            totals[key] = totals.get(key, 0) + count
        return totals

    def __repr__(self):
        return 'Tally({!r})'.format(self.items)


def params_formula(config):
    """
    :param config: :py:class:`~resmat.config.TransformerConfig` or
                   :py:class:`~resmat.config.RMTConfig`
    :returns: int

    Transformer: ``D (L (4 H D_h + 2 D_FF) + V)``.
    RMT: ``R (2 D_k (3 L + 1) + D_v (2 L D_FF + V + N))``.
    """
    c = config
    if c.arch == 'transformer':
        return c.d_model * (c.n_layers * (4 * c.n_heads * c.d_head + 2 * c.d_ff) +
                            c.vocab_size)
    return c.rank * (2 * c.d_k * (3 * c.n_layers + 1) +
                     c.d_v * (2 * c.n_layers * c.d_ff + c.vocab_size + c.max_seq_len))


def params_itemized(config):
    """
    :returns: :py:class:`Tally` of every learnable tensor family except the
              LayerNorm gains
    """
    c = config
    L = c.n_layers
    t = Tally()
    if c.arch == 'transformer':
        D, hd = c.d_model, c.n_heads * c.d_head
        t.add('embedding: token embeddings', c.vocab_size * D)
        t.add('embedding: position embeddings', c.max_seq_len * D)
        t.add('attention: QKV projections', L * 3 * hd * D)
        t.add('attention: output projections', L * hd * D)
        t.add('feed-forward: core', L * 2 * D * c.d_ff)
        t.add('unembedding: weights', c.vocab_size * D)
        return t
    R, D_k, D_v = c.rank, c.d_k, c.d_v
    t.add('embedding: token embeddings', R * D_v * c.vocab_size)
    t.add('embedding: position embeddings', R * D_v * c.max_seq_len)
    t.add('embedding: key vectors', 2 * R * D_k)
    t.add('attention: key vectors', L * 4 * R * D_k)
    t.add('feed-forward: key vectors', L * 2 * R * D_k)
    t.add('feed-forward: core', L * 2 * R * D_v * c.d_ff)
    t.add('unembedding: weights', R * c.vocab_size * D_v)
    t.add('unembedding: key vectors', R * D_k)
    return t


def flops_formula(config, seq_len=None):
    """
    :param int seq_len: ``N`` in the closed form; defaults to ``max_seq_len``
    :returns: int, forward FLOPs per sequence

    Transformer: ``4 N (V + L D (2 D_h H + D_FF) + L (N D_h H + 3/4 N H))``,
    evaluated exactly and rounded once at the end.
    RMT: ``6 N R D_k D_v (1 + L) + N R (4 V D_v + L (4 N D_v + 3 N + 4 D_v D_FF))``.
    """
    c = config
    N = seq_len or c.max_seq_len
    L = c.n_layers
    if c.arch == 'transformer':
        H, hd = c.n_heads, c.d_head
        total = 4 * N * (c.vocab_size + L * c.d_model * (2 * hd * H + c.d_ff) +
                         L * (N * hd * H + Fraction(3, 4) * N * H))
        return int(round(total))
    R, D_k, D_v = c.rank, c.d_k, c.d_v
    return (6 * N * R * D_k * D_v * (1 + L) +
            N * R * (4 * c.vocab_size * D_v +
                     L * (4 * N * D_v + 3 * N + 4 * D_v * c.d_ff)))


def flops_itemized(config, seq_len=None):
    """
    :param int seq_len: defaults to ``max_seq_len``
    :returns: :py:class:`Tally` of forward FLOPs per sequence

    RMT line items count ``2 N R D_k D_v`` per storage or retrieval of ``R``
    channels. The position-embedding item is ``2 N V R D_v``,
    although a one-hot position lookup would suggest ``2 N N R D_v``.
    """
    c = config
    N = seq_len or c.max_seq_len
    L = c.n_layers
    V = c.vocab_size
    t = Tally()
    if c.arch == 'transformer':
        D, H, hd = c.d_model, c.n_heads, c.d_head
        t.add('embedding: embeddings', 2 * N * V * D)
        t.add('attention: QKV projections', L * 6 * N * D * H * hd)
        t.add('attention: logits', L * 2 * N * N * H * hd)
        t.add('attention: softmax', L * 3 * H * N * N)
        t.add('attention: reduction', L * 2 * N * N * H * hd)
        t.add('attention: output projection', L * 2 * N * H * hd * D)
        t.add('feed-forward: core', L * 4 * N * D * c.d_ff)
        t.add('unembedding: logits', 2 * N * D * V)
        return t
    R, D_k, D_v = c.rank, c.d_k, c.d_v
    contraction = 2 * N * R * D_k * D_v
    t.add('embedding: token embeddings', 2 * N * V * R * D_v)
    t.add('embedding: position embeddings', 2 * N * V * R * D_v)
    t.add('embedding: key vectors', 2 * contraction)
    t.add('attention: QKV key vectors', L * 3 * contraction)
    t.add('attention: SHA', L * (2 * N * N * D_v * R + 3 * R * N * N + 2 * N * N * D_v * R))
    t.add('attention: output key vectors', L * contraction)
    t.add('feed-forward: key vectors', L * 2 * contraction)
    t.add('feed-forward: core', L * 4 * N * R * D_v * c.d_ff)
    t.add('unembedding: key vectors', contraction)
    t.add('unembedding: weights', 2 * N * V * R * D_v)
    return t


def flops_train_per_token(config, seq_len=None):
    """3x the itemized forward FLOPs, divided by the sequence length"""
    N = seq_len or config.max_seq_len
    return 3 * flops_itemized(config, N).total // N


def layernorm_gain_count(config):
    """``(2 L + 1)`` gains of size ``D`` or ``D_k x D_v``"""
    return (2 * config.n_layers + 1) * config.residual_size


def count_actual(params):
    """
    :param params: an ``nn.Module``, a ``{name: tensor}`` mapping, or an
                   iterable of tensors; meta tensors are fine
    :returns: total number of elements
    """
    if isinstance(params, torch.nn.Module):
        params = params.parameters()
    elif isinstance(params, dict):
        params = params.values()
    return sum(p.numel() for p in params)


Discrepancy = namedtuple('Discrepancy', ('quantity', 'formula', 'itemized', 'delta'))


@dataclass
class ResourceReport:
    """
    All counts for one config at one sequence length.

    .. py:attribute:: params_actual

      ``None`` unless the report was made with ``actual=True``
    """
    name: str
    arch: str
    seq_len: int
    resid_size: int
    params_formula: int
    params_itemized: int
    flops_formula_fwd: int
    flops_itemized_fwd: int
    flops_train_per_token: int
    layernorm_gains: int
    params_actual: int = None
    params_items: Tally = field(default_factory=Tally, repr=False)
    flops_items: Tally = field(default_factory=Tally, repr=False)

    @property
    def discrepancies(self):
        """Formula vs. itemized deltas; ``delta = itemized - formula``"""
        return [
            Discrepancy('params', self.params_formula, self.params_itemized,
                        self.params_itemized - self.params_formula),
            Discrepancy('flops_fwd', self.flops_formula_fwd, self.flops_itemized_fwd,
                        self.flops_itemized_fwd - self.flops_formula_fwd),
        ]

    def as_dict(self):
        d = {k: getattr(self, k) for k in REPORT_FIELDS}
        d['params_items'] = self.params_items.items
        d['flops_items'] = self.flops_items.items
        return d


REPORT_FIELDS = (
    'name', 'arch', 'seq_len', 'resid_size', 'params_formula', 'params_itemized',
    'params_actual', 'layernorm_gains', 'flops_formula_fwd', 'flops_itemized_fwd',
    'flops_train_per_token')


def report(config, seq_len=None, actual=False, name=None):
    """
    :param config: model config
    :param int seq_len: defaults to ``max_seq_len``
    :param bool actual: also build the model on the meta device and count
                        its tensors
    :param str name: label for tables
    :returns: :py:class:`ResourceReport`
    """
    N = seq_len or config.max_seq_len
    p_items = params_itemized(config)
    f_items = flops_itemized(config, N)
    params_actual = None
    if actual:
        params_actual = count_actual(build_model(config, device='meta'))
    return ResourceReport(
        name=name or config.arch,
        arch=config.arch,
        seq_len=N,
        resid_size=config.residual_size,
        params_formula=params_formula(config),
        params_itemized=p_items.total,
        flops_formula_fwd=flops_formula(config, N),
        flops_itemized_fwd=f_items.total,
        flops_train_per_token=3 * f_items.total // N,
        layernorm_gains=layernorm_gain_count(config),
        params_actual=params_actual,
        params_items=p_items,
        flops_items=f_items)


ComparisonRow = namedtuple('ComparisonRow', ('quantity', 'transformer', 'rmt', 'pct_diff'))


def pct_change(before, after):
    return 100.0 * (after - before) / before if before else 0.0


def compare(transformer_config, rmt_config, seq_len=None):
    """
    :returns: list of :py:class:`ComparisonRow`, RMT relative to transformer
    """
    a = report(transformer_config, seq_len)
    b = report(rmt_config, seq_len)
    rows = []
    for q in ('resid_size', 'params_formula', 'params_itemized',
              'flops_formula_fwd', 'flops_itemized_fwd', 'flops_train_per_token'):
        x, y = getattr(a, q), getattr(b, q)
        rows.append(ComparisonRow(q, x, y, pct_change(x, y)))
    return rows


ScalingPoint = namedtuple('ScalingPoint', (
    'resid_size', 'params_formula', 'params_itemized', 'flops_formula', 'flops_itemized'))


def with_residual_size(config, resid_size):
    """
    The transformer grows ``D`` alone; the RMT grows ``D_k`` with ``D_v``
    held fixed. Every other dimension stays as in *config*.
    """
    if config.arch == 'transformer':
        return replace(config, d_model=resid_size)
    if resid_size % config.d_v:
        raise ConfigError("Residual size {} is not a multiple of D_v={}".format(
            resid_size, config.d_v))
    return replace(config, d_k=resid_size // config.d_v)


def scaling_series(config, resid_sizes, seq_len=None):
    """
    :param config: base config
    :param [int] resid_sizes: ``D`` values (transformer) or ``D_k * D_v``
                              values (RMT)
    :returns: list of :py:class:`ScalingPoint`, empty for an empty sweep
    """
    points = []
    for size in resid_sizes:
        c = with_residual_size(config, size)
        points.append(ScalingPoint(
            size, params_formula(c), params_itemized(c).total,
            flops_formula(c, seq_len), flops_itemized(c, seq_len).total))
    return points


def doubling_range(start, stop):
    """``16, 32, ..., stop`` for ``doubling_range(16, stop)``"""
    if start < 1 or stop < start:
        raise ConfigError("Bad sweep range {}:{}".format(start, stop))
    values = []
    v = start
    while v <= stop:
        values.append(v)
        v *= 2
    return values
