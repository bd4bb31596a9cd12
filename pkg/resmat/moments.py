"""
Mean and variance propagation through storage, retrieval and linear maps at
initialization.

All three operations are sums of products of zero-mean weights with inputs,
so the output mean is 0 and the variances depend only on the number of terms
in each sum. With ``s`` the weight variance and ``E[x^2] = var_x + mu_x^2``:

* storage, dims ``(R, d_k)``: ``var_out = R s E[x^2]``,
  ``var_gin = d_k s E[g^2]``
* retrieval, dims ``(R, d_k)``: ``var_out = d_k s E[x^2]``,
  ``var_gin = R s E[g^2]``
* linear ``y = W x``, dims ``(d_in, d_out)``: ``var_out = d_in s E[x^2]``,
  ``var_gin = d_out s E[g^2]``

:py:func:`monte_carlo_moments` checks these
empirically, and :py:func:`variance_ratio_report` plugs real model shapes and
init variances into them.
"""
import logging
import math
from collections import namedtuple
from dataclasses import dataclass

import numpy as np

from resmat.config import preset
from resmat.initializers import init_variance

logger = logging.getLogger(__name__)

KINDS = ('storage', 'retrieval', 'linear')
DISTRIBUTIONS = ('gaussian', 'uniform')
MIN_TRIALS = 1000
CHUNK_SIZE = 8192
#: Largest |z| at which an empirical moment still agrees with its closed form
Z_BOUND = 3.0


class MomentError(ValueError):
    """Negative variances, nonzero weight means, or too few trials"""
    pass


@dataclass(frozen=True)
class MomentSpec:
    """
    First two moments of the inputs, weights and output gradients of one
    operation.

    .. py:attribute:: dims

      ``(R, d_k)`` for storage and retrieval, ``(d_in, d_out)`` for linear
    """
    dims: tuple
    var_w: float
    mu_x: float = 0.0
    var_x: float = 1.0
    mu_w: float = 0.0
    mu_g: float = 0.0
    var_g: float = 1.0

    def validate(self):
        for name in ('var_x', 'var_w', 'var_g'):
            if getattr(self, name) < 0:
                raise MomentError("{} must not be negative, got {}".format(
                    name, getattr(self, name)))
        if self.mu_w != 0:
            raise MomentError("Closed forms assume zero-mean weights, got mu_w={}".format(
                self.mu_w))
        if len(self.dims) != 2 or min(self.dims) < 1:
            raise MomentError("dims must be two positive sizes, got {}".format(self.dims))
        return self

    @property
    def x_second_moment(self):
        return self.var_x + self.mu_x ** 2

    @property
    def g_second_moment(self):
        return self.var_g + self.mu_g ** 2


Moments = namedtuple('Moments', ('mu_out', 'var_out', 'mu_gin', 'var_gin'))


def fan_sizes(kind, dims):
    """
    :returns: ``(terms summed going forward, terms summed going backward)``
    """
    a, b = dims
    if kind == 'storage':
        return a, b
    elif kind == 'retrieval':
        return b, a
    elif kind == 'linear':
        return a, b
    raise MomentError("Unknown operation kind {!r}".format(kind))


def _closed_form(kind, spec):
    spec.validate()
    n_fwd, n_bwd = fan_sizes(kind, spec.dims)
    return Moments(
        mu_out=0.0,
        var_out=n_fwd * spec.var_w * spec.x_second_moment,
        mu_gin=0.0,
        var_gin=n_bwd * spec.var_w * spec.g_second_moment)


def storage_moments(spec):
    """
    :param MomentSpec spec: ``dims = (R, d_k)``; ``x`` are the ``R`` stored
                            data entries, ``g`` the gradient of the memory
    :returns: :py:class:`Moments`
    """
    return _closed_form('storage', spec)


def retrieval_moments(spec):
    """
    :param MomentSpec spec: ``dims = (R, d_k)``; ``x`` are memory entries,
                            ``g`` the gradient of the ``R`` retrieved entries
    :returns: :py:class:`Moments`

    Retrieval forward is storage backward with ``x`` and ``g`` swapped.
    """
    return _closed_form('retrieval', spec)


def linear_moments(spec):
    """
    :param MomentSpec spec: ``dims = (d_in, d_out)`` for ``y = W x``
    :returns: :py:class:`Moments`
    """
    return _closed_form('linear', spec)


CLOSED_FORMS = {
    'storage': storage_moments,
    'retrieval': retrieval_moments,
    'linear': linear_moments,
}


class MonteCarloMoments(namedtuple('MonteCarloMoments', (
        'mu_out', 'var_out', 'mu_gin', 'var_gin',
        'se_mu_out', 'se_var_out', 'se_mu_gin', 'se_var_gin', 'trials'))):
    """
    Sample moments plus their standard errors. The standard error of a sample
    variance is ``sqrt((m4 - var^2) / trials)``, with ``m4`` the fourth
    central sample moment.
    """
    __slots__ = ()

    @property
    def moments(self):
        return Moments(self.mu_out, self.var_out, self.mu_gin, self.var_gin)

    def z_scores(self, expected):
        """
        :param Moments expected: closed-form values
        :returns: :py:class:`Moments` of ``(empirical - expected) / se``
        """
        def z(value, target, se):
            if se == 0:
                return 0.0 if value == target else math.inf
            return (value - target) / se
        return Moments(
            z(self.mu_out, expected.mu_out, self.se_mu_out),
            z(self.var_out, expected.var_out, self.se_var_out),
            z(self.mu_gin, expected.mu_gin, self.se_mu_gin),
            z(self.var_gin, expected.var_gin, self.se_var_gin))


def _draw(rng, shape, mu, var, distribution):
    if distribution == 'gaussian':
        return mu + math.sqrt(var) * rng.standard_normal(shape)
    half_width = math.sqrt(3.0 * var)
    return mu + rng.uniform(-half_width, half_width, shape)


def _sample_chunk(rng, count, n_fwd, n_bwd, spec, distribution):
    # output entry 0 reads weight column 0; the input-gradient entry 0 reads
    # weight row 0; both share weight [0, 0]
    column = _draw(rng, (count, n_fwd), 0.0, spec.var_w, distribution)
    row_rest = _draw(rng, (count, n_bwd - 1), 0.0, spec.var_w, distribution)
    row = np.concatenate([column[:, :1], row_rest], axis=1)
    x = _draw(rng, (count, n_fwd), spec.mu_x, spec.var_x, distribution)
    g = _draw(rng, (count, n_bwd), spec.mu_g, spec.var_g, distribution)
    return np.einsum('ci,ci->c', column, x), np.einsum('ci,ci->c', row, g)


def _summarize(samples):
    n = samples.shape[0]
    mean = samples.mean()
    centered = samples - mean
    var = np.mean(centered ** 2)
    m4 = np.mean(centered ** 4)
    return (float(mean), float(var),
            math.sqrt(var / n), math.sqrt(max(m4 - var ** 2, 0.0) / n))


def monte_carlo_moments(kind, spec, trials, seed, distribution='gaussian'):
    """
    :param str kind: ``'storage'``, ``'retrieval'`` or ``'linear'``
    :param MomentSpec spec: dims and variances
    :param int trials: number of independent draws, at least 1000
    :param int seed: the same seed always gives bit-identical results
    :param str distribution: ``'gaussian'`` or ``'uniform'``; the closed forms
                             depend only on the first two moments
    :returns: :py:class:`MonteCarloMoments`

    Each trial draws fresh weights, inputs and output gradients, evaluates
    entry 0 of the operation's output and entry 0 of its exact adjoint
    applied to the output gradient. Trials are split into chunks, each with
    its own stream spawned from *seed*, so the chunks could be sampled in
    parallel without changing the result.
    """
    spec.validate()
    if trials < MIN_TRIALS:
        raise MomentError("Need at least {} trials, got {}".format(MIN_TRIALS, trials))
    if distribution not in DISTRIBUTIONS:
        raise MomentError("Unknown distribution {!r}".format(distribution))
    n_fwd, n_bwd = fan_sizes(kind, spec.dims)

    n_chunks = -(-trials // CHUNK_SIZE)
    streams = np.random.SeedSequence(seed).spawn(n_chunks)
    outs, gins = [], []
    for i, stream in enumerate(streams):
        count = min(CHUNK_SIZE, trials - i * CHUNK_SIZE)
        out, gin = _sample_chunk(
            np.random.default_rng(stream), count, n_fwd, n_bwd, spec, distribution)
        outs.append(out)
        gins.append(gin)

    mu_out, var_out, se_mu_out, se_var_out = _summarize(np.concatenate(outs))
    mu_gin, var_gin, se_mu_gin, se_var_gin = _summarize(np.concatenate(gins))
    return MonteCarloMoments(
        mu_out, var_out, mu_gin, var_gin,
        se_mu_out, se_var_out, se_mu_gin, se_var_gin, trials)


#: Settings exercised by ``resmat moments``: five per operation kind
DEFAULT_SETTINGS = (
    ('storage', MomentSpec(dims=(4, 8), var_w=0.1)),
    ('storage', MomentSpec(dims=(12, 32), var_w=1 / 12)),
    ('storage', MomentSpec(dims=(16, 64), var_w=0.02, mu_x=0.5)),
    ('storage', MomentSpec(dims=(2, 4), var_w=1.0, var_x=2.0, mu_g=-0.3)),
    ('storage', MomentSpec(dims=(8, 16), var_w=0.05, var_g=0.5)),
    ('retrieval', MomentSpec(dims=(4, 8), var_w=1 / 8)),
    ('retrieval', MomentSpec(dims=(12, 32), var_w=1 / 32)),
    ('retrieval', MomentSpec(dims=(16, 64), var_w=0.01, mu_x=1.0)),
    ('retrieval', MomentSpec(dims=(2, 4), var_w=0.5, var_g=3.0)),
    ('retrieval', MomentSpec(dims=(8, 16), var_w=0.1, mu_g=0.2, var_x=0.5)),
    ('linear', MomentSpec(dims=(64, 16), var_w=2 / 80)),
    ('linear', MomentSpec(dims=(16, 48), var_w=2 / 64)),
    ('linear', MomentSpec(dims=(32, 32), var_w=1 / 32, mu_x=0.4)),
    ('linear', MomentSpec(dims=(8, 2), var_w=0.3, var_g=2.0)),
    ('linear', MomentSpec(dims=(3, 5), var_w=1.0, mu_g=1.0)),
)

VerificationRow = namedtuple('VerificationRow', (
    'kind', 'dims', 'var_w', 'quantity', 'closed_form', 'empirical', 'se', 'z'))


def verify_closed_forms(settings=DEFAULT_SETTINGS, trials=100000, seed=0,
                        distribution='gaussian'):
    """
    :returns: one :py:class:`VerificationRow` per (setting, moment). Setting
              ``i`` uses seed ``seed + i``.
    """
    rows = []
    for i, (kind, spec) in enumerate(settings):
        expected = CLOSED_FORMS[kind](spec)
        mc = monte_carlo_moments(kind, spec, trials, seed + i, distribution)
        z = mc.z_scores(expected)
        ses = (mc.se_mu_out, mc.se_var_out, mc.se_mu_gin, mc.se_var_gin)
        for q, closed, emp, se, zq in zip(Moments._fields, expected, mc.moments, ses, z):
            rows.append(VerificationRow(kind, tuple(spec.dims), spec.var_w, q,
                                        closed, emp, se, zq))
        logger.debug("%s %s: max |z| = %.2f", kind, spec.dims, max(abs(v) for v in z))
    return rows


def outliers(rows, bound=Z_BOUND):
    """:returns: the rows of :py:func:`verify_closed_forms` with ``|z| > bound``"""
    return [r for r in rows if abs(r.z) > bound]


VarianceRatioRow = namedtuple('VarianceRatioRow', (
    'layer', 'operation', 'model', 'fwd_ratio', 'bwd_ratio'))

#: Reference ratios for GPT2-medium-sized models, keyed by (layer, operation, model)
REFERENCE_RATIOS = {
    ('attn', 'storage', 'transformer'): (1.0, 1.0),
    ('attn', 'retrieval', 'transformer'): (0.5, 1.5),
    ('ff', 'storage', 'transformer'): (1.6, 0.4),
    ('ff', 'retrieval', 'transformer'): (0.4, 1.6),
    ('attn', 'storage', 'rmt'): (0.4, 1.6),
    ('attn', 'retrieval', 'rmt'): (1.14, 0.86),
    ('ff', 'storage', 'rmt'): (1.0, 1.0),
    ('ff', 'retrieval', 'rmt'): (1.0, 1.0),
}


def _ratio(out, inp):
    return out / inp if inp else 0.0


def _ratios(moments, spec):
    return (_ratio(moments.var_out, spec.var_x), _ratio(moments.var_gin, spec.var_g))


class VarianceRatioReport:
    """
    Forward (``var_out / var_in``) and backward (``var_gin / var_gout``)
    variance ratios of the attention and feed-forward reads and writes of
    both architectures.

    .. py:attribute:: rows

      List of :py:class:`VarianceRatioRow`
    """

    columns = VarianceRatioRow._fields

    def __init__(self, rows):
        self.rows = list(rows)

    def __eq__(self, other):
        return isinstance(other, VarianceRatioReport) and self.rows == other.rows

    def __iter__(self):
        return iter(self.rows)

    def row(self, layer, operation, model):
        for r in self.rows:
            if (r.layer, r.operation, r.model) == (layer, operation, model):
                return r
        raise KeyError((layer, operation, model))

    def discrepancies(self, places=2):
        """
        :returns: ``[(row, reference fwd, reference bwd)]`` for rows that do
                  not match :py:data:`REFERENCE_RATIOS` to *places* decimals
        """
        out = []
        for r in self.rows:
            ref = REFERENCE_RATIOS.get((r.layer, r.operation, r.model))
            if ref is None:
                continue
            if (round(r.fwd_ratio, places) != round(ref[0], places) or
                    round(r.bwd_ratio, places) != round(ref[1], places)):
                out.append((r, ref[0], ref[1]))
        return out


def transformer_ratio_rows(config):
    """
    Q, K and V are one fused ``D -> 3 H D_h`` map; the output projection is
    one ``H D_h -> D`` map. Weight variances come from the config's init mode.
    """
    c = config
    hd = c.n_heads * c.d_head
    maps = (
        ('attn', 'storage', 'W_O', (hd, c.d_model)),
        ('attn', 'retrieval', 'W_Q', (c.d_model, 3 * hd)),
        ('ff', 'storage', 'W_2', (c.d_ff, c.d_model)),
        ('ff', 'retrieval', 'W_1', (c.d_model, c.d_ff)),
    )
    rows = []
    for layer, op, name, dims in maps:
        spec = MomentSpec(dims=dims, var_w=init_variance(name, c))
        rows.append(VarianceRatioRow(layer, op, 'transformer',
                                     *_ratios(linear_moments(spec), spec)))
    return rows


def rmt_ratio_rows(config):
    """Storage and retrieval ratios for ``w_O``, ``r_Q``, ``w_FF``, ``r_FF``"""
    c = config
    maps = (
        ('attn', 'storage', 'w_O', storage_moments),
        ('attn', 'retrieval', 'r_Q', retrieval_moments),
        ('ff', 'storage', 'w_FF', storage_moments),
        ('ff', 'retrieval', 'r_FF', retrieval_moments),
    )
    rows = []
    for layer, op, name, closed_form in maps:
        spec = MomentSpec(dims=(c.rank, c.d_k), var_w=init_variance(name, c))
        rows.append(VarianceRatioRow(layer, op, 'rmt',
                                     *_ratios(closed_form(spec), spec)))
    return rows


def variance_ratio_report(transformer_config=None, rmt_config=None):
    """
    :param transformer_config: defaults to the ``gpt2-medium`` preset
    :param rmt_config: defaults to the ``gpt2-medium`` RMT mirror
    :returns: :py:class:`VarianceRatioReport`; a pure function of the configs
    """
    transformer_config = transformer_config or preset('transformer', 'gpt2-medium')
    rmt_config = rmt_config or preset('rmt', 'gpt2-medium')
    return VarianceRatioReport(
        transformer_ratio_rows(transformer_config) + rmt_ratio_rows(rmt_config))
