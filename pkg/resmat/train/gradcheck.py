"""
Central finite-difference check of every parameter gradient.

The loss is ``ce + z`` on one batch, in float64. Each tensor gets two error
measures over its checked entries. The normwise error is the pass
criterion::

  max |analytic - numeric| / max(max |analytic|, max |numeric|, 1e-12)

The elementwise error is reported next to it::

  max over entries of |analytic - numeric| / max(|analytic|, |numeric|, floor)

It is stricter on entries with small gradients, where the finite-difference
roundoff dominates; ``floor`` (default ``1e-8``) keeps entries that are zero
on both sides from dividing by zero. Tensors with more than ``max_entries``
elements are checked on a seeded random sample of that many entries.
"""
import logging
from collections import namedtuple

import numpy as np
import torch

from resmat.models import new_model
from resmat.train.optim import loss_fn

logger = logging.getLogger(__name__)

TensorCheck = namedtuple('TensorCheck', (
    'name', 'numel', 'checked', 'rel_error', 'elementwise_error'))

ELEMENT_FLOOR = 1e-8


def relative_errors(analytic, numeric, floor=ELEMENT_FLOOR):
    """:returns: ``(normwise, elementwise)`` errors of two float64 vectors"""
    diff = (analytic - numeric).abs()
    scale = max(analytic.abs().max().item(), numeric.abs().max().item(), 1e-12)
    per_entry = torch.maximum(analytic.abs(), numeric.abs()).clamp(min=floor)
    return diff.max().item() / scale, (diff / per_entry).max().item()


class GradCheckResult:
    """
    .. py:attribute:: checks

      One :py:class:`TensorCheck` per parameter tensor, in
      ``named_parameters()`` order
    """

    def __init__(self, checks):
        self.checks = list(checks)

    @property
    def max_rel_error(self):
        return max((c.rel_error for c in self.checks), default=0.0)

    @property
    def max_elementwise_error(self):
        return max((c.elementwise_error for c in self.checks), default=0.0)

    @property
    def worst(self):
        return max(self.checks, key=lambda c: c.rel_error)

    @property
    def sampled(self):
        """Checks that covered only part of their tensor"""
        return [c for c in self.checks if c.checked < c.numel]


def _loss(model, inputs, targets, z_coef):
    ce, z = loss_fn(model(inputs), targets, z_coef)
    return ce + z


def _entries(numel, max_entries, rng):
    if numel <= max_entries:
        return np.arange(numel)
    return np.sort(rng.choice(numel, size=max_entries, replace=False))


def grad_check(model, inputs, targets, fd_step=1e-5, z_coef=1e-4,
               max_entries=10000, seed=0):
    """
    :param model: a float64 model
    :param Tensor inputs: ``(B, n)`` ids
    :param Tensor targets: ``(B, n)`` ids
    :param float fd_step: central difference step
    :param int max_entries: sample tensors larger than this
    :returns: :py:class:`GradCheckResult`
    """
    model.zero_grad()
    loss = _loss(model, inputs, targets, z_coef)
    loss.backward()
    rng = np.random.default_rng(seed)
    checks = []
    with torch.no_grad():
        for name, p in model.named_parameters():
            analytic = p.grad.reshape(-1)
            flat = p.data.view(-1)
            idx = _entries(flat.numel(), max_entries, rng)
            numeric = torch.empty(len(idx), dtype=torch.float64)
            for j, i in enumerate(idx.tolist()):
                orig = flat[i].item()
                flat[i] = orig + fd_step
                plus = _loss(model, inputs, targets, z_coef).item()
                flat[i] = orig - fd_step
                minus = _loss(model, inputs, targets, z_coef).item()
                flat[i] = orig
                numeric[j] = (plus - minus) / (2 * fd_step)
            a = analytic[torch.from_numpy(idx)].double().cpu()
            err, elementwise = relative_errors(a, numeric)
            checks.append(TensorCheck(name, flat.numel(), len(idx), err, elementwise))
            logger.debug("%s: rel err %.3g (elementwise %.3g) over %d entries",
                         name, err, elementwise, len(idx))
    return GradCheckResult(checks)


def grad_check_config(config, batch_size=2, fd_step=1e-5, seed=0, z_coef=1e-4,
                      max_entries=10000):
    """
    Build a float64 model from *config* with init *seed*, draw a random batch
    of full-length sequences from the same seed, and run :py:func:`grad_check`.
    """
    model = new_model(config, seed=seed, dtype=torch.float64)
    g = torch.Generator().manual_seed(seed)
    shape = (batch_size, config.max_seq_len)
    inputs = torch.randint(0, config.vocab_size, shape, generator=g)
    targets = torch.randint(0, config.vocab_size, shape, generator=g)
    result = grad_check(model, inputs, targets, fd_step, z_coef, max_entries, seed)
    logger.info("Gradient check %s: max rel err %.3g (%s)",
                config.arch, result.max_rel_error, result.worst.name)
    return result
