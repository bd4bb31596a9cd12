"""
Loss, learning-rate schedule and AdamW.

The optimized loss is cross-entropy plus a z-loss term
``z_coef * mean(logsumexp(logits) ** 2)``; only the cross-entropy is
reported as "the loss".
"""
import math

import torch
import torch.nn.functional as F

from resmat.models import is_decayed


def loss_fn(logits, targets, z_coef=1e-4):
    """
    :param Tensor logits: ``(..., V)``
    :param Tensor targets: ids with the shape of *logits* minus the last dim
    :param float z_coef: z-loss coefficient
    :returns: ``(ce, z)`` scalar tensors; optimize ``ce + z``
    """
    flat = logits.reshape(-1, logits.shape[-1])
    ce = F.cross_entropy(flat, targets.reshape(-1))
    z = z_coef * torch.logsumexp(flat, dim=-1).pow(2).mean()
    return ce, z


def warmup_steps(config):
    return math.ceil(config.warmup_frac * config.steps)


def lr_at(step, config):
    """
    :param int step: 1-based step, ``1 <= step <= config.steps``
    :param config: anything with ``lr``, ``steps``, ``warmup_frac`` and
                   ``final_lr_frac``
    :returns: learning rate

    Linear from 0 to ``lr`` over the warmup steps, then a half cosine from
    ``lr`` down to ``final_lr_frac * lr`` at the last step.
    """
    lr_max = config.lr
    lr_min = config.final_lr_frac * lr_max
    warmup = warmup_steps(config)
    if step <= warmup:
        return lr_max * step / warmup
    if config.steps == warmup:
        return lr_min
    t = min(step - warmup, config.steps - warmup) / (config.steps - warmup)
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi * t))


def adamw_step(p, grad, exp_avg, exp_avg_sq, step, lr, beta1, beta2, eps, weight_decay):
    """
    One in-place AdamW update of a single tensor.

    :param Tensor p: parameter data, updated in place
    :param Tensor grad: its gradient
    :param Tensor exp_avg: first moment, updated in place
    :param Tensor exp_avg_sq: second moment, updated in place
    :param int step: 1-based count of updates applied so far, this one included

    Decoupled decay ``p *= 1 - lr * weight_decay`` is applied before the
    Adam update, with bias correction on both moments.
    """
    exp_avg.mul_(beta1).add_(grad, alpha=1 - beta1)
    exp_avg_sq.mul_(beta2).addcmul_(grad, grad, value=1 - beta2)
    bias_correction1 = 1 - beta1 ** step
    bias_correction2 = 1 - beta2 ** step
    denom = (exp_avg_sq.sqrt() / math.sqrt(bias_correction2)).add_(eps)
    if weight_decay != 0:
        p.mul_(1 - lr * weight_decay)
    p.addcdiv_(exp_avg, denom, value=-lr / bias_correction1)


class AdamW(torch.optim.Optimizer):
    """
    AdamW with per-group decay. State per parameter is ``step``,
    ``exp_avg`` and ``exp_avg_sq``, the names :py:mod:`resmat.train.checkpoint`
    saves them under.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.95), eps=1e-8, weight_decay=0.0):
        defaults = dict(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)
        super().__init__(params, defaults)

    def set_lr(self, lr):
        for group in self.param_groups:
            group['lr'] = lr

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()

        for group in self.param_groups:
            beta1, beta2 = group['betas']
            for p in group['params']:
                if p.grad is None:
                    continue
                state = self.state[p]
                if len(state) == 0:
                    state['step'] = 0
                    state['exp_avg'] = torch.zeros_like(p, memory_format=torch.preserve_format)
                    state['exp_avg_sq'] = torch.zeros_like(p, memory_format=torch.preserve_format)
                state['step'] += 1
                adamw_step(p, p.grad, state['exp_avg'], state['exp_avg_sq'],
                           state['step'], group['lr'], beta1, beta2,
                           group['eps'], group['weight_decay'])
        return loss


def param_groups(model, weight_decay):
    """
    Two groups: decayed weights, and the gains and embedding/unembedding
    tensors that are never decayed. Each group carries ``names`` in
    ``named_parameters()`` order.
    """
    decay, no_decay = [], []
    decay_names, no_decay_names = [], []
    for name, p in model.named_parameters():
        if is_decayed(name):
            decay.append(p)
            decay_names.append(name)
        else:
            no_decay.append(p)
            no_decay_names.append(name)
    return [
        dict(params=decay, names=decay_names, weight_decay=weight_decay),
        dict(params=no_decay, names=no_decay_names, weight_decay=0.0),
    ]


def build_optimizer(model, config):
    """:py:class:`AdamW` over *model* with the run *config*'s hyperparameters"""
    return AdamW(param_groups(model, config.weight_decay), lr=config.lr,
                 betas=(config.beta1, config.beta2), eps=config.adam_eps,
                 weight_decay=config.weight_decay)
