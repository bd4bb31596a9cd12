"""
Parameter initialization with explicitly declared fan pairs.

Every learnable tensor has a :py:class:`FanPair` describing how many inputs
feed each output (``fan_in``) and how many outputs each input feeds
(``fan_out``). The init mode turns the pair into a variance:

=========== ====================================================================
``default`` Xavier ``2 / (fan_in + fan_out)`` for matrices; ``1 / fan_in`` for
            key vectors, which makes the forward variance ratio of every
            storage (``R * var``) and retrieval (``d_k * var``) exactly 1
``xavier``  Xavier for every tensor, key vectors included
``lecun``   ``1 / fan_in`` for every tensor
=========== ====================================================================

Transformer fans treat Q, K and V as one fused ``D -> 3 H D_h`` map and the
output projection as one ``H D_h -> D`` map. Retrieval keys are declared as
``(D_k, R)`` maps and storage keys as ``(R, D_k)`` maps.

With ``inverse_layer_scaling`` the standard deviation of every tensor that
writes into the residual stream (``W_O``, ``W_2`` for the transformer;
``w_O``, ``w_FF`` for the RMT) is multiplied by ``1 / sqrt(2 L)``.

LayerNorm gains start at 1.
"""
import math
from collections import namedtuple

import torch

FanPair = namedtuple('FanPair', ('fan_in', 'fan_out'))

RETRIEVAL_KEYS = frozenset(('r_Q', 'r_K', 'r_V', 'r_FF', 'r_U'))
STORAGE_KEYS = frozenset(('w_E', 'w_PE', 'w_O', 'w_FF'))
RESIDUAL_WRITERS = {
    'transformer': frozenset(('W_O', 'W_2')),
    'rmt': frozenset(('w_O', 'w_FF')),
}


def base_name(name):
    """``'layers.3.W_Q'`` -> ``'W_Q'``"""
    return name.rsplit('.', 1)[-1]


def is_gain(name):
    return base_name(name).startswith('ln_')


def is_key_vector(name):
    n = base_name(name)
    return n in RETRIEVAL_KEYS or n in STORAGE_KEYS


def transformer_fans(config):
    c = config
    hd = c.n_heads * c.d_head
    return {
        'W_E': FanPair(1, c.d_model),
        'W_PE': FanPair(1, c.d_model),
        'W_Q': FanPair(c.d_model, 3 * hd),
        'W_K': FanPair(c.d_model, 3 * hd),
        'W_V': FanPair(c.d_model, 3 * hd),
        'W_O': FanPair(hd, c.d_model),
        'W_1': FanPair(c.d_model, c.d_ff),
        'W_2': FanPair(c.d_ff, c.d_model),
        'W_U': FanPair(c.d_model, c.vocab_size),
    }


def rmt_fans(config):
    c = config
    retrieval = FanPair(c.d_k, c.rank)
    storage = FanPair(c.rank, c.d_k)
    fans = {
        'W_E': FanPair(1, c.d_v),
        'W_PE': FanPair(1, c.d_v),
        'W_1': FanPair(c.rank * c.d_v, c.d_ff),
        'W_2': FanPair(c.d_ff, c.rank * c.d_v),
        'W_U': FanPair(c.rank * c.d_v, c.vocab_size),
    }
    fans.update({k: retrieval for k in RETRIEVAL_KEYS})
    fans.update({k: storage for k in STORAGE_KEYS})
    return fans


def declared_fans(config):
    """
    :param config: :py:class:`~resmat.config.TransformerConfig` or
                   :py:class:`~resmat.config.RMTConfig`
    :returns: ``{base tensor name: FanPair}``
    """
    if config.arch == 'transformer':
        return transformer_fans(config)
    return rmt_fans(config)


def init_variance(name, config, mode=None):
    """
    :param str name: parameter name, with or without the ``layers.i.`` prefix
    :param config: model config
    :param str mode: overrides ``config.init``
    :returns: the initial variance of the tensor, ``1.0`` for gains

    Includes inverse layer scaling when the config asks for it.
    """
    if is_gain(name):
        return 1.0
    mode = mode or config.init
    n = base_name(name)
    fans = declared_fans(config)[n]
    if mode == 'lecun' or (mode == 'default' and is_key_vector(n)):
        var = 1.0 / fans.fan_in
    elif mode in ('xavier', 'default'):
        var = 2.0 / (fans.fan_in + fans.fan_out)
    else:
        raise ValueError("Unknown init mode {!r}".format(mode))
    if (config.inverse_layer_scaling and config.n_layers > 0 and
            n in RESIDUAL_WRITERS[config.arch]):
        var /= 2 * config.n_layers
    return var


def init_parameters(model, seed=0):
    """
    :param torch.nn.Module model: a :py:class:`~resmat.transformer.Transformer`
                                  or :py:class:`~resmat.rmt.RMT`
    :param int seed: seed for the zero-mean Gaussian draws

    Fill every parameter in place, in ``named_parameters()`` order, so the
    same seed always produces the same weights.
    """
    config = model.config
    generator = torch.Generator(device='cpu')
    generator.manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if is_gain(name):
                p.fill_(1.0)
                continue
            std = math.sqrt(init_variance(name, config))
            sample = torch.randn(
                p.shape, generator=generator, dtype=torch.float64) * std
            p.copy_(sample.to(p.dtype))
    return model
