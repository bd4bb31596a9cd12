"""
Construct either architecture from its config.
"""
import torch

from resmat.initializers import init_parameters, is_gain, base_name
from resmat.rmt import RMT
from resmat.transformer import Transformer

MODEL_CLASSES = {
    'transformer': Transformer,
    'rmt': RMT,
}

#: Tensors that are never weight-decayed, in addition to every LayerNorm gain
NO_DECAY = frozenset(('W_E', 'W_PE', 'W_U'))

DTYPES = {
    'float32': torch.float32,
    'float64': torch.float64,
}


def build_model(config, device=None, dtype=None):
    """
    :param config: :py:class:`~resmat.config.TransformerConfig` or
                   :py:class:`~resmat.config.RMTConfig`
    :returns: uninitialized model (gains are 1, everything else is garbage)
    """
    if isinstance(dtype, str):
        dtype = DTYPES[dtype]
    return MODEL_CLASSES[config.arch](config, device=device, dtype=dtype)


def new_model(config, seed=0, device=None, dtype=None):
    """Build and initialize a model; the same seed gives the same weights"""
    return init_parameters(build_model(config, device, dtype), seed)


def is_decayed(name):
    """
    ``False`` for LayerNorm gains and the embedding/unembedding tensors,
    ``True`` for every other weight, key and storage vectors included.
    """
    return not (is_gain(name) or base_name(name) in NO_DECAY)
