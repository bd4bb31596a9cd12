"""
Baseline decoder-only transformer with pre-LayerNorm, no biases and untied
embeddings.

Tensors are token-major: the residual state of a batch is ``(B, n, D)`` and
logits are ``(B, n, V)``. Each sublayer is a plain function of its normalized
input and its weights, so the same code serves the :py:class:`Transformer`
module, the tests' loop oracles and the FLOP counts::

  from resmat.config import preset
  from resmat.models import new_model

  model = new_model(preset('transformer', 'tiny'), seed=0, dtype=torch.float64)
  logits = model(torch.tensor([[1, 2, 3]]))   # (1, 3, 11)

Attention is causal: scores for keys after the query position are set to
``-inf`` before the softmax.
"""
import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from resmat.memory import ShapeError


class TokenRangeError(ValueError):
    """A token id is outside ``[0, V)`` or a sequence is longer than ``N``"""
    pass


def check_tokens(tokens, vocab_size, max_seq_len):
    """
    :param Tensor tokens: ``(n,)`` or ``(B, n)`` integer ids
    :returns: *tokens* as a ``(B, n)`` long tensor

    Raises :py:class:`TokenRangeError` for ids outside ``[0, vocab_size)`` and
    for sequences that are empty or longer than *max_seq_len*.
    """
    tokens = torch.as_tensor(tokens)
    if tokens.dim() == 1:
        tokens = tokens.unsqueeze(0)
    if tokens.dim() != 2:
        raise ShapeError("Expected (B, n) tokens, got {}".format(tuple(tokens.shape)))
    if tokens.dtype.is_floating_point or tokens.dtype == torch.bool:
        raise TokenRangeError("Token ids must be integers, got {}".format(tokens.dtype))
    n = tokens.shape[1]
    if not 1 <= n <= max_seq_len:
        raise TokenRangeError(
            "Sequence length must be in [1, {}], got {}".format(max_seq_len, n))
    if tokens.numel() and (int(tokens.min()) < 0 or int(tokens.max()) >= vocab_size):
        raise TokenRangeError(
            "Token ids must be in [0, {}), got range [{}, {}]".format(
                vocab_size, int(tokens.min()), int(tokens.max())))
    return tokens.long()


def gelu(x, approx=False):
    """Exact erf Gelu, or the tanh approximation if *approx*"""
    return F.gelu(x, approximate='tanh' if approx else 'none')


def causal_attention(q, k, v, scale, upcast=True):
    """
    :param Tensor q: ``(B, H, n, d)``
    :param Tensor k: ``(B, H, n, d)``
    :param Tensor v: ``(B, H, n, d_v)``
    :param float scale: multiplies the raw scores, e.g. ``1 / sqrt(d)``
    :param bool upcast: compute the softmax in float64
    :returns: ``(B, H, n, d_v)``
    """
    n = q.shape[-2]
    scores = torch.matmul(q, k.transpose(-1, -2)) * scale
    mask = torch.ones(n, n, dtype=torch.bool, device=q.device).triu(diagonal=1)
    scores = scores.masked_fill(mask, float('-inf'))
    if upcast:
        weights = torch.softmax(scores.double(), dim=-1).to(v.dtype)
    else:
        weights = torch.softmax(scores, dim=-1)
    return torch.matmul(weights, v)


def layernorm(x, gain, eps=1e-6):
    """LayerNorm over the last dimension, gain only"""
    return F.layer_norm(x, (x.shape[-1],), weight=gain, eps=eps)


def embed(tokens, W_E, W_PE):
    """
    :param Tensor tokens: ``(B, n)`` ids
    :param Tensor W_E: ``(D, V)`` token embeddings, one column per id
    :param Tensor W_PE: ``(D, N)`` position embeddings
    :returns: ``(B, n, D)``; row ``t`` is ``W_E[:, tokens[t]] + W_PE[:, t]``
    """
    n = tokens.shape[-1]
    return F.embedding(tokens, W_E.t()) + W_PE[:, :n].t()


def attention(xn, W_Q, W_K, W_V, W_O, upcast=True):
    """
    :param Tensor xn: ``(B, n, D)`` normalized residual state
    :param Tensor W_Q: ``(H, D_h, D)``, likewise *W_K* and *W_V*
    :param Tensor W_O: ``(H, D, D_h)``
    :returns: ``(B, n, D)`` delta, the sum over heads of ``W_O[h] SHA(...)``
    """
    q = torch.einsum('hed,bnd->bhne', W_Q, xn)
    k = torch.einsum('hed,bnd->bhne', W_K, xn)
    v = torch.einsum('hed,bnd->bhne', W_V, xn)
    heads = causal_attention(q, k, v, 1.0 / math.sqrt(W_Q.shape[1]), upcast)
    return torch.einsum('hde,bhne->bnd', W_O, heads)


def feed_forward(xn, W_1, W_2, activation=gelu):
    """
    :param Tensor xn: ``(B, n, D)``
    :param Tensor W_1: ``(D_FF, D)``
    :param Tensor W_2: ``(D, D_FF)``
    :param activation: elementwise function, Gelu by default
    :returns: ``(B, n, D)`` delta ``W_2 act(W_1 x)`` per token
    """
    return torch.matmul(activation(torch.matmul(xn, W_1.t())), W_2.t())


def unembed(xn, W_U):
    """``(B, n, D)`` x ``(V, D)`` -> ``(B, n, V)`` logits"""
    return torch.matmul(xn, W_U.t())


class TransformerLayer(nn.Module):
    """One pre-LN attention sublayer followed by one pre-LN feed-forward sublayer"""

    def __init__(self, config, device=None, dtype=None):
        super().__init__()
        c = config
        kw = dict(device=device, dtype=dtype)
        self.config = config
        self.ln_attn = nn.Parameter(torch.ones(c.d_model, **kw))
        self.W_Q = nn.Parameter(torch.empty(c.n_heads, c.d_head, c.d_model, **kw))
        self.W_K = nn.Parameter(torch.empty(c.n_heads, c.d_head, c.d_model, **kw))
        self.W_V = nn.Parameter(torch.empty(c.n_heads, c.d_head, c.d_model, **kw))
        self.W_O = nn.Parameter(torch.empty(c.n_heads, c.d_model, c.d_head, **kw))
        self.ln_ff = nn.Parameter(torch.ones(c.d_model, **kw))
        self.W_1 = nn.Parameter(torch.empty(c.d_ff, c.d_model, **kw))
        self.W_2 = nn.Parameter(torch.empty(c.d_model, c.d_ff, **kw))

    def attention_delta(self, x):
        c = self.config
        xn = layernorm(x, self.ln_attn, c.eps)
        return attention(xn, self.W_Q, self.W_K, self.W_V, self.W_O,
                         c.upcast_attention)

    def feed_forward_delta(self, x):
        c = self.config
        xn = layernorm(x, self.ln_ff, c.eps)
        return feed_forward(xn, self.W_1, self.W_2,
                            lambda h: gelu(h, c.gelu_approx))

    def forward(self, x):
        x = x + self.attention_delta(x)
        return x + self.feed_forward_delta(x)


class Transformer(nn.Module):
    """
    :param TransformerConfig config: model shape
    :param device: torch device; ``'meta'`` allocates nothing, which is
                   enough to count parameters
    :param dtype: parameter dtype

    Weights are created uninitialized; use
    :py:func:`resmat.initializers.init_parameters` or
    :py:func:`resmat.models.new_model`.
    """

    def __init__(self, config, device=None, dtype=None):
        super().__init__()
        c = config.validate()
        kw = dict(device=device, dtype=dtype)
        self.config = config
        self.W_E = nn.Parameter(torch.empty(c.d_model, c.vocab_size, **kw))
        self.W_PE = nn.Parameter(torch.empty(c.d_model, c.max_seq_len, **kw))
        self.layers = nn.ModuleList(
            TransformerLayer(c, **kw) for _ in range(c.n_layers))
        self.ln_final = nn.Parameter(torch.ones(c.d_model, **kw))
        self.W_U = nn.Parameter(torch.empty(c.vocab_size, c.d_model, **kw))

    def embed(self, tokens):
        tokens = check_tokens(tokens, self.config.vocab_size, self.config.max_seq_len)
        return embed(tokens.to(self.W_E.device), self.W_E, self.W_PE)

    def unembed(self, x):
        return unembed(layernorm(x, self.ln_final, self.config.eps), self.W_U)

    def forward(self, tokens):
        """
        :param Tensor tokens: ``(B, n)`` or ``(n,)`` ids
        :returns: logits ``(B, n, V)``, or ``(n, V)`` for unbatched input
        """
        squeeze = torch.as_tensor(tokens).dim() == 1
        x = self.embed(tokens)
        for layer in self.layers:
            x = layer(x)
        logits = self.unembed(x)
        return logits[0] if squeeze else logits
