"""
The residual matrix transformer (RMT).

The transformer skeleton is unchanged, but every token's residual stream is a
``D_k x D_v`` outer-product memory instead of a ``D`` vector. Layers talk to
it only through :py:mod:`resmat.memory`:

* the embedding stores ``R`` word-data vectors and ``R`` position-data vectors
  under independent storage keys ``w_E`` and ``w_PE``
* attention retrieves ``R`` heads' worth of Q, K and V with the retrieval keys
  ``r_Q``, ``r_K``, ``r_V``, runs ordinary causal single-head attention per
  channel with scale ``1 / sqrt(D_v)``, and stores the results under ``w_O``
* the feed-forward layer retrieves ``R`` data vectors with ``r_FF``,
  concatenates them channel-major into an ``R * D_v`` vector, applies the
  usual ``W_2 Gelu(W_1 x)`` core, splits the result back into ``R`` blocks of
  ``D_v`` and stores them under ``w_FF``
* the unembedding retrieves ``R`` data vectors with ``r_U`` and sums
  ``W_U[h] x_h`` over channels

The residual tensor of a batch is ``(B, n, D_k, D_v)``. Sequences shorter than
``N`` use the first ``n`` position channels.
"""
import math

import torch
import torch.nn as nn

from resmat.memory import matrix_layernorm, retrieve_many, store
from resmat.transformer import causal_attention, check_tokens, gelu


def embed(tokens, W_E, w_E, W_PE, w_PE):
    """
    :param Tensor tokens: ``(B, n)`` ids
    :param Tensor W_E: ``(R, D_v, V)`` per-channel word embeddings
    :param Tensor w_E: ``(R, D_k)`` word storage keys
    :param Tensor W_PE: ``(R, D_v, N)`` per-channel position embeddings
    :param Tensor w_PE: ``(R, D_k)`` position storage keys
    :returns: ``(B, n, D_k, D_v)``
    """
    n = tokens.shape[-1]
    words = W_E.permute(2, 0, 1)[tokens]            # (B, n, R, D_v)
    positions = W_PE[:, :, :n].permute(2, 0, 1)     # (n, R, D_v)
    return store(w_E, words) + store(w_PE, positions)


def attention(xn, r_Q, r_K, r_V, w_O, upcast=True):
    """
    :param Tensor xn: ``(B, n, D_k, D_v)`` normalized residual
    :param Tensor r_Q: ``(R, D_k)``, likewise *r_K*, *r_V*
    :param Tensor w_O: ``(R, D_k)`` storage keys for the head outputs
    :returns: ``(B, n, D_k, D_v)`` delta
    """
    q = retrieve_many(r_Q, xn).transpose(1, 2)      # (B, R, n, D_v)
    k = retrieve_many(r_K, xn).transpose(1, 2)
    v = retrieve_many(r_V, xn).transpose(1, 2)
    heads = causal_attention(q, k, v, 1.0 / math.sqrt(xn.shape[-1]), upcast)
    return store(w_O, heads.transpose(1, 2))


def feed_forward(xn, r_FF, w_FF, W_1, W_2, activation=gelu):
    """
    :param Tensor xn: ``(B, n, D_k, D_v)``
    :param Tensor r_FF: ``(R, D_k)`` retrieval keys
    :param Tensor w_FF: ``(R, D_k)`` storage keys
    :param Tensor W_1: ``(D_FF, R * D_v)``
    :param Tensor W_2: ``(R * D_v, D_FF)``
    :param activation: elementwise core activation, Gelu by default
    :returns: ``(B, n, D_k, D_v)`` delta

    Channel ``h`` occupies entries ``[h * D_v, (h + 1) * D_v)`` of the core's
    input and output, so concatenation and splitting are exact inverses.
    """
    retrieved = retrieve_many(r_FF, xn)
    R, D_v = retrieved.shape[-2:]
    x_ff = retrieved.reshape(*retrieved.shape[:-2], R * D_v)
    core = torch.matmul(activation(torch.matmul(x_ff, W_1.t())), W_2.t())
    return store(w_FF, core.reshape(*core.shape[:-1], R, D_v))


def unembed(xn, r_U, W_U):
    """
    :param Tensor xn: ``(B, n, D_k, D_v)`` final normalized residual
    :param Tensor r_U: ``(R, D_k)``
    :param Tensor W_U: ``(R, V, D_v)``
    :returns: ``(B, n, V)`` logits
    """
    return torch.einsum('bnrd,rvd->bnv', retrieve_many(r_U, xn), W_U)


class RMTLayer(nn.Module):
    """One pre-LN attention sublayer followed by one pre-LN feed-forward sublayer"""

    def __init__(self, config, device=None, dtype=None):
        super().__init__()
        c = config
        kw = dict(device=device, dtype=dtype)
        self.config = config
        self.ln_attn = nn.Parameter(torch.ones(c.d_k, c.d_v, **kw))
        self.r_Q = nn.Parameter(torch.empty(c.rank, c.d_k, **kw))
        self.r_K = nn.Parameter(torch.empty(c.rank, c.d_k, **kw))
        self.r_V = nn.Parameter(torch.empty(c.rank, c.d_k, **kw))
        self.w_O = nn.Parameter(torch.empty(c.rank, c.d_k, **kw))
        self.ln_ff = nn.Parameter(torch.ones(c.d_k, c.d_v, **kw))
        self.r_FF = nn.Parameter(torch.empty(c.rank, c.d_k, **kw))
        self.w_FF = nn.Parameter(torch.empty(c.rank, c.d_k, **kw))
        self.W_1 = nn.Parameter(torch.empty(c.d_ff, c.rank * c.d_v, **kw))
        self.W_2 = nn.Parameter(torch.empty(c.rank * c.d_v, c.d_ff, **kw))

    def norm(self, x, gain):
        return matrix_layernorm(x, gain, self.config.eps, self.config.ln_axis)

    def attention_delta(self, x):
        xn = self.norm(x, self.ln_attn)
        return attention(xn, self.r_Q, self.r_K, self.r_V, self.w_O,
                         self.config.upcast_attention)

    def feed_forward_delta(self, x):
        approx = self.config.gelu_approx
        xn = self.norm(x, self.ln_ff)
        return feed_forward(xn, self.r_FF, self.w_FF, self.W_1, self.W_2,
                            lambda h: gelu(h, approx))

    def forward(self, x):
        x = x + self.attention_delta(x)
        return x + self.feed_forward_delta(x)


class RMT(nn.Module):
    """
    :param RMTConfig config: model shape
    :param device: torch device; ``'meta'`` allocates nothing
    :param dtype: parameter dtype

    Same contract as :py:class:`resmat.transformer.Transformer`: weights are
    created uninitialized and ``forward`` maps ``(B, n)`` ids to
    ``(B, n, V)`` logits.
    """

    def __init__(self, config, device=None, dtype=None):
        super().__init__()
        c = config.validate()
        kw = dict(device=device, dtype=dtype)
        self.config = config
        self.W_E = nn.Parameter(torch.empty(c.rank, c.d_v, c.vocab_size, **kw))
        self.w_E = nn.Parameter(torch.empty(c.rank, c.d_k, **kw))
        self.W_PE = nn.Parameter(torch.empty(c.rank, c.d_v, c.max_seq_len, **kw))
        self.w_PE = nn.Parameter(torch.empty(c.rank, c.d_k, **kw))
        self.layers = nn.ModuleList(RMTLayer(c, **kw) for _ in range(c.n_layers))
        self.ln_final = nn.Parameter(torch.ones(c.d_k, c.d_v, **kw))
        self.r_U = nn.Parameter(torch.empty(c.rank, c.d_k, **kw))
        self.W_U = nn.Parameter(torch.empty(c.rank, c.vocab_size, c.d_v, **kw))

    def embed(self, tokens):
        tokens = check_tokens(tokens, self.config.vocab_size, self.config.max_seq_len)
        return embed(tokens.to(self.W_E.device),
                     self.W_E, self.w_E, self.W_PE, self.w_PE)

    def unembed(self, x):
        c = self.config
        xn = matrix_layernorm(x, self.ln_final, c.eps, c.ln_axis)
        return unembed(xn, self.r_U, self.W_U)

    def forward(self, tokens):
        squeeze = torch.as_tensor(tokens).dim() == 1
        x = self.embed(tokens)
        for layer in self.layers:
            x = layer(x)
        logits = self.unembed(x)
        return logits[0] if squeeze else logits
