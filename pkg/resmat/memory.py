"""
Outer-product memory primitives. Everything the residual matrix transformer
does to its residual stream is built from three operations:

* **store**: sum the outer products of key vectors and data vectors into a
  ``D_k x D_v`` memory matrix
* **retrieve**: contract a key vector against the first dimension of a memory
  matrix to read a data vector back out
* **normalize**: LayerNorm over the entries of a memory matrix

Here's a simple example::

  import torch
  from resmat.memory import outer_store, retrieve

  keys = torch.eye(2, dtype=torch.float64)
  M = outer_store([
    (keys[0], torch.tensor([1., 2.], dtype=torch.float64)),
    (keys[1], torch.tensor([3., 4.], dtype=torch.float64)),
  ])
  print(retrieve(keys[1], M))
  # > tensor([3., 4.], dtype=torch.float64)

Orthonormal keys recover their values exactly. Non-orthogonal keys recover
their value plus cross-talk from every other stored pair.

All functions are pure and accept leading batch dimensions, so the same code
serves a single matrix and a ``(batch, position, D_k, D_v)`` residual tensor.
Accumulation is left unnormalized; callers apply :py:func:`matrix_layernorm`
where a normalized store is needed.
"""
import torch
import torch.nn.functional as F

LN_AXES = ('matrix', 'row')


class ShapeError(ValueError):
    """A key, data vector, or memory matrix has the wrong dimensions"""
    pass


def outer_store(pairs):
    """
    :param [(Tensor, Tensor)] pairs: ``(key, value)`` pairs; keys of length
                                     ``D_k`` and values of length ``D_v``
    :returns: ``D_k x D_v`` tensor ``sum_p key_p value_p^T``

    Raises :py:class:`ShapeError` if the list is empty or the pairs disagree
    about ``D_k`` or ``D_v``.
    """
    pairs = list(pairs)
    if not pairs:
        raise ShapeError("outer_store needs at least one (key, value) pair")
    keys = [k for k, _ in pairs]
    values = [v for _, v in pairs]
    for name, vectors in (('key', keys), ('value', values)):
        shapes = {tuple(v.shape) for v in vectors}
        if len(shapes) != 1 or len(next(iter(shapes))) != 1:
            raise ShapeError(
                "All {}s must be vectors of one length, got {}".format(
                    name, sorted(shapes)))
    return store(torch.stack(keys), torch.stack(values))


def store(keys, values):
    """
    :param Tensor keys: ``(R, D_k)`` storage keys
    :param Tensor values: ``(..., R, D_v)`` data vectors, one per key
    :returns: ``(..., D_k, D_v)``

    Batched form of :py:func:`outer_store`: channel ``h`` of *values* is
    associated with ``keys[h]`` and the ``R`` outer products are summed.
    """
    if keys.dim() != 2 or values.dim() < 2 or values.shape[-2] != keys.shape[0]:
        raise ShapeError(
            "Cannot store values {} under keys {}".format(
                tuple(values.shape), tuple(keys.shape)))
    return torch.einsum('rk,...rv->...kv', keys, values)


def retrieve(key, M):
    """
    :param Tensor key: ``(D_k,)`` retrieval key
    :param Tensor M: ``(..., D_k, D_v)`` memory
    :returns: ``(..., D_v)``, the contraction ``key^T M``
    """
    if key.dim() != 1 or M.dim() < 2 or M.shape[-2] != key.shape[0]:
        raise ShapeError(
            "Cannot retrieve with key {} from memory {}".format(
                tuple(key.shape), tuple(M.shape)))
    return torch.einsum('k,...kv->...v', key, M)


def retrieve_many(keys, M):
    """
    :param Tensor keys: ``(R, D_k)`` retrieval keys
    :param Tensor M: ``(..., D_k, D_v)`` memory
    :returns: ``(..., R, D_v)``, one data vector per key
    """
    if keys.dim() != 2 or M.dim() < 2 or M.shape[-2] != keys.shape[1]:
        raise ShapeError(
            "Cannot retrieve with keys {} from memory {}".format(
                tuple(keys.shape), tuple(M.shape)))
    return torch.einsum('rk,...kv->...rv', keys, M)


def matrix_layernorm(M, gain, eps=1e-6, axis='matrix'):
    """
    :param Tensor M: ``(..., D_k, D_v)`` memory
    :param Tensor gain: ``(D_k, D_v)`` elementwise gain
    :param float eps: variance floor, must not be negative
    :param str axis: ``'matrix'`` normalizes over all ``D_k * D_v`` entries of
                     each matrix; ``'row'`` normalizes each row separately
    :returns: normalized tensor, same shape as *M*

    Population variance, no bias term.
    """
    if eps < 0:
        raise ValueError("eps must be non-negative, got {}".format(eps))
    if tuple(gain.shape) != tuple(M.shape[-2:]):
        raise ShapeError(
            "Gain {} does not match memory {}".format(
                tuple(gain.shape), tuple(M.shape)))
    if axis == 'matrix':
        return F.layer_norm(M, tuple(M.shape[-2:]), weight=gain, eps=eps)
    elif axis == 'row':
        return F.layer_norm(M, (M.shape[-1],), eps=eps) * gain
    else:
        raise ValueError(
            "Unknown LayerNorm axis {!r}; expected one of {}".format(axis, LN_AXES))
