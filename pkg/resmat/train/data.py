"""
Byte-level corpora.

Every byte is its own token (``V = 256``), so tokenizing is lossless and
needs no vocabulary file::

  tokens = tokenize_bytes(b'ab')        # array([97, 98], dtype=uint8)
  detokenize_bytes(tokens)              # b'ab'

:py:func:`batch_iter` cuts the token array into non-overlapping windows of
``seq_len + 1`` tokens. Each window yields ``seq_len`` inputs and the same
positions shifted by one as targets, so no example crosses the end of the
corpus.
"""
import logging
import pathlib

import numpy as np
import torch

logger = logging.getLogger(__name__)

BYTE_VOCAB = 256


class CorpusError(ValueError):
    """A corpus is missing or too short for the requested windows"""
    pass


def tokenize_bytes(data):
    """
    :param bytes data: raw text
    :returns: ``uint8`` numpy array, one id per byte; empty for empty input
    """
    return np.frombuffer(bytes(data), dtype=np.uint8).copy()


def detokenize_bytes(tokens):
    """Inverse of :py:func:`tokenize_bytes`"""
    return np.asarray(tokens, dtype=np.uint8).tobytes()


def read_corpus(path):
    """
    :param str path: file to read as bytes
    :returns: token array

    Raises :py:class:`CorpusError` if the file can't be read.
    """
    path = pathlib.Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CorpusError("Cannot read corpus {}: {}".format(path, e))
    logger.debug("Read %d bytes from %s", len(data), path)
    return tokenize_bytes(data)


def split_dev(tokens, dev_frac=0.05):
    """
    :returns: ``(train, dev)``; dev is the final ``int(len * dev_frac)`` tokens
    """
    n_dev = int(len(tokens) * dev_frac)
    return tokens[:len(tokens) - n_dev], tokens[len(tokens) - n_dev:]


def window_starts(n_tokens, seq_len):
    """Start offsets of every complete ``seq_len + 1`` window"""
    if n_tokens < seq_len + 1:
        raise CorpusError(
            "Corpus of {} tokens is shorter than one window of {}".format(
                n_tokens, seq_len + 1))
    return np.arange(0, n_tokens - seq_len, seq_len)


def _windows(tokens, starts, seq_len):
    idx = starts[:, None] + np.arange(seq_len + 1)[None, :]
    chunk = torch.from_numpy(np.asarray(tokens)[idx].astype(np.int64))
    return chunk[:, :-1], chunk[:, 1:]


def batch_iter(tokens, seq_len, batch_size, seed, shuffle=True):
    """
    :param tokens: 1-d token array
    :param int seq_len: ``n``
    :param int batch_size: ``B``
    :param int seed: shuffling seed
    :param bool shuffle: if ``False``, windows come in corpus order
    :returns: endless generator of ``(inputs, targets)``, each a ``(B, n)``
              long tensor

    Windows are reshuffled every epoch with a generator seeded from *seed*, so
    the same seed always yields the same batch sequence. A batch may wrap
    into the next epoch.
    """
    starts = window_starts(len(tokens), seq_len)
    rng = np.random.default_rng(seed)
    order = np.empty(0, dtype=np.int64)
    while True:
        while len(order) < batch_size:
            epoch = rng.permutation(starts) if shuffle else starts
            order = np.concatenate([order, epoch])
        batch, order = order[:batch_size], order[batch_size:]
        yield _windows(tokens, batch, seq_len)


def eval_windows(tokens, seq_len, batch_size):
    """
    Every non-overlapping window once, in corpus order, as ``(inputs,
    targets)`` batches of at most *batch_size*.
    """
    starts = window_starts(len(tokens), seq_len)
    for i in range(0, len(starts), batch_size):
        yield _windows(tokens, starts[i:i + batch_size], seq_len)
