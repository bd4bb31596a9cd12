"""
Self-describing checkpoint files.

Layout:

* 8 bytes of magic, ``b'RMTCKPT1'``
* the header length as a little-endian ``uint64``
* the header, compact UTF-8 JSON with sorted keys::

    {"arch": "rmt", "format_version": 1, "model": {...}, "run": {...},
     "step": 200, "adam_step": 200,
     "tensors": [{"name": "model/W_E", "shape": [4, 4, 256],
                  "dtype": "float32", "offset": 0, "nbytes": 16384}, ...]}

* raw little-endian IEEE-754 tensor payloads in directory order; ``offset``
  counts from the first byte after the header

Model tensors are named ``model/<parameter name>``, AdamW moments
``adam/exp_avg/<parameter name>`` and ``adam/exp_avg_sq/<parameter name>``.
Encoding is a pure function of the contents, so ``encode(decode(b)) == b``.
"""
import json
import logging
import os
import pathlib
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from resmat.config import model_config_from_dict

logger = logging.getLogger(__name__)

MAGIC = b'RMTCKPT1'
FORMAT_VERSION = 1
_LENGTH = struct.Struct('<Q')

NUMPY_DTYPES = {
    'float32': np.dtype('<f4'),
    'float64': np.dtype('<f8'),
}
TORCH_DTYPES = {
    torch.float32: 'float32',
    torch.float64: 'float64',
}


class CheckpointError(Exception):
    """Bad magic, unsupported version, or a truncated or inconsistent file"""
    pass


@dataclass
class Checkpoint:
    """
    .. py:attribute:: model

      :py:class:`OrderedDict` of parameter name to tensor

    .. py:attribute:: exp_avg

      AdamW first moments by parameter name; empty for an untrained model

    .. py:attribute:: adam_step

      Number of AdamW updates the moments have seen

    .. py:attribute:: run

      :py:func:`resmat.config.run_config_to_dict` output, or ``None``
    """
    model_config: object
    model: OrderedDict
    step: int = 0
    exp_avg: OrderedDict = field(default_factory=OrderedDict)
    exp_avg_sq: OrderedDict = field(default_factory=OrderedDict)
    adam_step: int = 0
    run: dict = None

    @property
    def arch(self):
        return self.model_config.arch

    def tensors(self):
        """``(qualified name, tensor)`` in file order"""
        for name, t in self.model.items():
            yield 'model/' + name, t
        for name, t in self.exp_avg.items():
            yield 'adam/exp_avg/' + name, t
        for name, t in self.exp_avg_sq.items():
            yield 'adam/exp_avg_sq/' + name, t


def from_training_state(model, optimizer=None, step=0, run=None):
    """Snapshot a model and its :py:class:`~resmat.train.optim.AdamW` state"""
    ckpt = Checkpoint(
        model_config=model.config,
        model=OrderedDict((n, p.detach().cpu().clone()) for n, p in model.named_parameters()),
        step=step, run=run)
    if optimizer is not None:
        for name, p in model.named_parameters():
            state = optimizer.state.get(p)
            if not state:
                continue
            ckpt.exp_avg[name] = state['exp_avg'].detach().cpu().clone()
            ckpt.exp_avg_sq[name] = state['exp_avg_sq'].detach().cpu().clone()
            ckpt.adam_step = state['step']
    return ckpt


def restore_training_state(ckpt, model, optimizer=None):
    """Copy a checkpoint's tensors into *model* and *optimizer* in place"""
    params = dict(model.named_parameters())
    missing = set(params) ^ set(ckpt.model)
    if missing:
        raise CheckpointError("Checkpoint and model disagree on {}".format(sorted(missing)))
    with torch.no_grad():
        for name, p in params.items():
            p.copy_(ckpt.model[name])
    if optimizer is not None:
        for name, p in params.items():
            if name not in ckpt.exp_avg:
                continue
            optimizer.state[p] = {
                'step': ckpt.adam_step,
                'exp_avg': ckpt.exp_avg[name].to(p.device, p.dtype).clone(),
                'exp_avg_sq': ckpt.exp_avg_sq[name].to(p.device, p.dtype).clone(),
            }


def _payload(t):
    try:
        dtype = TORCH_DTYPES[t.dtype]
    except KeyError:
        raise CheckpointError("Unsupported tensor dtype {}".format(t.dtype))
    array = t.detach().cpu().contiguous().numpy().astype(NUMPY_DTYPES[dtype], copy=False)
    return dtype, array.tobytes()


def encode(ckpt):
    """:returns: the checkpoint as bytes"""
    directory = []
    payloads = []
    offset = 0
    for name, t in ckpt.tensors():
        dtype, data = _payload(t)
        directory.append(dict(name=name, shape=list(t.shape), dtype=dtype,
                              offset=offset, nbytes=len(data)))
        payloads.append(data)
        offset += len(data)
    header = dict(
        format_version=FORMAT_VERSION,
        arch=ckpt.arch,
        model=asdict(ckpt.model_config),
        step=ckpt.step,
        adam_step=ckpt.adam_step,
        run=ckpt.run,
        tensors=directory)
    header_bytes = json.dumps(header, sort_keys=True, separators=(',', ':')).encode('utf-8')
    return b''.join([MAGIC, _LENGTH.pack(len(header_bytes)), header_bytes] + payloads)


def decode(data):
    """
    :param bytes data: output of :py:func:`encode`
    :returns: :py:class:`Checkpoint`
    """
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError("Not a checkpoint: bad magic {!r}".format(data[:len(MAGIC)]))
    start = len(MAGIC) + _LENGTH.size
    if len(data) < start:
        raise CheckpointError("Truncated checkpoint header")
    (header_len,) = _LENGTH.unpack_from(data, len(MAGIC))
    if len(data) < start + header_len:
        raise CheckpointError("Truncated checkpoint header")
    try:
        header = json.loads(data[start:start + header_len].decode('utf-8'))
    except ValueError as e:
        raise CheckpointError("Corrupt checkpoint header: {}".format(e))
    if header.get('format_version') != FORMAT_VERSION:
        raise CheckpointError("Unsupported checkpoint version {!r}".format(
            header.get('format_version')))

    base = start + header_len
    ckpt = Checkpoint(
        model_config=model_config_from_dict(header['arch'], header['model']),
        model=OrderedDict(),
        step=header['step'],
        adam_step=header.get('adam_step', 0),
        run=header.get('run'))
    for entry in header['tensors']:
        dtype = NUMPY_DTYPES.get(entry['dtype'])
        if dtype is None:
            raise CheckpointError("Unsupported tensor dtype {!r}".format(entry['dtype']))
        count = int(np.prod(entry['shape'], dtype=np.int64))
        if count * dtype.itemsize != entry['nbytes']:
            raise CheckpointError("Tensor {} has {} bytes for shape {}".format(
                entry['name'], entry['nbytes'], entry['shape']))
        begin = base + entry['offset']
        if begin + entry['nbytes'] > len(data):
            raise CheckpointError("Truncated payload for {}".format(entry['name']))
        array = np.frombuffer(data, dtype=dtype, count=count, offset=begin)
        native = array.reshape(entry['shape']).astype(dtype.newbyteorder('='), copy=True)
        tensor = torch.from_numpy(native)
        section, _, name = entry['name'].partition('/')
        if section == 'model':
            ckpt.model[name] = tensor
        elif name.startswith('exp_avg_sq/'):
            ckpt.exp_avg_sq[name[len('exp_avg_sq/'):]] = tensor
        elif name.startswith('exp_avg/'):
            ckpt.exp_avg[name[len('exp_avg/'):]] = tensor
        else:
            raise CheckpointError("Unknown tensor {!r}".format(entry['name']))
    return ckpt


def save(path, ckpt):
    """Write *ckpt* to *path*, replacing any existing file atomically"""
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + '.tmp')
    tmp.write_bytes(encode(ckpt))
    os.replace(str(tmp), str(path))
    logger.info("Saved checkpoint %s (step %d)", path, ckpt.step)


def load(path):
    try:
        data = pathlib.Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError("Cannot read checkpoint {}: {}".format(path, e))
    return decode(data)
