import pathlib
import shutil
import tempfile

import torch

from resmat.config import RMTConfig, TransformerConfig, TrainRunConfig, preset

fixtures_root = pathlib.Path(__file__).parent.parent
corpus_path = fixtures_root / 'tests' / 'fixtures' / 'corpus.txt'

TINY_TRANSFORMER = preset('transformer', 'tiny')
TINY_RMT = preset('rmt', 'tiny')

# byte-level shapes small enough to train in a few seconds
BYTE_TRANSFORMER = TransformerConfig(
    vocab_size=256, max_seq_len=16, d_model=16, n_layers=1, n_heads=2,
    d_head=8, d_ff=32)
BYTE_RMT = RMTConfig(
    vocab_size=256, max_seq_len=16, d_k=8, d_v=4, rank=4, n_layers=1, d_ff=32)


def seeded(*shape, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=dtype)


def random_tokens(config, batch=2, n=None, seed=0):
    g = torch.Generator().manual_seed(seed)
    n = n or config.max_seq_len
    return torch.randint(0, config.vocab_size, (batch, n), generator=g)


def byte_run(model_config, out_dir, **kwargs):
    """A short, deterministic byte-level run on the fixture corpus"""
    values = dict(
        seq_len=model_config.max_seq_len, batch_size=4, steps=30, lr=1e-2,
        seed=0, train_corpus=str(corpus_path), out_dir=str(out_dir),
        log_interval=5, wall_clock=False, dev_frac=0.1)
    values.update(kwargs)
    return TrainRunConfig(arch=model_config.arch, model=model_config, **values)


class TempDirMixin:
    def setUp(self):
        super().setUp()
        self.tmp = pathlib.Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(str(self.tmp), ignore_errors=True)
        super().tearDown()
