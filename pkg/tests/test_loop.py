import csv
import json
import math
import os
import pathlib
import unittest

import numpy as np
import torch

from resmat.config import preset
from resmat.resources import count_actual, flops_train_per_token, params_itemized
from resmat.train import checkpoint as ckpt_io
from resmat.train.data import CorpusError, read_corpus, split_dev
from resmat.train.loop import (
    CHECKPOINT_NAME,
    METRICS_NAME,
    SUMMARY_NAME,
    SWEEP_CSV,
    Trainer,
    evaluate,
    evaluate_model,
    sweep,
    train,
)
from resmat.train.metrics import read_metrics

from .utils import BYTE_RMT, BYTE_TRANSFORMER, TempDirMixin, byte_run, corpus_path


class MidRunCopy:
    """Keeps a copy of the checkpoint fired at *step*"""

    def __init__(self, path, step):
        self.path = path
        self.step = step

    def on_checkpoint(self, event):
        if event.data.step == self.step:
            ckpt_io.save(self.path, event.data)


class FailAt:
    """Raises from the STEP handler at *step*"""

    def __init__(self, step):
        self.step = step

    def on_step(self, event):
        if event.data.step == self.step:
            raise RuntimeError('stopped at step {}'.format(self.step))


def unigram_ce(train_tokens, dev_tokens):
    """Dev cross-entropy in nats of an add-one smoothed byte unigram model"""
    counts = np.bincount(np.asarray(train_tokens), minlength=256) + 1.0
    probs = counts / counts.sum()
    return float(-np.log(probs[np.asarray(dev_tokens)]).mean())


class TrainTestCase(TempDirMixin, unittest.TestCase):
    def test_rmt_smoke_run(self):
        config = byte_run(BYTE_RMT, self.tmp / 'rmt')
        summary = train(config)
        records = read_metrics(self.tmp / 'rmt' / METRICS_NAME)
        self.assertListEqual([r.step for r in records], [5, 10, 15, 20, 25, 30])
        self.assertLess(records[-1].ce_loss, records[0].ce_loss)
        self.assertTrue(all(r.wall_seconds == 0.0 for r in records))
        self.assertTrue((self.tmp / 'rmt' / CHECKPOINT_NAME).exists())
        self.assertEqual(json.loads((self.tmp / 'rmt' / SUMMARY_NAME).read_text()), summary)
        self.assertAlmostEqual(summary['dev_perplexity'], math.exp(summary['dev_ce']))
        self.assertAlmostEqual(summary['dev_bits_per_byte'], summary['dev_ce'] / math.log(2))
        self.assertEqual(summary['resid_size'], 32)

    def test_transformer_smoke_run(self):
        summary = train(byte_run(BYTE_TRANSFORMER, self.tmp / 'tfm', steps=10))
        self.assertEqual(summary['arch'], 'transformer')
        self.assertTrue(math.isfinite(summary['dev_ce']))

    def test_metrics_are_deterministic(self):
        train(byte_run(BYTE_RMT, self.tmp / 'a', steps=10))
        train(byte_run(BYTE_RMT, self.tmp / 'b', steps=10))
        self.assertEqual((self.tmp / 'a' / METRICS_NAME).read_bytes(),
                         (self.tmp / 'b' / METRICS_NAME).read_bytes())

    def test_token_and_flop_counters(self):
        config = byte_run(BYTE_RMT, self.tmp / 'rmt', steps=10)
        train(config)
        per_step = 4 * 16
        for r in read_metrics(self.tmp / 'rmt' / METRICS_NAME):
            self.assertEqual(r.tokens_seen, r.step * per_step)
            self.assertEqual(r.flops_cum, r.step * per_step * flops_train_per_token(BYTE_RMT, 16))

    def test_resume_matches_uninterrupted_run(self):
        train(byte_run(BYTE_RMT, self.tmp / 'straight'))

        interrupted = Trainer(byte_run(BYTE_RMT, self.tmp / 'resumed', checkpoint_interval=15))
        mid = self.tmp / 'mid.bin'
        interrupted.dispatcher.subscribe_all(MidRunCopy(mid, 15))
        interrupted.run()
        resumed = Trainer(byte_run(BYTE_RMT, self.tmp / 'resumed'), resume=mid)
        self.assertEqual(resumed.start_step, 15)
        resumed.run()

        self.assertEqual((self.tmp / 'straight' / METRICS_NAME).read_bytes(),
                         (self.tmp / 'resumed' / METRICS_NAME).read_bytes())
        a = ckpt_io.load(self.tmp / 'straight' / CHECKPOINT_NAME)
        b = ckpt_io.load(self.tmp / 'resumed' / CHECKPOINT_NAME)
        for name, t in a.model.items():
            self.assertTrue(torch.equal(t, b.model[name]), name)

    def test_params_match_accounting(self):
        trainer = Trainer(byte_run(BYTE_RMT, self.tmp / 'rmt', steps=1))
        gains = 3 * BYTE_RMT.residual_size
        self.assertEqual(count_actual(trainer.model), params_itemized(BYTE_RMT).total + gains)

    def test_short_dev_split_fails_before_training(self):
        # 0.5% of the fixture corpus is 9 tokens, shorter than one 17-token window
        config = byte_run(BYTE_RMT, self.tmp / 'rmt', dev_frac=0.005, steps=10)
        self.assertRaises(CorpusError, Trainer, config)
        self.assertFalse((self.tmp / 'rmt').exists())

    def test_metrics_file_closed_when_run_fails(self):
        trainer = Trainer(byte_run(BYTE_RMT, self.tmp / 'rmt', steps=10))
        trainer.dispatcher.subscribe_all(FailAt(7))
        self.assertRaises(RuntimeError, trainer.run)
        self.assertTrue(trainer.metrics.closed)
        records = read_metrics(self.tmp / 'rmt' / METRICS_NAME)
        self.assertListEqual([r.step for r in records], [5])


class EvaluateTestCase(TempDirMixin, unittest.TestCase):
    def test_checkpoint_reproduces_dev_loss(self):
        summary = train(byte_run(BYTE_RMT, self.tmp / 'rmt', steps=10))
        _, dev = split_dev(read_corpus(corpus_path), 0.1)
        result = evaluate(self.tmp / 'rmt' / CHECKPOINT_NAME, dev)
        self.assertAlmostEqual(result.ce, summary['dev_ce'], places=6)
        self.assertAlmostEqual(result.perplexity, math.exp(result.ce))
        self.assertEqual(result.tokens, (len(dev) - 1) // 16 * 16)

    def test_corpus_path(self):
        train(byte_run(BYTE_TRANSFORMER, self.tmp / 'tfm', steps=2))
        result = evaluate(str(self.tmp / 'tfm' / CHECKPOINT_NAME), str(corpus_path),
                          seq_len=8, batch_size=64)
        self.assertEqual(result.tokens, (corpus_path.stat().st_size - 1) // 8 * 8)


class SweepTestCase(TempDirMixin, unittest.TestCase):
    def test_key_size_sweep(self):
        desk = preset('rmt', 'desk')
        report = sweep(byte_run(desk, self.tmp / 'sweep', steps=5), 'd_k', [4, 16, 64])
        self.assertListEqual([r[1] for r in report.rows], [128, 512, 2048])
        for d_k in (4, 16, 64):
            self.assertTrue((self.tmp / 'sweep' / 'd_k={}'.format(d_k) / SUMMARY_NAME).exists())
        # 392 parameters per unit of d_k: key vectors plus matrix LayerNorm gains
        params = [r[2] for r in report.rows]
        self.assertListEqual(params, [2524704, 2529408, 2548224])
        self.assertAlmostEqual(report.params_spread, (params[-1] - params[0]) / params[0])
        self.assertLess(report.params_spread, 0.01)

        with open(str(self.tmp / 'sweep' / SWEEP_CSV)) as f:
            rows = list(csv.reader(f))
        self.assertListEqual(rows[0], ['value', 'resid_size', 'params', 'flops_fwd', 'dev_ce'])
        self.assertEqual(len(rows), 4)
        self.assertEqual(float(rows[1][4]), report.rows[0][4])


@unittest.skipUnless(os.environ.get('RESMAT_CORPUS'),
                     'set RESMAT_CORPUS to a text file of at least 1 MB')
class DeskTrainingTestCase(TempDirMixin, unittest.TestCase):
    """2000 steps of each desk preset; tens of minutes on a CPU"""

    def setUp(self):
        super().setUp()
        self.corpus = pathlib.Path(os.environ['RESMAT_CORPUS'])
        if self.corpus.stat().st_size < 1000000:
            self.skipTest('{} is smaller than 1 MB'.format(self.corpus))

    def check_desk_run(self, arch):
        config = byte_run(preset(arch, 'desk'), self.tmp / arch, steps=2000,
                          batch_size=8, lr=3e-3, log_interval=1, dev_frac=0.05,
                          train_corpus=str(self.corpus))
        trainer = Trainer(config)
        untrained = evaluate_model(trainer.model, trainer.dev_tokens, config.seq_len).ce
        unigram = unigram_ce(trainer.train_tokens, trainer.dev_tokens)
        summary = trainer.run()

        self.assertLessEqual(summary['dev_ce'], 0.8 * untrained)
        self.assertLessEqual(summary['dev_ce'], 0.8 * unigram)
        # 100-step means of the train loss over the second half never rise
        losses = [r.ce_loss for r in read_metrics(self.tmp / arch / METRICS_NAME)]
        means = [np.mean(losses[i:i + 100]) for i in range(len(losses) // 2, len(losses), 100)]
        self.assertListEqual(means, sorted(means, reverse=True))

    def test_rmt(self):
        self.check_desk_run('rmt')

    def test_transformer(self):
        self.check_desk_run('transformer')
