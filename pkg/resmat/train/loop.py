"""
The training, evaluation and sweep loops.

A run writes everything into its ``out_dir``::

  out_dir/
    config.json          the resolved TrainRunConfig
    metrics.jsonl        one MetricsRecord per log interval
    checkpoint.bin       latest checkpoint (periodic and final)
    summary.json         final dev loss, parameter and FLOP counts

The loop itself only computes; everything it reports goes out as
:py:class:`~resmat.events.TrainEvent` events to subscribers, in the order
they were added.
"""
import logging
import math
import pathlib
import time
from collections import namedtuple
from dataclasses import replace

import torch

from resmat.config import run_config_to_dict, with_model
from resmat.events import EventDispatcher, TrainEvent
from resmat.models import DTYPES, build_model, new_model
from resmat.resources import count_actual, flops_itemized, flops_train_per_token
from resmat.tables import to_json, write_csv
from resmat.train import checkpoint as ckpt_io
from resmat.train.data import batch_iter, eval_windows, read_corpus, split_dev, window_starts
from resmat.train.metrics import MetricsRecord, MetricsWriter, read_metrics
from resmat.train.optim import build_optimizer, loss_fn, lr_at

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = 'checkpoint.bin'
METRICS_NAME = 'metrics.jsonl'
SUMMARY_NAME = 'summary.json'
SWEEP_CSV = 'sweep.csv'

StepInfo = namedtuple('StepInfo', ('step', 'ce_loss', 'z_loss', 'lr'))


class EvalResult(namedtuple('EvalResult', ('ce', 'perplexity', 'bits_per_byte', 'tokens'))):
    """
    Mean cross-entropy in nats per token over every non-overlapping window,
    ``exp(ce)``, and ``ce / ln 2``.
    """
    __slots__ = ()


def evaluate_model(model, tokens, seq_len, batch_size=16):
    """:returns: :py:class:`EvalResult` for *model* on *tokens*"""
    was_training = model.training
    model.eval()
    total, count = 0.0, 0
    device = next(model.parameters()).device
    with torch.no_grad():
        for inputs, targets in eval_windows(tokens, seq_len, batch_size):
            logits = model(inputs.to(device))
            ce, _ = loss_fn(logits, targets.to(device), 0.0)
            total += ce.item() * targets.numel()
            count += targets.numel()
    model.train(was_training)
    ce = total / count
    return EvalResult(ce, math.exp(ce), ce / math.log(2), count)


def evaluate(checkpoint, corpus, seq_len=None, batch_size=16):
    """
    :param checkpoint: path or :py:class:`~resmat.train.checkpoint.Checkpoint`
    :param corpus: path to a corpus file, or a token array
    :param int seq_len: window length; defaults to the run's ``seq_len``, or
                        the model's ``max_seq_len``
    :returns: :py:class:`EvalResult`
    """
    if not isinstance(checkpoint, ckpt_io.Checkpoint):
        checkpoint = ckpt_io.load(checkpoint)
    tokens = read_corpus(corpus) if isinstance(corpus, (str, pathlib.Path)) else corpus
    config = checkpoint.model_config
    dtype = next(iter(checkpoint.model.values())).dtype
    model = build_model(config, dtype=dtype)
    ckpt_io.restore_training_state(checkpoint, model)
    if seq_len is None:
        run = checkpoint.run or {}
        seq_len = run.get('seq_len') or config.max_seq_len
    return evaluate_model(model, tokens, seq_len, batch_size)


class ProgressLogger:
    """Logs one INFO line per log interval and per evaluation"""

    def __init__(self, total_steps):
        self.total_steps = total_steps

    def on_log(self, event):
        r = event.data
        logger.info("step %d/%d  ce %.4f  z %.2e  lr %.3g",
                    r.step, self.total_steps, r.ce_loss, r.z_loss, r.lr)

    def on_eval(self, event):
        r = event.data
        logger.info("dev ce %.4f  ppl %.3f  bpb %.4f", r.ce, r.perplexity, r.bits_per_byte)


class CheckpointWriter:
    """Saves the trainer's state to ``out_dir/checkpoint.bin`` on CHECKPOINT"""

    def __init__(self, trainer):
        self.trainer = trainer

    def on_checkpoint(self, event):
        ckpt_io.save(self.trainer.out_dir / CHECKPOINT_NAME, event.data)


class Trainer:
    """
    :param TrainRunConfig config: validated run config
    :param resume: optional checkpoint path to continue from

    The constructor sets everything up (corpus, model, optimizer, batch
    stream, subscribers); :py:meth:`run` trains. Subscribe extra observers
    through :py:attr:`dispatcher` before calling :py:meth:`run`.
    """

    def __init__(self, config, resume=None):
        self.config = config.validate()
        c = self.config
        tokens = read_corpus(c.train_corpus)
        if c.dev_corpus:
            self.train_tokens, self.dev_tokens = tokens, read_corpus(c.dev_corpus)
        else:
            self.train_tokens, self.dev_tokens = split_dev(tokens, c.dev_frac)
        # each split needs at least one window before any step runs
        window_starts(len(self.train_tokens), c.seq_len)
        window_starts(len(self.dev_tokens), c.seq_len)

        self.out_dir = pathlib.Path(c.out_dir or 'runs/{}'.format(c.arch))
        self.out_dir.mkdir(parents=True, exist_ok=True)

        self.model = new_model(c.model, seed=c.seed, dtype=DTYPES[c.dtype])
        self.optimizer = build_optimizer(self.model, c)
        self.batches = batch_iter(self.train_tokens, c.seq_len, c.batch_size, c.seed)
        self.tokens_per_step = c.batch_size * c.seq_len
        self.flops_per_step = self.tokens_per_step * flops_train_per_token(c.model, c.seq_len)

        self.start_step = 0
        self.wall_offset = 0.0
        if resume is not None:
            self._resume(ckpt_io.load(resume))

        self.dispatcher = EventDispatcher(TrainEvent)
        self.metrics = MetricsWriter(
            self.out_dir / METRICS_NAME, append=resume is not None,
            resume_step=self.start_step)
        self.dispatcher.subscribe_all(self.metrics)
        self.dispatcher.subscribe_all(CheckpointWriter(self))
        self.dispatcher.subscribe_all(ProgressLogger(c.steps))
        (self.out_dir / 'config.json').write_text(to_json(run_config_to_dict(c)))

    def _resume(self, ckpt):
        ckpt_io.restore_training_state(ckpt, self.model, self.optimizer)
        self.start_step = ckpt.step
        for _ in range(ckpt.step):
            next(self.batches)
        metrics_path = self.out_dir / METRICS_NAME
        if metrics_path.exists():
            done = [r for r in read_metrics(metrics_path) if r.step <= ckpt.step]
            if done:
                self.wall_offset = done[-1].wall_seconds
        logger.info("Resuming from step %d", ckpt.step)

    def snapshot(self, step):
        return ckpt_io.from_training_state(
            self.model, self.optimizer, step, run_config_to_dict(self.config))

    def train_step(self, step):
        """One optimizer step on the next batch; :returns: :py:class:`StepInfo`"""
        c = self.config
        lr = lr_at(step, c)
        self.optimizer.set_lr(lr)
        inputs, targets = next(self.batches)
        ce, z = loss_fn(self.model(inputs), targets, c.z_loss_coef)
        (ce + z).backward()
        self.optimizer.step()
        self.optimizer.zero_grad(set_to_none=True)
        return StepInfo(step, ce.item(), z.item(), lr)

    def run(self):
        """
        Train from the current step to ``config.steps``.

        :returns: summary dict, also written to ``out_dir/summary.json``
        """
        try:
            return self._run()
        finally:
            self.metrics.close()

    def _run(self):
        c = self.config
        started = time.perf_counter()
        self.model.train()
        for step in range(self.start_step + 1, c.steps + 1):
            info = self.train_step(step)
            self.dispatcher.fire(TrainEvent.STEP, info)
            if step % c.log_interval == 0 or step == c.steps:
                wall = self.wall_offset + time.perf_counter() - started if c.wall_clock else 0.0
                self.dispatcher.fire(TrainEvent.LOG, MetricsRecord(
                    step=step,
                    tokens_seen=step * self.tokens_per_step,
                    ce_loss=info.ce_loss,
                    z_loss=info.z_loss,
                    lr=info.lr,
                    flops_cum=step * self.flops_per_step,
                    wall_seconds=wall))
            if c.checkpoint_interval and step % c.checkpoint_interval == 0 and step < c.steps:
                self.dispatcher.fire(TrainEvent.CHECKPOINT, self.snapshot(step))

        self.dispatcher.fire(TrainEvent.CHECKPOINT, self.snapshot(c.steps))
        result = evaluate_model(self.model, self.dev_tokens, c.seq_len)
        self.dispatcher.fire(TrainEvent.EVAL, result)
        summary = dict(
            arch=c.arch,
            steps=c.steps,
            resid_size=c.model.residual_size,
            params=count_actual(self.model),
            flops_fwd=flops_itemized(c.model, c.seq_len).total,
            dev_ce=result.ce,
            dev_perplexity=result.perplexity,
            dev_bits_per_byte=result.bits_per_byte)
        (self.out_dir / SUMMARY_NAME).write_text(to_json(summary))
        self.dispatcher.fire(TrainEvent.FINISH, summary)
        return summary


def train(config, resume=None):
    """Set up a :py:class:`Trainer` for *config* and run it to completion"""
    return Trainer(config, resume).run()


SWEEP_COLUMNS = ('value', 'resid_size', 'params', 'flops_fwd', 'dev_ce')


class SweepReport:
    """
    .. py:attribute:: key

      The model field that was varied, e.g. ``'d_k'``

    .. py:attribute:: rows

      One tuple per run in :py:data:`SWEEP_COLUMNS` order
    """

    def __init__(self, key, rows):
        self.key = key
        self.rows = list(rows)

    def _column(self, name):
        i = SWEEP_COLUMNS.index(name)
        return [r[i] for r in self.rows]

    @staticmethod
    def _spread(values):
        return (max(values) - min(values)) / min(values) if values else 0.0

    @property
    def params_spread(self):
        """Relative spread ``(max - min) / min`` of total parameters"""
        return self._spread(self._column('params'))

    @property
    def flops_spread(self):
        return self._spread(self._column('flops_fwd'))

    @property
    def dev_loss_monotone(self):
        """Whether dev loss never increases as the residual stream grows"""
        by_size = sorted(zip(self._column('resid_size'), self._column('dev_ce')))
        losses = [loss for _, loss in by_size]
        return all(b <= a for a, b in zip(losses, losses[1:]))


def sweep(config, key, values):
    """
    :param TrainRunConfig config: base run; only ``model.<key>`` changes
    :param str key: model field, e.g. ``'d_k'``
    :param [int] values: one run per value
    :returns: :py:class:`SweepReport`; also writes ``out_dir/sweep.csv``

    Each run gets its own directory ``out_dir/<key>=<value>`` and the same
    seed, so the runs differ only in the varied dimension.
    """
    base_dir = pathlib.Path(config.out_dir or 'runs/sweep')
    rows = []
    for value in values:
        run = with_model(config, **{key: value})
        run = replace(run, out_dir=str(base_dir / '{}={}'.format(key, value)))
        logger.info("Sweep run %s=%s (residual size %d)", key, value,
                    run.model.residual_size)
        summary = train(run)
        rows.append((value, summary['resid_size'], summary['params'],
                     summary['flops_fwd'], summary['dev_ce']))
    report = SweepReport(key, rows)
    base_dir.mkdir(parents=True, exist_ok=True)
    write_csv(base_dir / SWEEP_CSV, SWEEP_COLUMNS, report.rows)
    logger.info("Sweep params spread %.3f%%, FLOPs spread %.3f%%, dev loss monotone: %s",
                100 * report.params_spread, 100 * report.flops_spread,
                report.dev_loss_monotone)
    return report
