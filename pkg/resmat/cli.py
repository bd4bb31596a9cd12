#!/usr/bin/env python3
"""
This program is added to your ``$PATH`` when you install resmat. It drives
every experiment::

  resmat train --config run.json --override steps=2000 --override dk=16
  resmat eval --checkpoint runs/rmt/checkpoint.bin --corpus data/dev.txt
  resmat gradcheck --arch rmt --preset tiny
  resmat resources --arch both --preset gpt2-medium --format table
  resmat resources --arch rmt --preset gpt2-medium --sweep dk=16:4096 --format csv
  resmat moments --trials 100000 --seed 0 --table2
  resmat sweep --config run.json --vary dk=4,16,64

Configuration and input errors are printed as one line on stderr with exit
status 2.
"""
import argparse
import logging
import sys

from rich.console import Console
from rich.logging import RichHandler

from resmat.config import (
    ARCHS, ConfigError, ValidationException, load_run_config, parse_override, preset)
from resmat.memory import ShapeError
from resmat.moments import (
    DISTRIBUTIONS, MomentError, VarianceRatioReport, VerificationRow, Z_BOUND,
    outliers, variance_ratio_report, verify_closed_forms)
from resmat.resources import (
    REPORT_FIELDS, ScalingPoint, compare, doubling_range, report, scaling_series,
    ComparisonRow)
from resmat.tables import print_table, records, to_csv, to_json
from resmat.train.checkpoint import CheckpointError
from resmat.train.data import CorpusError
from resmat.train.gradcheck import grad_check_config
from resmat.train.loop import SWEEP_COLUMNS, evaluate, sweep, train
from resmat.transformer import TokenRangeError

logger = logging.getLogger(__name__)

#: Sweep keys ``resources --sweep`` understands, per architecture
RESIDUAL_KEYS = {
    'transformer': ('d_model', 'resid_size'),
    'rmt': ('d_k', 'resid_size'),
}

USER_ERRORS = (
    ConfigError, ValidationException, CorpusError, CheckpointError,
    MomentError, ShapeError, TokenRangeError)


def emit(args, columns, rows, title=None):
    """Print ``(columns, rows)`` in the format chosen by ``--format``"""
    fmt = getattr(args, 'format', 'table')
    if fmt == 'csv':
        text = to_csv(columns, rows)
    elif fmt == 'json':
        text = to_json(records(columns, rows))
    else:
        print_table(columns, rows, title)
        return
    if getattr(args, 'out', None):
        with open(args.out, 'w') as f:
            f.write(text)
    else:
        sys.stdout.write(text)


def parse_sweep(text):
    """
    ``'dk=16:4096'`` -> ``('d_k', [16, 32, ..., 4096])``;
    ``'dk=4,16,64'`` -> ``('d_k', [4, 16, 64])``
    """
    key, value = parse_override(text)
    if key.startswith('model.'):
        key = key[len('model.'):]
    try:
        if ':' in value:
            start, stop = value.split(':', 1)
            return key, doubling_range(int(start), int(stop))
        return key, [int(v) for v in value.split(',') if v]
    except ValueError:
        raise ValidationException("Bad sweep values {!r}".format(text))


def cmd_train(args):
    config = load_run_config(args.config, args.override)
    summary = train(config, resume=args.resume)
    print(to_json(summary), end='')
    return 0


def cmd_eval(args):
    result = evaluate(args.checkpoint, args.corpus, args.seq_len, args.batch_size)
    text = to_json(result._asdict())
    if args.out:
        with open(args.out, 'w') as f:
            f.write(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_gradcheck(args):
    config = preset(args.arch, args.preset)
    result = grad_check_config(config, batch_size=args.batch_size,
                               fd_step=args.fd_step, seed=args.seed)
    rows = [tuple(c) for c in result.checks]
    print_table(('tensor', 'numel', 'checked', 'rel_error', 'elementwise'), rows,
                title='{} {} gradient check'.format(args.arch, args.preset))
    ok = result.max_rel_error <= args.tol
    print('max rel error {:.3g} ({}): {}'.format(
        result.max_rel_error, result.worst.name, 'OK' if ok else 'FAIL'))
    return 0 if ok else 1


def cmd_resources(args):
    archs = ARCHS if args.arch == 'both' else (args.arch,)
    configs = {arch: preset(arch, args.preset) for arch in archs}

    if args.sweep:
        key, values = parse_sweep(args.sweep)
        rows = []
        for arch, config in configs.items():
            if key not in RESIDUAL_KEYS[arch]:
                raise ConfigError("Cannot sweep {} on the {}; use {}".format(
                    key, arch, ' or '.join(RESIDUAL_KEYS[arch])))
            sizes = [v * config.d_v if key == 'd_k' else v for v in values]
            rows += [(arch,) + tuple(p) for p in scaling_series(config, sizes, args.seq_len)]
        emit(args, ('arch',) + ScalingPoint._fields, rows, title='scaling series')
        return 0

    if args.compare:
        rows = [tuple(r) for r in compare(configs['transformer'], configs['rmt'], args.seq_len)]
        emit(args, ComparisonRow._fields, rows, title='transformer vs. rmt')
        return 0

    reports = [report(c, args.seq_len, actual=args.actual, name='{}-{}'.format(a, args.preset))
               for a, c in configs.items()]
    rows = [tuple(getattr(r, f) for f in REPORT_FIELDS) for r in reports]
    emit(args, REPORT_FIELDS, rows, title='resources')
    if args.format == 'table':
        for r in reports:
            print_table(('line item', 'params'), r.params_items.items,
                        title='{} parameters'.format(r.name))
            print_table(('line item', 'flops'), r.flops_items.items,
                        title='{} forward FLOPs'.format(r.name))
            print_table(('quantity', 'formula', 'itemized', 'delta'),
                        [tuple(d) for d in r.discrepancies],
                        title='{} formula vs. itemized'.format(r.name))
    return 0


def cmd_moments(args):
    if args.ratios:
        rep = variance_ratio_report()
        emit(args, VarianceRatioReport.columns, [tuple(r) for r in rep.rows],
             title='variance ratios')
        if args.format == 'table':
            for row, fwd, bwd in rep.discrepancies():
                print('{} {} {}: computed {:.3g}/{:.3g}, reference {}/{}'.format(
                    row.model, row.layer, row.operation,
                    row.fwd_ratio, row.bwd_ratio, fwd, bwd))
        return 0
    rows = verify_closed_forms(trials=args.trials, seed=args.seed,
                               distribution=args.distribution)
    emit(args, VerificationRow._fields, [tuple(r) for r in rows],
         title='closed forms vs. Monte Carlo')
    worst = max(abs(r.z) for r in rows)
    logger.info("Largest |z| over %d comparisons: %.2f", len(rows), worst)
    for r in outliers(rows):
        logger.warning("%s %s %s: z = %.2f beyond %.0f standard errors",
                       r.kind, r.dims, r.quantity, r.z, Z_BOUND)
    return 0


def cmd_sweep(args):
    config = load_run_config(args.config, args.override)
    key, values = parse_sweep(args.vary)
    rep = sweep(config, key, values)
    print_table(SWEEP_COLUMNS, rep.rows, title='sweep over {}'.format(key))
    print('params spread {:.4f}%  FLOPs spread {:.4f}%  dev loss monotone: {}'.format(
        100 * rep.params_spread, 100 * rep.flops_spread, rep.dev_loss_monotone))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog='resmat', description='Residual matrix transformer experiments')
    parser.add_argument('-v', '--verbose', action='store_true', help='DEBUG logging')
    sub = parser.add_subparsers(dest='command')
    sub.required = True

    p = sub.add_parser(
        'train', help='train one model',
        description='Train one model. Metrics files are byte-identical across '
                    'reruns only with wall_clock=false in the config or as an override.')
    p.add_argument('--config', required=True)
    p.add_argument('--override', action='append', default=[], metavar='K=V')
    p.add_argument('--resume', metavar='CHECKPOINT')
    p.set_defaults(func=cmd_train)

    p = sub.add_parser('eval', help='dev loss of a checkpoint')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--corpus', required=True)
    p.add_argument('--seq-len', type=int)
    p.add_argument('--batch-size', type=int, default=16)
    p.add_argument('--out')
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser('gradcheck', help='finite-difference gradient check')
    p.add_argument('--arch', choices=ARCHS, required=True)
    p.add_argument('--preset', default='tiny')
    p.add_argument('--fd-step', type=float, default=1e-5)
    p.add_argument('--tol', type=float, default=1e-5)
    p.add_argument('--batch-size', type=int, default=2)
    p.add_argument('--seed', type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser('resources', help='parameter and FLOP counts')
    p.add_argument('--arch', choices=ARCHS + ('both',), default='both')
    p.add_argument('--preset', default='gpt2-medium')
    p.add_argument('--seq-len', type=int)
    p.add_argument('--format', choices=('table', 'csv', 'json'), default='table')
    p.add_argument('--sweep', metavar='KEY=START:STOP')
    p.add_argument('--compare', action='store_true')
    p.add_argument('--actual', action='store_true',
                   help='also count the tensors of an instantiated model')
    p.add_argument('--out')
    p.set_defaults(func=cmd_resources)

    p = sub.add_parser('moments', help='variance propagation')
    p.add_argument('--trials', type=int, default=100000)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--distribution', choices=DISTRIBUTIONS, default='gaussian')
    p.add_argument('--table2', '--ratios', dest='ratios', action='store_true',
                   help='variance ratios of GPT2-medium-sized models')
    p.add_argument('--format', choices=('table', 'csv', 'json'), default='table')
    p.add_argument('--out')
    p.set_defaults(func=cmd_moments)

    p = sub.add_parser('sweep', help='train once per residual size')
    p.add_argument('--config', required=True)
    p.add_argument('--vary', required=True, metavar='KEY=V1,V2,...')
    p.add_argument('--override', action='append', default=[], metavar='K=V')
    p.set_defaults(func=cmd_sweep)
    return parser


def run(argv):
    """:returns: process exit status"""
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format='%(message)s',
        handlers=[RichHandler(console=Console(stderr=True), show_path=False)])
    try:
        return args.func(args)
    except USER_ERRORS as e:
        print('resmat {}: {}'.format(args.command, e), file=sys.stderr)
        return 2


def cli():
    sys.exit(run(sys.argv[1:]))


if __name__ == '__main__':
    cli()
