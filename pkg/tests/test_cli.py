import contextlib
import csv
import io
import json
import unittest

from resmat.cli import parse_sweep, run
from resmat.config import ValidationException

from .utils import TempDirMixin, corpus_path, fixtures_root

FIXTURE = fixtures_root / 'tests' / 'fixtures' / 'tiny_rmt.json'


def quietly(argv):
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        status = run(argv)
    return status, out.getvalue(), err.getvalue()


class ResourcesCommandTestCase(TempDirMixin, unittest.TestCase):
    def test_csv_report(self):
        path = self.tmp / 'resources.csv'
        status, _, _ = quietly(['resources', '--arch', 'both', '--preset', 'gpt2-medium',
                                '--seq-len', '512', '--format', 'csv', '--out', str(path)])
        self.assertEqual(status, 0)
        with open(str(path)) as f:
            rows = {r['arch']: r for r in csv.DictReader(f)}
        self.assertEqual(rows['transformer']['params_formula'], '353453056')
        self.assertEqual(rows['transformer']['flops_formula_fwd'], '335412365312')
        self.assertEqual(rows['rmt']['params_itemized'], '307185664')

    def test_json_sweep(self):
        status, out, _ = quietly(['resources', '--arch', 'rmt', '--sweep', 'dk=16:64',
                                  '--format', 'json'])
        self.assertEqual(status, 0)
        points = json.loads(out)
        self.assertListEqual([p['resid_size'] for p in points], [1024, 2048, 4096])
        self.assertEqual({p['arch'] for p in points}, {'rmt'})

    def test_key_sweep_needs_the_rmt(self):
        status, _, err = quietly(['resources', '--sweep', 'dk=16:64'])
        self.assertEqual(status, 2)
        self.assertIn('Cannot sweep d_k on the transformer', err)

    def test_residual_size_sweep_on_both(self):
        status, out, _ = quietly(['resources', '--sweep', 'resid_size=1024:2048',
                                  '--format', 'json'])
        self.assertEqual(status, 0)
        points = json.loads(out)
        self.assertListEqual([(p['arch'], p['resid_size']) for p in points],
                             [('transformer', 1024), ('transformer', 2048),
                              ('rmt', 1024), ('rmt', 2048)])

    def test_unknown_preset(self):
        status, _, err = quietly(['resources', '--preset', 'nope'])
        self.assertEqual(status, 2)
        self.assertIn('resmat resources:', err)


class MomentsCommandTestCase(unittest.TestCase):
    def test_variance_ratios_json(self):
        status, out, _ = quietly(['moments', '--table2', '--format', 'json'])
        self.assertEqual(status, 0)
        rows = json.loads(out)
        self.assertEqual(len(rows), 8)
        self.assertEqual({r['model'] for r in rows}, {'transformer', 'rmt'})

    def test_ratios_alias(self):
        a = quietly(['moments', '--table2', '--format', 'json'])
        b = quietly(['moments', '--ratios', '--format', 'json'])
        self.assertEqual(a[1], b[1])

    def test_too_few_trials(self):
        status, _, _ = quietly(['moments', '--trials', '10', '--format', 'csv'])
        self.assertEqual(status, 2)


class TrainCommandTestCase(TempDirMixin, unittest.TestCase):
    def test_train_then_eval(self):
        out_dir = self.tmp / 'run'
        status, out, _ = quietly(['train', '--config', str(FIXTURE),
                                  '--override', 'steps=5',
                                  '--override', 'train_corpus={}'.format(corpus_path),
                                  '--override', 'out_dir={}'.format(out_dir)])
        self.assertEqual(status, 0)
        self.assertEqual(json.loads(out)['steps'], 5)

        result_path = self.tmp / 'eval.json'
        status, _, _ = quietly(['eval', '--checkpoint', str(out_dir / 'checkpoint.bin'),
                                '--corpus', str(corpus_path), '--out', str(result_path)])
        self.assertEqual(status, 0)
        self.assertIn('perplexity', json.loads(result_path.read_text()))

    def test_reruns_write_identical_metrics(self):
        for name in ('a', 'b'):
            status, _, _ = quietly(['train', '--config', str(FIXTURE),
                                    '--override', 'steps=5',
                                    '--override', 'wall_clock=false',
                                    '--override', 'train_corpus={}'.format(corpus_path),
                                    '--override', 'out_dir={}'.format(self.tmp / name)])
            self.assertEqual(status, 0)
        self.assertEqual((self.tmp / 'a' / 'metrics.jsonl').read_bytes(),
                         (self.tmp / 'b' / 'metrics.jsonl').read_bytes())

    def test_help_names_wall_clock(self):
        out = io.StringIO()
        with contextlib.redirect_stdout(out), self.assertRaises(SystemExit):
            run(['train', '--help'])
        self.assertIn('wall_clock=false', out.getvalue())

    def test_bad_config(self):
        status, _, err = quietly(['train', '--config', str(self.tmp / 'missing.json')])
        self.assertEqual(status, 2)
        status, _, _ = quietly(['train', '--config', str(FIXTURE), '--override', 'steps=zero'])
        self.assertEqual(status, 2)

    def test_missing_checkpoint(self):
        status, _, _ = quietly(['eval', '--checkpoint', str(self.tmp / 'none.bin'),
                                '--corpus', str(corpus_path)])
        self.assertEqual(status, 2)


class ParseSweepTestCase(unittest.TestCase):
    def test_forms(self):
        self.assertEqual(parse_sweep('dk=16:128'), ('d_k', [16, 32, 64, 128]))
        self.assertEqual(parse_sweep('model.rank=2,4'), ('rank', [2, 4]))
        self.assertRaises(ValidationException, parse_sweep, 'dk=a:b')
