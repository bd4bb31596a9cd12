import math
import unittest
from dataclasses import replace

import torch

from resmat.models import new_model
from resmat.train.gradcheck import grad_check, grad_check_config, relative_errors

from .utils import TINY_RMT, TINY_TRANSFORMER, random_tokens


class GradCheckTestCase(unittest.TestCase):
    def test_tiny_transformer(self):
        result = grad_check_config(TINY_TRANSFORMER, max_entries=200)
        self.assertLessEqual(result.max_rel_error, 1e-5, result.worst)
        self.assertEqual(len(result.checks), len(list(new_model(TINY_TRANSFORMER).parameters())))

    def test_tiny_rmt(self):
        result = grad_check_config(TINY_RMT, max_entries=200)
        self.assertLessEqual(result.max_rel_error, 1e-5, result.worst)
        self.assertIn('layers.1.W_1', [c.name for c in result.sampled])

    def test_rmt_variants(self):
        for config in (replace(TINY_RMT, ln_axis='row', n_layers=1),
                       replace(TINY_RMT, gelu_approx=True, n_layers=1)):
            result = grad_check_config(config, max_entries=100, seed=1)
            self.assertLessEqual(result.max_rel_error, 1e-5, result.worst)

    def test_parameters_are_restored(self):
        model = new_model(TINY_RMT, seed=2, dtype=torch.float64)
        before = {n: p.detach().clone() for n, p in model.named_parameters()}
        tokens = random_tokens(TINY_RMT, batch=1, seed=3)
        grad_check(model, tokens, tokens, max_entries=20)
        for name, p in model.named_parameters():
            self.assertTrue(torch.equal(p, before[name]), name)

    def test_elementwise_error_is_reported(self):
        result = grad_check_config(TINY_RMT, max_entries=50)
        for check in result.checks:
            self.assertTrue(math.isfinite(check.elementwise_error), check)
        self.assertEqual(result.max_elementwise_error,
                         max(c.elementwise_error for c in result.checks))


class RelativeErrorsTestCase(unittest.TestCase):
    def test_small_entries_show_up_elementwise(self):
        analytic = torch.tensor([1.0, 1e-9], dtype=torch.float64)
        numeric = torch.tensor([1.0 + 1e-6, 2e-9], dtype=torch.float64)
        normwise, elementwise = relative_errors(analytic, numeric)
        self.assertAlmostEqual(normwise, 1e-6 / (1.0 + 1e-6))
        self.assertAlmostEqual(elementwise, 0.1)

    def test_zero_on_both_sides(self):
        zeros = torch.zeros(3, dtype=torch.float64)
        self.assertEqual(relative_errors(zeros, zeros), (0.0, 0.0))
