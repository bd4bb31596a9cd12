import unittest
from dataclasses import replace

import torch

from resmat.config import preset
from resmat.initializers import FanPair, declared_fans, init_variance
from resmat.models import build_model, is_decayed, new_model

from .utils import TINY_RMT, TINY_TRANSFORMER


class DeclaredFansTestCase(unittest.TestCase):
    def test_transformer(self):
        fans = declared_fans(TINY_TRANSFORMER)
        self.assertEqual(fans['W_Q'], FanPair(16, 3 * 16))
        self.assertEqual(fans['W_O'], FanPair(16, 16))
        self.assertEqual(fans['W_1'], FanPair(16, 32))
        self.assertEqual(fans['W_U'], FanPair(16, 11))

    def test_rmt(self):
        fans = declared_fans(TINY_RMT)
        self.assertEqual(fans['r_Q'], FanPair(8, 4))
        self.assertEqual(fans['w_O'], FanPair(4, 8))
        self.assertEqual(fans['W_1'], FanPair(16, 32))
        self.assertEqual(fans['W_E'], FanPair(1, 4))

    def test_every_tensor_is_declared(self):
        for config in (TINY_TRANSFORMER, TINY_RMT):
            fans = declared_fans(config)
            model = build_model(config, device='meta')
            for name, _ in model.named_parameters():
                if 'ln_' not in name:
                    self.assertIn(name.rsplit('.', 1)[-1], fans)


class InitVarianceTestCase(unittest.TestCase):
    def test_default_keys_make_unit_ratios(self):
        c = TINY_RMT
        self.assertEqual(init_variance('layers.0.r_Q', c), 1 / c.d_k)
        self.assertEqual(init_variance('w_E', c), 1 / c.rank)
        self.assertEqual(c.d_k * init_variance('r_U', c), 1.0)
        self.assertEqual(c.rank * init_variance('layers.1.w_FF', c), 1.0)

    def test_default_matrices_are_xavier(self):
        self.assertEqual(init_variance('layers.0.W_1', TINY_RMT), 2 / (16 + 32))
        self.assertEqual(init_variance('W_U', TINY_TRANSFORMER), 2 / (16 + 11))

    def test_modes(self):
        c = TINY_RMT
        self.assertEqual(init_variance('r_Q', c, 'xavier'), 2 / (8 + 4))
        self.assertEqual(init_variance('W_1', c, 'lecun'), 1 / 16)
        self.assertEqual(init_variance('ln_final', c, 'lecun'), 1.0)
        self.assertRaises(ValueError, init_variance, 'W_1', c, 'kaiming')

    def test_inverse_layer_scaling(self):
        c = replace(TINY_TRANSFORMER, inverse_layer_scaling=True)
        self.assertEqual(init_variance('layers.0.W_O', c), (2 / 32) / 4)
        self.assertEqual(init_variance('layers.0.W_Q', c), 2 / 64)
        r = replace(TINY_RMT, inverse_layer_scaling=True)
        self.assertEqual(init_variance('layers.1.w_FF', r), (1 / 4) / 4)
        self.assertEqual(init_variance('layers.1.r_FF', r), 1 / 8)


class InitParametersTestCase(unittest.TestCase):
    def test_same_seed_same_weights(self):
        for config in (TINY_TRANSFORMER, TINY_RMT):
            a = new_model(config, seed=3).state_dict()
            b = new_model(config, seed=3).state_dict()
            c = new_model(config, seed=4).state_dict()
            for name in a:
                self.assertTrue(torch.equal(a[name], b[name]))
            self.assertFalse(torch.equal(a['W_U'], c['W_U']))

    def test_gains_start_at_one(self):
        model = new_model(TINY_RMT)
        for name, p in model.named_parameters():
            if 'ln_' in name:
                self.assertTrue(torch.equal(p, torch.ones_like(p)))

    def test_empirical_variance(self):
        config = preset('rmt', 'desk')
        model = new_model(config, seed=1, dtype=torch.float64)
        for name in ('W_E', 'layers.0.W_1', 'layers.0.W_2'):
            p = model.get_parameter(name)
            expected = init_variance(name, config)
            self.assertAlmostEqual(p.var().item() / expected, 1.0, delta=0.1)

    def test_weight_decay_exclusions(self):
        self.assertFalse(is_decayed('W_E'))
        self.assertFalse(is_decayed('W_PE'))
        self.assertFalse(is_decayed('W_U'))
        self.assertFalse(is_decayed('layers.2.ln_ff'))
        self.assertTrue(is_decayed('layers.2.r_Q'))
        self.assertTrue(is_decayed('w_E'))
        self.assertTrue(is_decayed('layers.0.W_1'))
