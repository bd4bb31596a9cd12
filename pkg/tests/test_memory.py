import math
import unittest

import torch
from torch.testing import assert_close

from resmat.memory import (
    ShapeError,
    matrix_layernorm,
    outer_store,
    retrieve,
    retrieve_many,
    store,
)

from .utils import seeded


def t(*values):
    return torch.tensor(values, dtype=torch.float64)


def orthonormal_keys(d_k, seed):
    q, _ = torch.linalg.qr(seeded(d_k, d_k, seed=seed))
    return q.t()


class OuterStoreTestCase(unittest.TestCase):
    def test_basis_key(self):
        M = outer_store([(t(1, 0), t(3, 5))])
        assert_close(M, t([3, 5], [0, 0]))

    def test_orthonormal_basis_stacks_rows(self):
        M = outer_store([(t(1, 0), t(1, 2)), (t(0, 1), t(3, 4))])
        assert_close(M, t([1, 2], [3, 4]))

    def test_non_orthogonal_keys(self):
        r = 1 / math.sqrt(2)
        M = outer_store([(t(1, 0), t(1, 0)), (t(r, r), t(0, 1))])
        assert_close(M, t([1, r], [0, r]))

    def test_order_independent(self):
        pairs = [(seeded(4, seed=i), seeded(3, seed=10 + i)) for i in range(5)]
        assert_close(outer_store(pairs), outer_store(reversed(pairs)),
                     rtol=1e-12, atol=1e-12)

    def test_union_is_sum(self):
        a = [(seeded(4, seed=i), seeded(3, seed=10 + i)) for i in range(3)]
        b = [(seeded(4, seed=20 + i), seeded(3, seed=30 + i)) for i in range(2)]
        assert_close(outer_store(a + b), outer_store(a) + outer_store(b),
                     rtol=1e-12, atol=1e-12)

    def test_rejects_mismatched_pairs(self):
        self.assertRaises(ShapeError, outer_store, [(t(1, 0), t(1, 2)), (t(1, 0, 0), t(1, 2))])
        self.assertRaises(ShapeError, outer_store, [(t(1, 0), t(1, 2)), (t(1, 0), t(1, 2, 3))])
        self.assertRaises(ShapeError, outer_store, [])

    def test_batched_store_matches_pairs(self):
        keys = seeded(3, 5, seed=1)
        values = seeded(2, 7, 3, 4, seed=2)
        M = store(keys, values)
        self.assertEqual(M.shape, (2, 7, 5, 4))
        expected = outer_store(list(zip(keys, values[1, 6])))
        assert_close(M[1, 6], expected)


class RetrieveTestCase(unittest.TestCase):
    def test_basis_key_recovers(self):
        assert_close(retrieve(t(1, 0), t([3, 5], [0, 0])), t(3, 5))

    def test_sum_key(self):
        assert_close(retrieve(t(1, 1), t([1, 2], [3, 4])), t(4, 6))

    def test_interference(self):
        r = 1 / math.sqrt(2)
        out = retrieve(t(r, r), t([1, r], [0, r]))
        assert_close(out, t(r, 1.0), rtol=1e-12, atol=1e-12)

    def test_linearity(self):
        k = seeded(4, seed=1)
        M1, M2 = seeded(4, 3, seed=2), seeded(4, 3, seed=3)
        assert_close(retrieve(2.5 * k, M1), 2.5 * retrieve(k, M1))
        assert_close(retrieve(k, M1 + M2), retrieve(k, M1) + retrieve(k, M2))

    def test_rejects_wrong_key_length(self):
        self.assertRaises(ShapeError, retrieve, t(1, 0, 0), t([1, 2], [3, 4]))
        self.assertRaises(ShapeError, retrieve_many, seeded(2, 3), seeded(4, 5))

    def test_exact_recovery_with_orthonormal_keys(self):
        for d_k in (4, 16, 64):
            for trial in range(100):
                keys = orthonormal_keys(d_k, seed=1000 * d_k + trial)
                values = seeded(d_k, 8, seed=trial)
                M = store(keys, values)
                recovered = retrieve_many(keys, M)
                err = ((recovered - values).norm(dim=-1) / values.norm(dim=-1)).max()
                self.assertLessEqual(err.item(), 1e-6)


class MatrixLayerNormTestCase(unittest.TestCase):
    def test_constant_input_is_zero(self):
        out = matrix_layernorm(torch.full((2, 2), 3.0, dtype=torch.float64),
                               torch.ones(2, 2, dtype=torch.float64))
        assert_close(out, torch.zeros(2, 2, dtype=torch.float64))

    def test_hand_computed(self):
        out = matrix_layernorm(t([1, 2], [3, 4]), torch.ones(2, 2, dtype=torch.float64), eps=0.0)
        assert_close(out, t([-1.3416407865, -0.4472135955], [0.4472135955, 1.3416407865]))

    def test_unit_moments(self):
        M = seeded(5, 8, 4, seed=4) * 3 + 1
        out = matrix_layernorm(M, torch.ones(8, 4, dtype=torch.float64))
        flat = out.reshape(5, -1)
        self.assertLessEqual(flat.mean(dim=1).abs().max().item(), 1e-9)
        var = flat.var(dim=1, unbiased=False)
        self.assertLessEqual((var - 1).abs().max().item(), 1e-6)

    def test_gain_is_elementwise(self):
        M = seeded(3, 2, seed=5)
        gain = seeded(3, 2, seed=6)
        ones = torch.ones(3, 2, dtype=torch.float64)
        assert_close(matrix_layernorm(M, gain), matrix_layernorm(M, ones) * gain)

    def test_row_axis(self):
        M = t([1, 2], [10, 30])
        out = matrix_layernorm(M, torch.ones(2, 2, dtype=torch.float64), eps=0.0, axis='row')
        assert_close(out, t([-1, 1], [-1, 1]))

    def test_rejects_bad_arguments(self):
        ones = torch.ones(2, 2, dtype=torch.float64)
        self.assertRaises(ValueError, matrix_layernorm, ones, ones, -1.0)
        self.assertRaises(ValueError, matrix_layernorm, ones, ones, 1e-6, 'column')
        self.assertRaises(ShapeError, matrix_layernorm, ones, torch.ones(3, 2))


class MemoryGradientTestCase(unittest.TestCase):
    def test_store_retrieve_layernorm_gradients(self):
        keys = seeded(3, 4, seed=1).requires_grad_()
        values = seeded(3, 2, seed=2).requires_grad_()
        gain = (seeded(4, 2, seed=3) + 2).requires_grad_()
        M = seeded(4, 2, seed=4).requires_grad_()

        self.assertTrue(torch.autograd.gradcheck(store, (keys, values), eps=1e-5, atol=1e-6))
        self.assertTrue(torch.autograd.gradcheck(retrieve_many, (keys, M), eps=1e-5, atol=1e-6))
        self.assertTrue(torch.autograd.gradcheck(
            lambda m, g: matrix_layernorm(m, g), (M, gain), eps=1e-5, atol=1e-6))
