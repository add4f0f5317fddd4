"""Gradient-tape discipline: replay counts, seeds, accumulation, no_grad."""

import numpy as np
import pytest

from omnirestore.engine import Tensor, backward, no_grad, ops, reset_tape, tape
from omnirestore.errors import ShapeError


class TestReplayDiscipline:
    def test_each_entry_replays_once(self, rng):
        x = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
        w = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
        y = ops.matmul(x, w)
        z = ops.sum_(ops.square(y))
        entries = list(tape().entries)
        n = backward(z, retain=True)
        assert n == len(entries) == 3
        assert all(e.replays == 1 for e in entries)

    def test_unreachable_entries_skipped(self, rng):
        x = Tensor(rng.standard_normal(4), requires_grad=True)
        used = ops.sum_(ops.square(x))
        unused = ops.exp(x)
        entries = list(tape().entries)
        backward(used, retain=True)
        replays = {e.op: e.replays for e in entries}
        assert replays["exp"] == 0
        assert replays["square"] == 1

    def test_leaf_grad_populated_exactly_once(self, rng):
        x = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
        y = ops.sum_(ops.mul(x, x))
        backward(y)
        np.testing.assert_allclose(x.grad, 2.0 * x.data, rtol=1e-12)

    def test_zero_seed_gives_zero_grads(self, rng):
        x = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
        y = ops.sum_(ops.exp(x))
        backward(y, seed=np.zeros(()))
        np.testing.assert_array_equal(x.grad, 0.0)

    def test_seed_scales_gradient(self, rng):
        x = Tensor(rng.standard_normal(3), requires_grad=True)
        backward(ops.sum_(x), seed=np.array(2.0))
        np.testing.assert_allclose(x.grad, 2.0)

    def test_tape_cleared_after_backward(self, rng):
        x = Tensor(rng.standard_normal(3), requires_grad=True)
        backward(ops.sum_(ops.tanh(x)))
        assert len(tape()) == 0
        assert backward(ops.sum_(Tensor(np.ones(1), requires_grad=True))) >= 0

    def test_second_backward_replays_nothing_new(self, rng):
        x = Tensor(rng.standard_normal(3), requires_grad=True)
        loss = ops.sum_(ops.square(x))
        assert backward(loss) == 2
        first = x.grad.copy()
        assert backward(loss) == 0
        np.testing.assert_array_equal(x.grad, first)


class TestGraphShapes:
    def test_diamond_accumulation(self, rng):
        a = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
        left = ops.mul_scalar(a, 3.0)
        right = ops.square(a)
        out = ops.sum_(ops.add(left, right))
        backward(out)
        np.testing.assert_allclose(a.grad, 3.0 + 2.0 * a.data, rtol=1e-12)

    def test_shared_input_two_losses_accumulate_on_leaf(self, rng):
        x = Tensor(rng.standard_normal(4), requires_grad=True)
        backward(ops.sum_(ops.square(x)))
        backward(ops.sum_(ops.mul_scalar(x, 5.0)))
        np.testing.assert_allclose(x.grad, 2.0 * x.data + 5.0, rtol=1e-12)

    def test_constant_inputs_get_no_grad(self, rng):
        x = Tensor(rng.standard_normal(3), requires_grad=True)
        c = Tensor(rng.standard_normal(3))
        backward(ops.sum_(ops.mul(x, c)))
        assert c.grad is None
        np.testing.assert_allclose(x.grad, c.data)


class TestNoGrad:
    def test_records_nothing(self, rng):
        x = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
        with no_grad():
            y = ops.softmax(ops.matmul(x, x))
        assert len(tape()) == 0
        assert not y.requires_grad

    def test_nested_restores_state(self, rng):
        x = Tensor(rng.standard_normal(2), requires_grad=True)
        with no_grad():
            with no_grad():
                pass
            assert not ops.exp(x).requires_grad
        y = ops.exp(x)
        assert y.requires_grad
        assert len(tape()) == 1


class TestBackwardValidation:
    def test_rejects_nonscalar_loss(self, rng):
        x = Tensor(rng.standard_normal(3), requires_grad=True)
        y = ops.square(x)
        with pytest.raises(ShapeError, match=r"scalar"):
            backward(y)

    def test_rejects_bad_seed_shape(self, rng):
        x = Tensor(rng.standard_normal(3), requires_grad=True)
        y = ops.sum_(x)
        with pytest.raises(ShapeError, match=r"seed"):
            backward(y, seed=np.ones(3))

    def test_reset_tape_discards_entries(self, rng):
        x = Tensor(rng.standard_normal(3), requires_grad=True)
        ops.exp(x)
        assert len(tape()) == 1
        reset_tape()
        assert len(tape()) == 0
