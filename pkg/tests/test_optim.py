import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings, strategies as st

from halu.errors import DomainError, ShapeError
from halu.optim import (
    AdamState,
    adam_init,
    adam_step,
    mse,
    mse_grad,
    mse_batch_grad,
    rmsle,
    rmsle_batch,
    rmsle_batch_grad,
    rmsle_grad,
)

from _oracles import central_diff, rel_err

finite_scans = st.lists(st.floats(0.0, 30.0), min_size=1, max_size=32)


class TestRmsle:
    def test_zero_at_equality(self):
        y = np.array([0.0, 1.5, 29.9])
        assert rmsle(y, y) == 0.0

    def test_closed_form_single_point(self):
        # ln((e-1+1)/(0+1)) = 1
        assert abs(rmsle(np.array([math.e - 1.0]), np.array([0.0])) - 1.0) < 1e-12

    def test_closed_form_two_points(self):
        # ln^2 terms: 0 and 4 -> sqrt(2)
        loss = rmsle(np.array([0.0, math.e**2 - 1.0]), np.array([0.0, 0.0]))
        assert abs(loss - math.sqrt(2.0)) < 1e-12

    def test_negative_entries_rejected(self):
        with pytest.raises(DomainError):
            rmsle(np.array([-0.1]), np.array([0.0]))
        with pytest.raises(DomainError):
            rmsle(np.array([0.1]), np.array([-1.0]))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            rmsle(np.zeros(3), np.zeros(4))

    @settings(max_examples=60, deadline=None)
    @given(finite_scans, finite_scans)
    def test_symmetry(self, a, b):
        n = min(len(a), len(b))
        a = np.array(a[:n])
        b = np.array(b[:n])
        assert rmsle(a, b) == pytest.approx(rmsle(b, a), abs=1e-14)

    @settings(max_examples=60, deadline=None)
    @given(finite_scans, st.randoms(use_true_random=False))
    def test_joint_permutation_invariance(self, a, rand):
        a = np.array(a)
        b = np.roll(a, 1) * 0.5
        perm = np.arange(a.size)
        rand.shuffle(perm)
        assert rmsle(a, b) == pytest.approx(rmsle(a[perm], b[perm]), abs=1e-14)

    @settings(max_examples=60, deadline=None)
    @given(finite_scans, finite_scans)
    def test_zero_iff_equal(self, a, b):
        n = min(len(a), len(b))
        a = np.array(a[:n])
        b = np.array(b[:n])
        if rmsle(a, b) == 0.0:
            # zero loss forces equality up to float underflow of the squared
            # log-difference (subnormal gaps below ~1e-154 vanish)
            assert np.max(np.abs(a - b)) < 1e-150
        if np.array_equal(a, b):
            assert rmsle(a, b) == 0.0


class TestRmsleGrad:
    def test_zero_at_equality(self):
        y = np.array([1.0, 2.0, 3.0])
        npt.assert_array_equal(rmsle_grad(y, y), 0.0)

    def test_single_point_finite_differences(self):
        y_hat = np.array([2.0])
        y = np.array([5.0])
        f = lambda: rmsle(y_hat, y)
        assert rel_err(rmsle_grad(y_hat, y), central_diff(f, y_hat, 1e-6), floor=1e-8) < 1e-8

    def test_vector_finite_differences(self):
        rng = np.random.default_rng(0)
        y_hat = rng.uniform(0.5, 29.0, 16)
        y = rng.uniform(0.5, 29.0, 16)
        f = lambda: rmsle(y_hat, y)
        assert rel_err(rmsle_grad(y_hat, y), central_diff(f, y_hat, 1e-6), floor=1e-6) < 1e-6

    def test_batched_mean_of_losses_finite_differences(self):
        rng = np.random.default_rng(1)
        y_hat = rng.uniform(0.5, 29.0, (4, 8))
        y = rng.uniform(0.5, 29.0, (4, 8))
        loss, grad = rmsle_batch_grad(y_hat, y)
        assert loss == pytest.approx(np.mean([rmsle(y_hat[i], y[i]) for i in range(4)]))
        f = lambda: rmsle_batch(y_hat, y)
        assert rel_err(grad, central_diff(f, y_hat, 1e-6), floor=1e-6) < 1e-6

    def test_batched_rows_at_minimum_get_zero_grad(self):
        y_hat = np.array([[1.0, 2.0], [3.0, 4.0]])
        y = np.array([[1.0, 2.0], [1.0, 1.0]])
        _, grad = rmsle_batch_grad(y_hat, y)
        npt.assert_array_equal(grad[0], 0.0)
        assert np.all(grad[1] != 0.0)


class TestMse:
    def test_values(self):
        assert mse(np.array([3.0]), np.array([1.0])) == 4.0
        y = np.array([0.5, 2.0])
        assert mse(y, y) == 0.0

    def test_grad_formula_and_finite_differences(self):
        rng = np.random.default_rng(2)
        y_hat = rng.normal(size=12)
        y = rng.normal(size=12)
        npt.assert_allclose(mse_grad(y_hat, y), 2.0 * (y_hat - y) / 12, atol=1e-15)
        f = lambda: mse(y_hat, y)
        assert rel_err(mse_grad(y_hat, y), central_diff(f, y_hat, 1e-6), floor=1e-6) < 1e-6

    def test_batch_grad(self):
        rng = np.random.default_rng(3)
        y_hat = rng.normal(size=(3, 5))
        y = rng.normal(size=(3, 5))
        loss, grad = mse_batch_grad(y_hat, y)
        assert loss == pytest.approx(np.mean([(y_hat[i] - y[i]) @ (y_hat[i] - y[i]) / 5 for i in range(3)]))
        f = lambda: float(np.mean(np.mean((y_hat - y) ** 2, axis=-1)))
        assert rel_err(grad, central_diff(f, y_hat, 1e-6), floor=1e-6) < 1e-6


class TestAdam:
    def test_zero_grads_leave_params_unchanged(self):
        params = {"w": np.array([1.0, -2.0]), "b": np.array([0.5])}
        snapshot = {k: v.copy() for k, v in params.items()}
        state = adam_init(params)
        adam_step(params, {k: np.zeros_like(v) for k, v in params.items()}, state)
        for k in params:
            npt.assert_array_equal(params[k], snapshot[k])
        assert state.t == 1

    def test_first_step_is_bias_corrected(self):
        # one step with g=1: update = lr * 1 / (1 + eps-ish) ~ lr
        params = {"w": np.array([5.0])}
        state = adam_init(params, lr=0.1)
        adam_step(params, {"w": np.array([1.0])}, state)
        assert params["w"][0] == pytest.approx(4.9, abs=1e-8)

    def test_converges_on_quadratic(self):
        # verified by running the optimizer: lr=0.15 reaches ~3e-4 in 100 steps
        params = {"theta": np.array([1.0])}
        state = adam_init(params, lr=0.15)
        for _ in range(100):
            adam_step(params, {"theta": 2.0 * params["theta"]}, state)
        assert abs(params["theta"][0]) < 1e-3

    def test_step_counter_increments_once_per_call(self):
        params = {"a": np.zeros(2), "b": np.zeros(3)}
        state = adam_init(params)
        grads = {k: np.ones_like(v) for k, v in params.items()}
        for expected in (1, 2, 3):
            adam_step(params, grads, state)
            assert state.t == expected

    def test_update_magnitude_bounded_and_finite(self):
        rng = np.random.default_rng(4)
        params = {"w": rng.normal(size=50)}
        state = adam_init(params, lr=1e-3)
        for _ in range(200):
            before = params["w"].copy()
            g = rng.normal(size=50) * 10.0**rng.integers(-3, 6)
            adam_step(params, {"w": g}, state)
            delta = np.abs(params["w"] - before)
            assert np.all(np.isfinite(params["w"]))
            # per-step movement is O(lr) regardless of gradient magnitude
            assert delta.max() < 10 * state.lr

    def test_shape_mismatch_rejected(self):
        params = {"w": np.zeros(3)}
        state = adam_init(params)
        with pytest.raises(ShapeError):
            adam_step(params, {"w": np.zeros(4)}, state)

    def test_invalid_betas_rejected(self):
        with pytest.raises(DomainError):
            AdamState(m={}, v={}, beta1=1.0)

    def test_flat_vector_update_equals_per_parameter_updates(self):
        # training packs all parameters into one vector; Adam is elementwise,
        # so the packed update must match the per-parameter one exactly
        rng = np.random.default_rng(5)
        a = rng.normal(size=4)
        b = rng.normal(size=(2, 3))
        params = {"a": a.copy(), "b": b.copy()}
        state = adam_init(params, lr=0.07)
        flat = np.concatenate([a, b.ravel()])
        fparams = {"theta": flat}
        fstate = adam_init(fparams, lr=0.07)
        for i in range(5):
            ga = rng.normal(size=4)
            gb = rng.normal(size=(2, 3))
            adam_step(params, {"a": ga, "b": gb}, state)
            adam_step(fparams, {"theta": np.concatenate([ga, gb.ravel()])}, fstate)
        npt.assert_array_equal(np.concatenate([params["a"], params["b"].ravel()]), flat)
