import numpy as np
import pytest

from graphkbc.autodiff import Tensor, gradcheck, sum_all
from graphkbc.nn import (
    ADAM_EPS,
    BatchNorm,
    ParamStore,
    adam_step,
    load_checkpoint,
    save_checkpoint,
    step_size,
)


class TestStepSize:
    def test_epoch_zero(self):
        assert step_size(0) == 0.01

    def test_halved_at_ten_thousand(self):
        assert step_size(10_000) == pytest.approx(0.005)

    def test_strictly_decreasing(self):
        sizes = [step_size(k) for k in range(50)]
        assert all(a > b for a, b in zip(sizes, sizes[1:]))

    def test_negative_epoch_rejected(self):
        with pytest.raises(ValueError):
            step_size(-1)


class TestAdam:
    def test_single_step_magnitude(self):
        # hand-executed recurrence: with fresh moments and g=1 the
        # bias-corrected update is lr * 1 / (1 + eps)
        store = ParamStore()
        p = store.add_param("w", np.array([0.0]))
        p.grad = np.array([1.0])
        adam_step(store, epoch=0)
        expected = -0.01 * 1.0 / (1.0 + ADAM_EPS)
        assert p.data[0] == pytest.approx(expected, rel=1e-12)

    def test_zero_gradient_is_noop_with_fresh_moments(self):
        store = ParamStore()
        p = store.add_param("w", np.array([1.5, -2.5]))
        adam_step(store, epoch=0)  # no grad accumulated at all
        assert np.array_equal(p.data, [1.5, -2.5])

    def test_shape_mismatch_rejected(self):
        store = ParamStore()
        p = store.add_param("w", np.zeros(3))
        p.grad = np.zeros(2)
        with pytest.raises(ValueError):
            adam_step(store, epoch=0)

    def test_two_steps_match_manual_recurrence(self):
        store = ParamStore()
        p = store.add_param("w", np.array([0.2]))
        grads = [0.3, -0.7]
        m = v = 0.0
        w = 0.2
        for t, g in enumerate(grads, start=1):
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            mh = m / (1 - 0.9**t)
            vh = v / (1 - 0.999**t)
            w -= 0.01 * mh / (np.sqrt(vh) + ADAM_EPS)
        for g in grads:
            p.grad = np.array([g])
            adam_step(store, epoch=0)
        assert p.data[0] == pytest.approx(w, rel=1e-12)


class TestBatchNorm:
    def make(self, dim):
        store = ParamStore()
        return store, BatchNorm(store, "bn", dim)

    def test_two_point_batch_is_normalized(self):
        store, bn = self.make(1)
        out = bn(Tensor([[2.0], [4.0]]), training=True)
        expected = 1.0 / np.sqrt(1.0 + bn.eps)  # batch var of {2,4} is 1
        assert out.data[0, 0] == pytest.approx(-expected, rel=1e-12)
        assert out.data[1, 0] == pytest.approx(expected, rel=1e-12)

    def test_constant_batch_maps_to_beta(self):
        store, bn = self.make(2)
        out = bn(Tensor(np.full((3, 2), 5.0)), training=True)
        assert np.allclose(out.data, 0.0)

    def test_gamma_zero_gives_beta(self):
        store, bn = self.make(2)
        bn.gamma.data[:] = 0.0
        bn.beta.data[:] = [1.0, -1.0]
        out = bn(Tensor(np.random.default_rng(0).normal(size=(4, 2))), training=True)
        assert np.allclose(out.data, [[1.0, -1.0]] * 4)

    def test_batch_of_one_gives_beta(self):
        store, bn = self.make(2)
        bn.beta.data[:] = [0.25, -0.5]
        out = bn(Tensor([[3.0, 7.0]]), training=True)
        assert np.allclose(out.data, [[0.25, -0.5]])

    def test_normalized_statistics(self):
        store, bn = self.make(3)
        x = np.random.default_rng(1).normal(2.0, 3.0, size=(64, 3))
        out = bn(Tensor(x), training=True).data
        assert np.allclose(out.mean(axis=0), 0.0, atol=1e-12)
        assert np.allclose(out.var(axis=0), 1.0, atol=1e-4)  # eps-induced slack

    def test_inference_uses_initial_running_stats(self):
        store, bn = self.make(2)
        x = np.array([[1.0, -2.0]])
        out = bn(Tensor(x), training=False)
        assert np.allclose(out.data, x / np.sqrt(1.0 + bn.eps))

    def test_running_stats_ema(self):
        store, bn = self.make(1)
        bn(Tensor([[2.0], [4.0]]), training=True)
        rmean = store.buffer("bn.running_mean")
        rvar = store.buffer("bn.running_var")
        assert rmean[0] == pytest.approx(0.9 * 0.0 + 0.1 * 3.0)
        assert rvar[0] == pytest.approx(0.9 * 1.0 + 0.1 * 1.0)
        skipped = bn(Tensor([[10.0], [12.0]]), training=True, update_running=False)
        assert rmean[0] == pytest.approx(0.3)  # unchanged

    def test_training_gradients_match_finite_differences(self):
        store, bn = self.make(3)
        rng = np.random.default_rng(5)
        x = Tensor(rng.uniform(-1, 1, size=(6, 3)), requires_grad=True)
        bn.gamma.data[:] = rng.uniform(0.5, 1.5, size=3)
        bn.beta.data[:] = rng.uniform(-0.5, 0.5, size=3)

        def build():
            out = bn(x, training=True, update_running=False)
            return sum_all(out * out)

        params = {"x": x, "gamma": bn.gamma, "beta": bn.beta}
        assert gradcheck(build, params) == []


class TestCheckpoint:
    def test_round_trip_exact(self, tmp_path):
        store = ParamStore()
        rng = np.random.default_rng(2)
        w = store.add_param("w", rng.normal(size=(3, 2)))
        b = store.add_param("b", rng.normal(size=2))
        store.add_buffer("running", np.array([1.0, 2.0, 3.0]))
        w.grad = rng.normal(size=(3, 2))
        b.grad = rng.normal(size=2)
        adam_step(store, epoch=3)

        save_checkpoint(store, tmp_path / "ck", extra={"epoch": 3})
        loaded, extra = load_checkpoint(tmp_path / "ck")
        assert extra == {"epoch": 3}
        assert np.array_equal(loaded.param("w").data, w.data)
        assert np.array_equal(loaded.param("b").data, b.data)
        assert np.array_equal(loaded.buffer("running"), store.buffer("running"))
        assert loaded._adam["w"]["t"] == 1
        assert np.array_equal(loaded._adam["w"]["m"], store._adam["w"]["m"])
        assert np.array_equal(loaded._adam["w"]["v"], store._adam["w"]["v"])

    def test_resume_continues_identically(self, tmp_path):
        def run(store, grads):
            p = store.param("w")
            for g in grads:
                p.grad = np.array([g])
                adam_step(store, epoch=0)
            return p.data.copy()

        store_a = ParamStore()
        store_a.add_param("w", np.array([1.0]))
        final_a = run(store_a, [0.5, -0.25, 0.125, 1.0])

        store_b = ParamStore()
        store_b.add_param("w", np.array([1.0]))
        run(store_b, [0.5, -0.25])
        save_checkpoint(store_b, tmp_path / "mid")
        resumed, _ = load_checkpoint(tmp_path / "mid")
        final_b = run(resumed, [0.125, 1.0])
        assert np.array_equal(final_a, final_b)
