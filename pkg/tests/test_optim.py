import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from contrastlab import optim as O
from contrastlab.tensor import DimensionError, Tensor


def cosine(total, warmup=0, **kw):
    return O.ScheduleConfig(total_epochs=total, warmup_epochs=warmup, **kw)


class TestCosine:
    def test_endpoints_and_midpoint(self):
        cfg, sgd = cosine(200), O.SgdConfig()
        assert O.cosine_lr(0, cfg, sgd) == pytest.approx(0.03)
        assert abs(O.cosine_lr(200, cfg, sgd)) <= 1e-12
        assert O.cosine_lr(100, cfg, sgd) == pytest.approx(0.015)

    def test_batch_scaling(self):
        cfg = cosine(200, batch_size=256, lr_scaling=True)
        assert O.cosine_lr(0, cfg, O.SgdConfig()) == pytest.approx(0.06)

    def test_no_scaling_by_default(self):
        assert O.cosine_lr(0, cosine(200, batch_size=512), O.SgdConfig()) == pytest.approx(0.03)

    def test_warmup_midpoint(self):
        cfg = cosine(200, warmup=10)
        sgd = O.SgdConfig()
        assert O.cosine_lr(5, cfg, sgd) == pytest.approx(0.015)
        assert O.cosine_lr(10, cfg, sgd) == pytest.approx(0.03)
        assert O.cosine_lr(0, cfg, sgd) == 0.0

    def test_large_batch_protocol(self):
        small = O.ScheduleConfig.large_batch_protocol(200, 256)
        big = O.ScheduleConfig.large_batch_protocol(200, 512)
        assert small.warmup_epochs == 0 and big.warmup_epochs == 10
        assert O.cosine_lr(10, big, O.SgdConfig()) == pytest.approx(0.12)

    @pytest.mark.parametrize("t", [-0.1, 200.5])
    def test_out_of_range(self, t):
        with pytest.raises(ValueError):
            O.cosine_lr(t, cosine(200), O.SgdConfig())

    def test_warmup_must_fit(self):
        with pytest.raises(ValueError):
            cosine(10, warmup=10)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 300), st.floats(0, 1), st.floats(0, 1))
    def test_non_increasing_after_warmup(self, total, a, b):
        warm = total // 10
        cfg, sgd = cosine(total, warm), O.SgdConfig()
        t1, t2 = sorted((warm + a * (total - warm), warm + b * (total - warm)))
        assert O.cosine_lr(t2, cfg, sgd) <= O.cosine_lr(t1, cfg, sgd) + 1e-15

    def test_continuous_at_warmup_boundary(self):
        cfg, sgd = cosine(100, 10), O.SgdConfig()
        assert O.cosine_lr(10 - 1e-9, cfg, sgd) == pytest.approx(O.cosine_lr(10, cfg, sgd), abs=1e-9)


class TestStep:
    def test_staircase(self):
        cfg, sgd = cosine(100, kind="step"), O.SgdConfig()
        lrs = [O.step_lr(t, cfg, sgd) for t in (0, 59.9, 60, 79.9, 80, 100)]
        assert lrs == pytest.approx([0.03, 0.03, 0.003, 0.003, 0.0003, 0.0003])

    def test_dispatch(self):
        cfg = cosine(100, kind="step")
        assert O.scheduled_lr(70, cfg, O.SgdConfig()) == pytest.approx(0.003)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            cosine(100, kind="linear")


class TestSgd:
    def test_plain_step(self):
        cfg = O.SgdConfig(base_lr=0.1, momentum=0.0, weight_decay=0.0)
        p, v = O.sgd_step([np.array([1.0])], [np.array([0.5])], [np.zeros(1)], 0.1, cfg)
        assert p[0][0] == pytest.approx(0.95)

    def test_zero_grads(self):
        cfg = O.SgdConfig(weight_decay=0.0)
        start = np.array([1.0, -2.0])
        p, _ = O.sgd_step([start], [np.zeros(2)], [np.zeros(2)], 0.1, cfg)
        assert np.array_equal(p[0], start)

    def test_two_steps_hand_unrolled(self):
        cfg = O.SgdConfig(base_lr=0.03, momentum=0.9, weight_decay=5e-4)
        p0, g1, g2, lr1, lr2 = 0.7, 0.2, -0.4, 0.03, 0.02
        v1 = g1 + 5e-4 * p0
        p1 = p0 - lr1 * v1
        v2 = 0.9 * v1 + (g2 + 5e-4 * p1)
        p2 = p1 - lr2 * v2
        params, vel = O.sgd_step([np.array([p0])], [np.array([g1])], [np.zeros(1)], lr1, cfg)
        params, vel = O.sgd_step(params, [np.array([g2])], vel, lr2, cfg)
        assert abs(params[0][0] - p2) <= 1e-9
        assert abs(vel[0][0] - v2) <= 1e-9

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            O.sgd_step([np.zeros(2)], [np.zeros(3)], [np.zeros(2)], 0.1, O.SgdConfig())

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            O.SgdConfig(momentum=1.0)
        with pytest.raises(ValueError):
            O.SgdConfig(base_lr=0.0)

    def test_stateful_wrapper_matches_function(self):
        t = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        opt = O.SGD([t], O.SgdConfig())
        t.grad = np.array([0.3, -0.1])
        opt.step(0.05)
        expected, _ = O.sgd_step([np.array([1.0, 2.0])], [np.array([0.3, -0.1])], [np.zeros(2)], 0.05, O.SgdConfig())
        np.testing.assert_allclose(t.data, expected[0])


class TestAdam:
    def test_first_step_magnitude_is_lr(self):
        cfg = O.AdamConfig()
        p, _ = O.adam_step([np.array([0.0, 0.0])], [np.array([3.0, 1e-3])], O.AdamState.zeros_like([np.zeros(2)]), cfg)
        np.testing.assert_allclose(np.abs(p[0]), 0.01, rtol=1e-4)

    def test_zero_grads_keep_params(self):
        start = [np.array([1.5, -0.5])]
        state = O.AdamState.zeros_like(start)
        params = start
        for _ in range(5):
            params, state = O.adam_step(params, [np.zeros(2)], state, O.AdamConfig())
        assert np.array_equal(params[0], start[0])

    def test_three_steps_hand_unrolled(self):
        cfg = O.AdamConfig()
        grads = [0.5, -1.0, 0.25]
        p, m, v = 1.0, 0.0, 0.0
        for k, g in enumerate(grads, start=1):
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            p -= 0.01 * (m / (1 - 0.9 ** k)) / (math.sqrt(v / (1 - 0.999 ** k)) + 1e-8)
        params, state = [np.array([1.0])], O.AdamState.zeros_like([np.zeros(1)])
        for g in grads:
            params, state = O.adam_step(params, [np.array([g])], state, cfg)
        assert abs(params[0][0] - p) <= 1e-9
        assert state.step == 3

    def test_invalid_betas(self):
        with pytest.raises(ValueError):
            O.AdamConfig(beta2=1.0)
