import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from salt import optim as O
from salt import tensor as T
from salt.errors import ConfigError, ContractError, NumericError

PAPER = O.OptimConfig()

pytestmark = pytest.mark.usefixtures("f64")


def param(values):
    return T.tensor(np.asarray(values, dtype=np.float64), requires_grad=True)


def test_paper_schedule_endpoints():
    assert O.lr_at(0, PAPER) == pytest.approx(2e-4)
    assert O.lr_at(5_000, PAPER) == pytest.approx((2e-4 + 6.25e-4) / 2)
    assert O.lr_at(10_000, PAPER) == pytest.approx(6.25e-4)
    assert O.lr_at(125_000, PAPER) == pytest.approx((6.25e-4 + 1e-6) / 2)
    assert O.lr_at(240_000, PAPER) == pytest.approx(1e-6)
    assert O.wd_at(0, PAPER) == pytest.approx(0.04)
    assert O.wd_at(120_000, PAPER) == pytest.approx(0.22)
    assert O.wd_at(240_000, PAPER) == pytest.approx(0.4)
    with pytest.raises(ContractError):
        O.lr_at(240_001, PAPER)
    with pytest.raises(ContractError):
        O.wd_at(-1, PAPER)


@settings(max_examples=50, deadline=None)
@given(st.integers(10, 5000), st.data())
def test_schedules_are_bounded_and_monotone_in_each_phase(total, data):
    cfg = O.OptimConfig.desk(total)
    s = data.draw(st.integers(0, total - 1))
    lr, nxt = O.lr_at(s, cfg), O.lr_at(s + 1, cfg)
    assert cfg.final_lr - 1e-15 <= lr <= cfg.peak_lr + 1e-15
    if s + 1 <= cfg.warmup_steps:
        assert nxt >= lr
    elif s >= cfg.warmup_steps:
        assert nxt <= lr + 1e-15
    assert O.wd_at(s, cfg) <= O.wd_at(s + 1, cfg) + 1e-15


def test_desk_schedule_keeps_paper_warmup_fraction():
    cfg = O.OptimConfig.desk(2400)
    assert cfg.warmup_steps == 100 and cfg.total_steps == 2400
    with pytest.raises(ConfigError):
        O.OptimConfig(warmup_steps=10, total_steps=5).validate()


def test_adam_first_step_oracle():
    # bias-corrected first step moves each coordinate by lr * g / (|g| + eps)
    p = param([1.0])
    O.adamw_step([p], [np.array([1.0])], O.AdamState.zeros([p]), lr=0.1, wd=0.0, cfg=PAPER)
    assert p.data[0] == pytest.approx(0.9, abs=1e-8)


def test_adam_matches_reference_loop():
    rng = np.random.default_rng(0)
    p = param(rng.standard_normal((3, 2)))
    ref = p.data.copy()
    m = np.zeros_like(ref)
    v = np.zeros_like(ref)
    state = O.AdamState.zeros([p])
    for t in range(1, 6):
        g = rng.standard_normal(ref.shape)
        O.adamw_step([p], [g], state, lr=0.01, wd=0.1, cfg=PAPER)
        m = 0.9 * m + 0.1 * g
        v = 0.95 * v + 0.05 * g * g
        mh, vh = m / (1 - 0.9 ** t), v / (1 - 0.95 ** t)
        ref = ref - 0.01 * 0.1 * ref - 0.01 * mh / (np.sqrt(vh) + 1e-8)
    np.testing.assert_allclose(p.data, ref, rtol=1e-12)


def test_weight_decay_skips_vectors():
    w, b = param(np.ones((2, 2))), param(np.ones(2))
    mask = O.decay_mask([w, b])
    assert mask == [True, False]
    zeros = [np.zeros((2, 2)), np.zeros(2)]
    O.adamw_step([w, b], zeros, O.AdamState.zeros([w, b]), lr=0.5, wd=0.2, cfg=PAPER, decay=mask)
    np.testing.assert_allclose(w.data, 0.9)
    np.testing.assert_allclose(b.data, 1.0)


def test_nan_gradient_raises():
    p = param([1.0])
    with pytest.raises(NumericError):
        O.adamw_step([p], [np.array([np.nan])], O.AdamState.zeros([p]), 0.1, 0.0, PAPER)
    with pytest.raises(NumericError):
        O.clip_gradients([np.array([np.inf])], 1.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=1, max_size=8), st.floats(1e-3, 10))
def test_clipping_caps_norm_and_preserves_direction(values, max_norm):
    g = [np.array(values[: len(values) // 2 + 1]), np.array(values[len(values) // 2 + 1:] or [0.0])]
    clipped, norm = O.clip_gradients(g, max_norm)
    assert norm == pytest.approx(math.sqrt(sum(v * v for v in values)))
    after = O.global_norm(clipped)
    assert after <= max_norm * (1 + 1e-9)
    if norm > max_norm:
        assert after == pytest.approx(max_norm)
        np.testing.assert_allclose(np.concatenate(clipped) * norm, np.concatenate(g) * after, atol=1e-9)
    else:
        assert all(a is b for a, b in zip(clipped, g))


def test_ema_momentum_schedule():
    sched = O.EmaSchedule(0.996, 1.0, 1000)
    assert sched.momentum(0) == 0.996
    assert sched.momentum(500) == pytest.approx(0.998)
    assert sched.momentum(1000) == 1.0 and sched.momentum(5000) == 1.0
    with pytest.raises(ConfigError):
        O.EmaSchedule(1.0, 0.9, 10).validate()


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 1.0), st.integers(0, 1000))
def test_ema_update_contracts_toward_student(m, seed):
    rng = np.random.default_rng(seed)
    t0 = rng.standard_normal((3, 4))
    s = rng.standard_normal((3, 4))
    teacher = {"w": T.tensor(t0.copy())}
    student = {"w": T.tensor(s)}
    O.ema_update(teacher, student, m)
    np.testing.assert_allclose(teacher["w"].data, m * t0 + (1 - m) * s, atol=1e-12)
    assert np.linalg.norm(teacher["w"].data - s) <= m * np.linalg.norm(t0 - s) + 1e-12


def test_ema_endpoints_and_read_only_teacher():
    t = T.tensor(np.zeros(3))
    t.data.flags.writeable = False
    O.ema_update({"a": t}, {"a": T.tensor(np.ones(3))}, 1.0)
    np.testing.assert_array_equal(t.data, 0.0)
    O.ema_update({"a": t}, {"a": T.tensor(np.ones(3))}, 0.0)
    np.testing.assert_array_equal(t.data, 1.0)
    assert not t.data.flags.writeable
