import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from salt import evaluation as E
from salt import models as M
from salt.data import DatasetSpec, make_clip
from salt.errors import ConfigError, ContractError, DegenerateError

from conftest import small_config


def starts_oracle(T, C, M_, s):
    out, t = [], 1
    while t <= T - (C + M_):
        out.append(t)
        t += s
    return out


def test_window_enumeration_over_grid():
    for T in range(2, 33):
        for C in range(1, 9):
            for M_ in range(1, 9):
                for s in range(1, 7):
                    if T - (C + M_) < 1:
                        with pytest.raises(ContractError):
                            E.window_starts(T, C, M_, s)
                    else:
                        assert E.window_starts(T, C, M_, s) == starts_oracle(T, C, M_, s)
    assert E.window_starts(16, 4, 4, 2) == [1, 3, 5, 7]


def test_global_surprise_aggregation():
    assert E.global_surprise([1.0, 2.0, 6.0]) == pytest.approx(3.0)
    assert E.global_surprise([1.0, 2.0, 6.0], "max") == 6.0
    with pytest.raises(ConfigError):
        E.global_surprise([1.0], "median")
    with pytest.raises(ContractError):
        E.global_surprise([])


def test_pair_accuracy_counts_ties_as_wrong():
    res = E.pair_relative_accuracy([1.0, 2.0, 3.0, 4.0], [2.0, 2.0, 1.0, 5.0])
    assert (res.correct, res.pairs, res.accuracy) == (2, 4, 0.5)
    assert res.sigma == pytest.approx(0.25)
    assert E.pair_relative_accuracy(np.zeros(100), np.ones(100)).z == pytest.approx(10.0)


def surprise_model(seed=0):
    cfg = small_config(grid=(8, 4, 4))
    rng = np.random.default_rng(seed)
    enc, pred = M.init_encoder(cfg, rng), M.init_predictor(cfg, rng)
    return E.SurpriseModel(enc, pred, enc, cfg, cfg)


CLIP_SPEC = DatasetSpec(clip_count=4, height=16, width=16, shape_size=(4, 6), speeds=(0.25, 0.5))


def test_surprise_scores_with_injected_predictor():
    model = surprise_model()
    frames = make_clip(CLIP_SPEC, 0).frames
    cfg = E.SurpriseConfig(4, 4, 2)
    exact = E.surprise_scores(model, frames, cfg, predict=lambda target, future: target)
    assert exact.starts == [1, 3, 5, 7]
    np.testing.assert_array_equal(exact.scores, 0.0)
    shifted = E.surprise_scores(model, frames, cfg, predict=lambda target, future: target + 0.5)
    np.testing.assert_allclose(shifted.scores, 0.5, rtol=1e-6)


def test_surprise_only_sees_the_window():
    model = surprise_model(1)
    frames = make_clip(CLIP_SPEC, 1).frames
    late = frames.copy()
    late[12:] = 0.0  # after the end of the first window
    cfg = E.SurpriseConfig(4, 4, 2)
    a = E.surprise_scores(model, frames, cfg).scores
    b = E.surprise_scores(model, late, cfg).scores
    assert a[0] == pytest.approx(b[0], rel=1e-6)
    assert a[-1] != pytest.approx(b[-1], rel=1e-6)


def test_surprise_config_requires_tubelet_multiples():
    with pytest.raises(ConfigError):
        E.SurpriseConfig(3, 4, 2).validate(16, 2)
    with pytest.raises(ContractError):
        E.SurpriseConfig(8, 8, 2).validate(12, 2)


@pytest.mark.parametrize("k", [1, 2, 5, 16])
def test_rankme_equal_singular_values(k):
    emb = np.zeros((32, 16))
    emb[np.arange(k), np.arange(k)] = 3.0
    assert E.rankme(emb) == pytest.approx(k, abs=1e-3)


def test_rankme_closed_forms_and_invariance():
    assert E.rankme(np.diag([2.0, 1.0, 1.0])) == pytest.approx(2 ** 1.5, abs=1e-3)
    rng = np.random.default_rng(0)
    assert E.rankme(np.outer(rng.standard_normal(20), rng.standard_normal(8))) == pytest.approx(1.0, abs=1e-3)
    z = rng.standard_normal((40, 10))
    q1, _ = np.linalg.qr(rng.standard_normal((40, 40)))
    q2, _ = np.linalg.qr(rng.standard_normal((10, 10)))
    assert E.rankme(q1 @ z @ q2) == pytest.approx(E.rankme(z), abs=1e-4)
    with pytest.raises(DegenerateError):
        E.rankme(np.zeros((3, 3)))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-50, 50), st.floats(-50, 50)), min_size=3, max_size=20))
def test_r2_fit_matches_lstsq(points):
    x = np.array([p[0] for p in points])
    y = np.array([p[1] for p in points])
    assume(np.ptp(x) > 1e-3 and np.ptp(y) > 1e-3)
    fit = E.r2_fit(x, y)
    A = np.stack([x, np.ones_like(x)], axis=1)
    (a, b), res, *_ = np.linalg.lstsq(A, y, rcond=None)
    assert fit.slope == pytest.approx(a, rel=1e-6, abs=1e-9)
    assert fit.intercept == pytest.approx(b, rel=1e-6, abs=1e-6)
    r2 = np.corrcoef(x, y)[0, 1] ** 2
    assert fit.r2 == pytest.approx(r2, abs=1e-6)


def test_r2_fit_degenerate_inputs():
    with pytest.raises(DegenerateError):
        E.r2_fit([1, 1, 1], [1, 2, 3])
    fit = E.r2_fit([1, 2, 3], [5, 5, 5])
    assert fit.degenerate and fit.r2 == 0.0
    with pytest.raises(ContractError):
        E.r2_fit([1, 2], [3, 4])
    assert E.r2_fit([1, 2, 3], [3, 2, 1]).slope == pytest.approx(-1.0)


def test_smoothed_loss_window():
    records = [{"step": s, "loss": float(s)} for s in range(1, 11)]
    assert E.smoothed_loss(records, 10, window=4) == pytest.approx(8.5)
    assert E.smoothed_loss(records, 2, window=50) == pytest.approx(1.5)


def one_hot_latents(labels, rng, tokens=4, width=8, noise=0.1):
    x = noise * rng.standard_normal((labels.size, tokens, width))
    x[np.arange(labels.size), :, labels] += 3.0
    return x.astype(np.float32)


def test_probe_learns_linearly_separable_latents():
    rng = np.random.default_rng(0)
    ytr, yev = rng.integers(0, 4, 200), rng.integers(0, 4, 80)
    cfg = E.ProbeConfig(blocks=0, heads=2, epochs=15, lrs=(3e-3,))
    res = E.train_probe_on_latents(one_hot_latents(ytr, rng), ytr, one_hot_latents(yev, rng), yev, cfg)
    assert res.accuracy >= 0.95
    assert res.total == 80 and res.confusion.shape == (4, 4)


def test_probe_is_at_chance_on_uninformative_latents():
    rng = np.random.default_rng(1)
    ytr, yev = rng.integers(0, 4, 200), rng.integers(0, 4, 400)
    x = lambda n: rng.standard_normal((n, 4, 8)).astype(np.float32)  # noqa: E731
    cfg = E.ProbeConfig(blocks=0, heads=2, epochs=5, lrs=(3e-3,))
    res = E.train_probe_on_latents(x(200), ytr, x(400), yev, cfg)
    assert abs(res.accuracy - 0.25) < 0.1


def test_probe_config_validation_and_label_range():
    with pytest.raises(ConfigError):
        E.ProbeConfig(task="colour").validate()
    with pytest.raises(ConfigError):
        E.ProbeConfig(lrs=()).validate()
    with pytest.raises(ConfigError):
        E.train_probe_on_latents(np.zeros((2, 1, 8)), np.array([0, 7]), np.zeros((2, 1, 8)), np.array([0, 1]),
                                 E.ProbeConfig(blocks=0, heads=2, epochs=1))


def test_probe_on_tiny_encoder_is_deterministic(tiny_dataset):
    rng = np.random.default_rng(0)
    cfg = small_config()
    enc = M.init_encoder(cfg, rng)
    probe = E.ProbeConfig(blocks=1, heads=2, epochs=2, lrs=(1e-3,))
    a = E.train_probe(enc, cfg, tiny_dataset, probe)
    b = E.train_probe(enc, cfg, tiny_dataset, probe)
    assert a.accuracy == b.accuracy and (a.confusion == b.confusion).all()
    assert a.total == tiny_dataset.indices("eval").size
