import sys

import numpy as np
import pytest

from salt import tensor as T


def numeric_grad(f, arr: np.ndarray, index, h: float = 1e-4) -> float:
    """Central difference of scalar ``f()`` with respect to ``arr[index]``."""
    old = arr[index]
    arr[index] = old + h
    up = f()
    arr[index] = old - h
    down = f()
    arr[index] = old
    return (up - down) / (2 * h)


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))))


def grad_check(build, inputs: list[T.Tensor], samples: int = 6, seed: int = 0, h: float = 1e-4) -> float:
    """Worst relative error between tape gradients and finite differences.

    ``build(*inputs)`` must return a scalar Tensor.  Runs in float64.
    """
    rng = np.random.default_rng(seed)
    for t in inputs:
        t.grad = None
    loss = build(*inputs)
    T.backward(loss)
    worst = 0.0

    def f():
        with T.no_grad():
            return float(build(*inputs).data)

    for t in inputs:
        if not t.requires_grad:
            continue
        for _ in range(samples):
            idx = tuple(int(rng.integers(s)) for s in t.shape)
            num = numeric_grad(f, t.data, idx, h)
            ana = t.grad[idx]
            if abs(num) + abs(ana) > 1e-9:
                worst = max(worst, rel_err(ana, num))
    return worst


@pytest.fixture
def f64():
    with T.precision(np.float64):
        yield


def small_config(**kw):
    from salt.models import get_config

    base = dict(width=24, depth=2, heads=2, grid=(2, 4, 4), pred_width=12, pred_depth=1, pred_heads=2,
                dec_width=12, dec_depth=1, dec_heads=2)
    return get_config("tiny-L", **{**base, **kw})


def jitter(params, rng, std: float = 0.2):
    # break the zero-initialised projections so every path carries gradient
    for t in params.values():
        t.data = t.data + std * rng.standard_normal(t.shape)


def model_gradient_errors(stage: str, seed: int = 0, samples: int = 12, h: float = 1e-6,
                          pixel_loss: str = "mse") -> list[float]:
    """Relative errors of tape gradients against central differences for one training loss.

    Builds a small encoder plus decoder (``stage1``) or predictor with a random
    frozen teacher (``stage2``) in float64 and perturbs ``samples`` randomly
    chosen scalar parameters.
    """
    from salt import models as M
    from salt.data import normalize_tubelets
    from salt.masking import sample_multiblock
    from salt.trainers import PIXEL_LOSSES, _loss_over_masks

    rng = np.random.default_rng(seed)
    with T.precision(np.float64):
        cfg = small_config()
        enc = M.init_encoder(cfg, rng)
        jitter(enc, rng)
        tokens = rng.random((2, cfg.num_tokens, cfg.token_dim))
        if stage == "stage1":
            head, fn = M.init_decoder(cfg, rng), M.decoder_forward
            loss_fn = PIXEL_LOSSES[pixel_loss]
            targets = normalize_tubelets(tokens)
        else:
            head, fn = M.init_predictor(cfg, rng), M.predictor_forward
            loss_fn = T.l1_loss_masked
            teacher = M.init_encoder(cfg, rng)
            jitter(teacher, rng)
            teacher.freeze()
            with T.no_grad():
                targets = M.encode_full(teacher, cfg, tokens).data
        jitter(head, rng)
        pairs = [sample_multiblock(cfg.grid, rng=r) for r in rng.spawn(2)]
        masks = [np.stack([p[j].masked for p in pairs]) for j in range(2)]

        def loss():
            return _loss_over_masks(enc, head, cfg, tokens, targets, masks, fn, loss_fn)[0]

        params = list(enc.values()) + list(head.values())
        T.backward(loss())
        errors = []
        while len(errors) < samples:
            p = params[int(rng.integers(len(params)))]
            idx = tuple(int(rng.integers(s)) for s in p.shape)
            with T.no_grad():
                num = numeric_grad(lambda: float(loss().data), p.data, idx, h)
            ana = float(p.grad[idx])
            if max(abs(num), abs(ana)) < 1e-8:
                continue
            errors.append(rel_err(ana, num))
        return errors


TINY_SPEC = dict(clip_count=40, frames=4, height=16, width=16, shape_size=(4, 6), speeds=(0.25, 0.5))


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """40 four-frame clips on a 2x4x4 token grid, matching ``small_config``."""
    from salt.data import Dataset, DatasetSpec, generate_dataset

    root = tmp_path_factory.mktemp("tiny_ds")
    generate_dataset(DatasetSpec(**TINY_SPEC), root, force=True)
    return Dataset(root)


@pytest.fixture(scope="session")
def tiny_teacher(tmp_path_factory, tiny_dataset):
    """Path of a 6-step Stage-1 checkpoint on the tiny dataset."""
    from salt.optim import OptimConfig
    from salt.trainers import TrainPlan, train

    out = tmp_path_factory.mktemp("tiny_teacher")
    res = train(TrainPlan(stage="stage1", steps=6, batch_size=4), small_config(), OptimConfig.desk(6),
                tiny_dataset, out)
    return res.checkpoints[-1]


def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion, after the usual report."""
    mod = sys.modules.get("test_acceptance")
    verdicts = getattr(mod, "VERDICTS", None)
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(verdicts):
        terminalreporter.write_line(verdicts[n])
