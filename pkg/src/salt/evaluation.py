"""Frozen-backbone probing, surprise scores, RankMe and loss/accuracy fits."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import models as M
from . import tensor as T
from .data import Dataset, patchify_frames
from .errors import ConfigError, ContractError, DegenerateError
from .models import ModelConfig, ParamSet, VisibleBatch
from .optim import AdamState, OptimConfig, adamw_step, clip_gradients, decay_mask, lr_at, wd_at
from .seeding import substream

TASKS = {"motion": 4, "shape": 4}


# ---------------------------------------------------------------------------
# attentive probe
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProbeConfig:
    task: str = "motion"
    blocks: int = 3
    heads: int = 4
    epochs: int = 20
    batch_size: int = 32
    lrs: tuple[float, ...] = (1e-3, 3e-4)
    wds: tuple[float, ...] = (0.01,)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "lrs", tuple(float(v) for v in self.lrs))
        object.__setattr__(self, "wds", tuple(float(v) for v in self.wds))

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {sorted(TASKS)}")
        if self.blocks < 0 or self.epochs < 1 or self.batch_size < 1 or self.heads < 1:
            raise ConfigError("probe blocks >= 0, epochs, batch_size and heads >= 1 required")
        if not self.lrs or not self.wds:
            raise ConfigError("probe needs at least one learning rate and one weight decay")

    def replace(self, **kw) -> "ProbeConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ProbeConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown probe keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ProbeResult:
    accuracy: float
    confusion: np.ndarray  # [true, predicted]
    lr: float
    wd: float
    grid: list[dict] = field(default_factory=list)  # accuracy per (lr, wd)

    @property
    def correct(self) -> int:
        return int(np.trace(self.confusion))

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "correct": self.correct, "total": self.total,
                "lr": self.lr, "wd": self.wd, "confusion": self.confusion.tolist(), "grid": self.grid}


def extract_latents(params: ParamSet, cfg: ModelConfig, tokens: np.ndarray, batch: int = 64) -> np.ndarray:
    """Full-clip encoder outputs ``[clips, N, width]`` computed without a tape."""
    out = []
    with T.no_grad():
        for i in range(0, tokens.shape[0], batch):
            out.append(M.encode_full(params, cfg, tokens[i:i + batch]).data)
    return np.concatenate(out, axis=0)


def confusion_matrix(labels: np.ndarray, preds: np.ndarray, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def probe_predict(params: ParamSet, latents: np.ndarray, heads: int, batch: int = 128) -> np.ndarray:
    preds = []
    with T.no_grad():
        for i in range(0, latents.shape[0], batch):
            logits = M.attentive_probe_forward(params, latents[i:i + batch], heads)
            preds.append(np.argmax(logits.data, axis=1))
    return np.concatenate(preds)


def _fit_probe(train_x, train_y, num_classes, cfg: ProbeConfig, lr: float, wd: float,
               rng: np.random.Generator) -> ParamSet:
    n = train_x.shape[0]
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    params = M.init_probe(train_x.shape[-1], cfg.heads, num_classes, rng, blocks=cfg.blocks)
    ocfg = OptimConfig(start_lr=lr, peak_lr=lr, final_lr=0.0, warmup_steps=0, total_steps=total,
                       start_wd=wd, end_wd=wd, beta2=0.999, grad_clip=1.0)
    trainable = params.trainable()
    state = AdamState.zeros(trainable)
    decay = decay_mask(trainable)
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for i in range(0, n, cfg.batch_size):
            idx = np.sort(order[i:i + cfg.batch_size])
            logits = M.attentive_probe_forward(params, train_x[idx], cfg.heads)
            loss = T.cross_entropy(logits, train_y[idx])
            params.zero_grad()
            T.backward(loss)
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in trainable]
            grads, _ = clip_gradients(grads, ocfg.grad_clip)
            adamw_step(trainable, grads, state, lr_at(step, ocfg), wd_at(step, ocfg), ocfg, decay)
            step += 1
    return params


def train_probe_on_latents(train_x: np.ndarray, train_y: np.ndarray, eval_x: np.ndarray, eval_y: np.ndarray,
                           cfg: ProbeConfig, num_classes: int | None = None) -> ProbeResult:
    """Train one probe per (lr, wd) and report the best eval accuracy."""
    cfg.validate()
    num_classes = num_classes or TASKS[cfg.task]
    for y in (train_y, eval_y):
        if y.min() < 0 or y.max() >= num_classes:
            raise ConfigError(f"labels outside [0, {num_classes}) for task {cfg.task}")
    if train_x.shape[-1] % cfg.heads:
        raise ConfigError(f"latent width {train_x.shape[-1]} not divisible by {cfg.heads} probe heads")
    best = None
    grid = []
    for gi, (lr, wd) in enumerate((lr, wd) for lr in cfg.lrs for wd in cfg.wds):
        rng = substream(cfg.seed, "probe", gi)
        params = _fit_probe(train_x, train_y, num_classes, cfg, lr, wd, rng)
        preds = probe_predict(params, eval_x, cfg.heads)
        cm = confusion_matrix(eval_y, preds, num_classes)
        acc = float(np.trace(cm)) / eval_y.size
        grid.append({"lr": lr, "wd": wd, "accuracy": acc})
        if best is None or acc > best.accuracy:
            best = ProbeResult(acc, cm, lr, wd)
    best.grid = grid
    return best


def train_probe(params: ParamSet, cfg: ModelConfig, dataset: Dataset, probe: ProbeConfig) -> ProbeResult:
    """Probe a frozen encoder on the dataset's train/eval split."""
    probe.validate()
    labels = dataset.labels(probe.task)
    tr, ev = dataset.indices("train"), dataset.indices("eval")
    if tr.size == 0 or ev.size == 0:
        raise ConfigError("dataset needs both train and eval clips for probing")
    tok_tr = patchify_frames(dataset.frames(tr), cfg.tubelet).astype(T.default_dtype(), copy=False)
    tok_ev = patchify_frames(dataset.frames(ev), cfg.tubelet).astype(T.default_dtype(), copy=False)
    return train_probe_on_latents(extract_latents(params, cfg, tok_tr), labels[tr],
                                  extract_latents(params, cfg, tok_ev), labels[ev], probe)


# ---------------------------------------------------------------------------
# surprise
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SurpriseConfig:
    context: int = 4
    future: int = 4
    stride: int = 2
    aggregation: str = "avg"

    def validate(self, frames: int | None = None, tubelet_t: int = 1) -> None:
        if self.context < 1 or self.future < 1:
            raise ConfigError("context and future frame counts must be positive")
        if self.stride < 1:
            raise ConfigError("stride must be >= 1")
        if self.aggregation not in ("avg", "max"):
            raise ConfigError(f"aggregation must be 'avg' or 'max', got {self.aggregation!r}")
        for name in ("context", "future", "stride"):
            if getattr(self, name) % tubelet_t:
                raise ConfigError(f"{name}={getattr(self, name)} is not a multiple of the tubelet depth {tubelet_t}")
        if frames is not None and self.context + self.future > frames:
            raise ContractError(f"clip of {frames} frames is shorter than context + future "
                                f"= {self.context + self.future}")


def window_starts(frames: int, context: int, future: int, stride: int) -> list[int]:
    """1-based window starts {1, 1+s, ..., T-(C+M)}."""
    if stride < 1:
        raise ConfigError("stride must be >= 1")
    last = frames - (context + future)
    if last < 1:
        raise ContractError(f"T={frames} leaves no window for C={context}, M={future}")
    return list(range(1, last + 1, stride))


@dataclass
class SurpriseSeries:
    starts: list[int]
    scores: np.ndarray
    aggregation: str = "avg"

    @property
    def value(self) -> float:
        return global_surprise(self.scores, self.aggregation)


def global_surprise(scores, aggregation: str = "avg") -> float:
    """Average (normalised by the window count) or maximum of per-window scores."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ContractError("empty surprise series")
    if aggregation == "avg":
        return float(scores.sum() / scores.size)
    if aggregation == "max":
        return float(scores.max())
    raise ConfigError(f"aggregation must be 'avg' or 'max', got {aggregation!r}")


@dataclass
class SurpriseModel:
    """Student encoder f, predictor g and target encoder h for surprise scoring."""

    student: ParamSet
    predictor: ParamSet
    target: ParamSet
    cfg: ModelConfig
    target_cfg: ModelConfig


def _window_tokens(frames: np.ndarray, starts: list[int], span: int, tubelet) -> np.ndarray:
    wins = np.stack([frames[s - 1:s - 1 + span] for s in starts])
    return patchify_frames(wins, tubelet).astype(T.default_dtype(), copy=False)


def surprise_scores(model: SurpriseModel, frames: np.ndarray, cfg: SurpriseConfig,
                    predict=None) -> SurpriseSeries:
    """Per-window L1 between predicted and encoded future latents.

    ``frames`` is one clip ``[T, C, H, W]``.  Each window is encoded by the
    student on its first ``context`` frames; the predictor fills the future
    positions; the target encoder sees the whole window.  ``predict`` may
    replace the predictor (used by tests to inject exact targets).
    """
    tt = model.cfg.tubelet[0]
    cfg.validate(frames.shape[0], tt)
    starts = window_starts(frames.shape[0], cfg.context, cfg.future, cfg.stride)
    span = cfg.context + cfg.future
    tokens = _window_tokens(frames, starts, span, model.cfg.tubelet)
    _, hh, ww = model.cfg.grid
    grid = (span // tt, hh, ww)
    n = grid[0] * hh * ww
    future = np.zeros(grid, dtype=bool)
    future[cfg.context // tt:] = True
    future = future.reshape(-1)
    b = len(starts)
    with T.no_grad():
        target = M.encode_full(model.target, model.target_cfg, tokens).data
        if predict is None:
            masked = np.broadcast_to(future, (b, n))
            vb = VisibleBatch.from_masks(masked, grid)
            ctx = M.encode_visible(model.student, model.cfg, tokens, np.arange(b), vb)
            pred = M.predictor_forward(model.predictor, model.cfg, ctx, vb).data
        else:
            pred = predict(target, future)
    diff = np.abs(pred[:, future].astype(np.float64) - target[:, future].astype(np.float64))
    scores = diff.reshape(b, -1).mean(axis=1)
    return SurpriseSeries(starts, scores, cfg.aggregation)


@dataclass
class PairAccuracy:
    accuracy: float
    correct: int
    pairs: int
    sigma: float  # binomial standard error at chance

    @property
    def z(self) -> float:
        return (self.accuracy - 0.5) / self.sigma if self.sigma > 0 else float("inf")

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "correct": self.correct, "pairs": self.pairs,
                "sigma": self.sigma, "z": self.z}


def pair_relative_accuracy(possible, impossible) -> PairAccuracy:
    """Fraction of pairs whose impossible clip is strictly more surprising (ties count wrong)."""
    possible = np.asarray(possible, dtype=np.float64)
    impossible = np.asarray(impossible, dtype=np.float64)
    if possible.shape != impossible.shape or possible.ndim != 1:
        raise ContractError("possible and impossible scores must be matching 1-D arrays")
    if possible.size == 0:
        raise ContractError("need at least one pair")
    correct = int((impossible > possible).sum())
    n = possible.size
    return PairAccuracy(correct / n, correct, n, 0.5 / math.sqrt(n))


def score_pairs(model: SurpriseModel, pairs: Dataset, cfg: SurpriseConfig) -> dict:
    """Global surprise for every (possible, impossible) pair of a pairs dataset."""
    if pairs.kind != "pairs":
        raise ConfigError(f"{pairs.root} is not a pairs dataset")
    by_pair: dict[int, dict[str, float]] = {}
    kinds: dict[int, str] = {}
    for i, e in enumerate(pairs.entries):
        clip = pairs.load(i)
        s = surprise_scores(model, clip.frames, cfg)
        by_pair.setdefault(e["pair"], {})[e["role"]] = s.value
        kinds[e["pair"]] = e["violation"]
    ids = sorted(by_pair)
    poss = np.array([by_pair[p]["possible"] for p in ids])
    imp = np.array([by_pair[p]["impossible"] for p in ids])
    overall = pair_relative_accuracy(poss, imp)
    per_kind = {}
    for kind in sorted(set(kinds.values())):
        sel = np.array([kinds[p] == kind for p in ids])
        per_kind[kind] = pair_relative_accuracy(poss[sel], imp[sel]).to_dict()
    return {"overall": overall, "per_kind": per_kind, "possible": poss, "impossible": imp}


# ---------------------------------------------------------------------------
# RankMe and linear fits
# ---------------------------------------------------------------------------

RANKME_EPS = 1e-7


def rankme(embeddings: np.ndarray, eps: float = RANKME_EPS) -> float:
    """exp(entropy) of the normalised singular-value distribution."""
    z = np.asarray(embeddings, dtype=np.float64)
    if z.ndim != 2 or min(z.shape) < 1:
        raise ConfigError(f"rankme expects a non-empty n x d matrix, got {z.shape}")
    s = np.linalg.svd(z, compute_uv=False)
    total = s.sum()
    if total <= 0:
        raise DegenerateError("rankme of an all-zero matrix is undefined")
    p = s / total + eps
    p /= p.sum()
    return float(np.exp(-(p * np.log(p)).sum()))


@dataclass
class LinearFit:
    slope: float
    intercept: float
    r2: float
    n: int
    degenerate: bool = False

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def r2_fit(xs, ys) -> LinearFit:
    """Ordinary least squares y = a x + b with R^2 = 1 - SS_res / SS_tot.

    Constant ``ys`` give R^2 = 0 with ``degenerate`` set.
    """
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ContractError("xs and ys must be 1-D arrays of equal length")
    if x.size < 3:
        raise ContractError("r2_fit needs at least 3 points")
    dx = x - x.mean()
    sxx = float(dx @ dx)
    if sxx == 0.0:
        raise DegenerateError("xs have zero variance")
    dy = y - y.mean()
    slope = float(dx @ dy) / sxx
    intercept = float(y.mean() - slope * x.mean())
    ss_tot = float(dy @ dy)
    if ss_tot == 0.0:
        return LinearFit(slope, intercept, 0.0, x.size, True)
    resid = y - (slope * x + intercept)
    return LinearFit(slope, intercept, 1.0 - float(resid @ resid) / ss_tot, x.size)


def smoothed_loss(records: list[dict], step: int, window: int = 50) -> float:
    """Mean training loss over the ``window`` records ending at ``step``."""
    losses = [r["loss"] for r in records if step - window < r["step"] <= step]
    if not losses:
        raise ContractError(f"no records up to step {step}")
    return float(np.mean(losses))
