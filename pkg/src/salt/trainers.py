"""Stage-1 pixel teacher, Stage-2 frozen-teacher student, and the EMA baseline.

All three loops share one step structure: draw a batch, sample two masks per
clip, encode the visible tokens, predict every grid position with a narrow
transformer, take the loss on the hidden rows of each mask and average the two
losses, then clip and apply AdamW.  They differ only in the targets:

* ``stage1``: per-tubelet standardised pixels, squared error by default as in
  VideoMAE (``pixel_loss="l1"`` is available);
* ``stage2``: latents of a frozen teacher loaded from a checkpoint;
* ``ema_baseline``: latents of an EMA copy of the student behind a stop-gradient.

Both latent stages use L1.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import masking
from . import models as M
from . import tensor as T
from .budget import teacher_forward_flops, train_flops
from .checkpoint import flatten, load_checkpoint, save_checkpoint, unflatten, verify_shapes
from .data import Dataset, DatasetSpec, normalize_tubelets, patchify_frames
from .errors import ConfigError, ContractError, NumericError
from .models import ModelConfig, ParamSet, VisibleBatch
from .optim import (AdamState, EmaSchedule, OptimConfig, adamw_step, clip_gradients, decay_mask,
                    ema_update, lr_at, wd_at)
from .seeding import substream

log = logging.getLogger(__name__)

STAGES = ("stage1", "stage2", "ema_baseline")
PIXEL_LOSSES = {"mse": T.mse_loss_masked, "l1": T.l1_loss_masked}
RECORD_FIELDS = ("step", "loss", "lr", "wd", "grad_norm", "flops_cum", "wall_time")


@dataclass(frozen=True)
class TrainPlan:
    stage: str = "stage1"
    steps: int = 1000
    batch_size: int = 32
    seed: int = 0
    masking: str = "multiblock"
    short_scale: float = 0.15
    long_scale: float = 0.7
    temporal_scale: float = 1.0
    aspect_ratio_range: tuple[float, float] = (0.75, 1.5)
    short_block_count: int = 8
    long_block_count: int = 2
    ratios: tuple[float, float] = (0.9, 0.9)
    teacher: str | None = None
    checkpoint_every: int | None = None
    ema_start: float = 0.996
    ema_end: float = 1.0
    check_invariants: bool = False
    pixel_loss: str = "mse"

    def __post_init__(self):
        object.__setattr__(self, "aspect_ratio_range", tuple(float(v) for v in self.aspect_ratio_range))
        object.__setattr__(self, "ratios", tuple(float(v) for v in self.ratios))

    def validate(self) -> None:
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be positive")
        if self.pixel_loss not in PIXEL_LOSSES:
            raise ConfigError(f"unknown pixel_loss {self.pixel_loss!r}; expected one of {sorted(PIXEL_LOSSES)}")
        if self.masking not in masking.STRATEGIES:
            raise ConfigError(f"unknown masking strategy {self.masking!r}")
        if self.stage == "stage2" and not self.teacher:
            raise ConfigError("stage2 requires field 'teacher' (a Stage-1 checkpoint path)")
        if self.checkpoint_every is not None and self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be positive")
        self.multiblock().validate()
        self.ema().validate()

    def multiblock(self) -> masking.MultiBlockParams:
        return masking.MultiBlockParams(self.short_scale, self.long_scale, self.temporal_scale,
                                        self.aspect_ratio_range, self.short_block_count,
                                        self.long_block_count)

    def ema(self) -> EmaSchedule:
        return EmaSchedule(self.ema_start, self.ema_end, self.steps)

    @property
    def cadence(self) -> int:
        return self.checkpoint_every or max(self.steps // 10, 100)

    def replace(self, **kw) -> "TrainPlan":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainPlan":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainResult:
    params: dict[str, ParamSet]
    records: list[dict]
    checkpoints: list[Path] = field(default_factory=list)


def checkpoint_steps(total: int, every: int) -> list[int]:
    steps = list(range(every, total + 1, every))
    if not steps or steps[-1] != total:
        steps.append(total)
    return steps


def load_tokens(dataset: Dataset, cfg: ModelConfig, split: str = "train") -> np.ndarray:
    """All clips of ``split`` as ``[clips, N, p]`` tubelet tokens."""
    idx = dataset.indices(split)
    if idx.size == 0:
        raise ConfigError(f"dataset has no {split!r} clips")
    tokens = patchify_frames(dataset.frames(idx), cfg.tubelet)
    if tokens.shape[1:] != (cfg.num_tokens, cfg.token_dim):
        raise ConfigError(f"dataset tokens {tokens.shape[1:]} do not fit model grid {cfg.grid} "
                          f"/ tubelet {cfg.tubelet} ({cfg.num_tokens} x {cfg.token_dim})")
    return tokens.astype(T.default_dtype(), copy=False)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def load_params(path, cfg: ModelConfig | None = None, groups=("encoder",)) -> tuple[dict, dict[str, ParamSet]]:
    """Load parameter groups from a checkpoint, checking shapes against ``cfg``.

    Returns the config echo and ``{group: ParamSet}`` (not frozen, no grads).
    """
    echo, raw = load_checkpoint(path)
    if cfg is None:
        cfg = ModelConfig.from_dict(echo["model"])
    expected = {}
    for g in groups:
        for name, shape in param_shapes(cfg, g).items():
            expected[f"{g}.{name}"] = shape
    verify_shapes(raw, expected)
    sets = unflatten(raw)
    out = {}
    for g in groups:
        dt = T.default_dtype()
        out[g] = ParamSet({k: T.Tensor(np.array(v, dtype=dt), requires_grad=False, name=k)
                           for k, v in sorted(sets[g].items())})
    return echo, out


_INIT = {"encoder": M.init_encoder, "teacher": M.init_encoder, "predictor": M.init_predictor,
         "decoder": M.init_decoder}


def param_shapes(cfg: ModelConfig, group: str) -> dict[str, tuple[int, ...]]:
    try:
        init = _INIT[group]
    except KeyError:
        raise ConfigError(f"unknown parameter group {group!r}") from None
    return {k: v.shape for k, v in init(cfg, np.random.default_rng(0)).items()}


def _masks_for_batch(plan: TrainPlan, grid, batch: int, rng: np.random.Generator) -> list[np.ndarray]:
    """One ``[B, N]`` boolean array per mask slot."""
    per_clip = [masking.sample_pair(plan.masking, grid, r, multiblock=plan.multiblock(), ratios=plan.ratios)
                for r in rng.spawn(batch)]
    return [np.stack([masks[j].masked for masks in per_clip]) for j in range(len(per_clip[0]))]


def _loss_over_masks(enc, head, cfg, tokens, targets, masks, narrow_fn,
                     loss_fn=T.l1_loss_masked) -> tuple[T.Tensor, int, int]:
    """Average of per-mask losses; also returns encoder and head token counts."""
    b, n, _ = tokens.shape
    total = None
    enc_tokens = head_tokens = 0
    d = targets.shape[-1]
    flat_targets = T.Tensor(targets.reshape(b * n, d))
    for mk in masks:
        vb = VisibleBatch.from_masks(mk, cfg.grid)
        ctx = M.encode_visible(enc, cfg, tokens, np.arange(b), vb)
        out = narrow_fn(head, cfg, ctx, vb)
        loss = loss_fn(out.reshape(b * n, d), flat_targets, mk.reshape(-1))
        total = loss if total is None else total + loss
        enc_tokens += int(vb.counts.sum())
        head_tokens += b * n
    return total * (1.0 / len(masks)), enc_tokens, head_tokens


class Trainer:
    """Shared state and step loop; ``run`` executes a whole plan."""

    def __init__(self, plan: TrainPlan, cfg: ModelConfig, optim: OptimConfig, dataset: Dataset,
                 out_dir: str | os.PathLike | None = None, extra_echo: dict | None = None):
        plan.validate()
        cfg.validate()
        optim.validate()
        if optim.total_steps != plan.steps:
            raise ConfigError(f"optimiser schedule covers {optim.total_steps} steps, plan has {plan.steps}")
        if dataset.spec.grid != cfg.grid or tuple(dataset.spec.tubelet) != cfg.tubelet:
            raise ConfigError(f"dataset grid {dataset.spec.grid} / tubelet {dataset.spec.tubelet} "
                              f"vs model {cfg.grid} / {cfg.tubelet}")
        if dataset.spec.channels != cfg.channels:
            raise ConfigError("dataset and model disagree on channel count")
        self.plan, self.cfg, self.optim, self.dataset = plan, cfg, optim, dataset
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.extra_echo = extra_echo or {}
        self.tokens = load_tokens(dataset, cfg)
        init_rng = substream(plan.seed, "init")
        self.encoder = M.init_encoder(cfg, init_rng)
        self.teacher: ParamSet | None = None
        self.teacher_sha = None
        self.teacher_cfg = cfg
        if plan.stage == "stage1":
            self.head = M.init_decoder(cfg, init_rng)
            self.head_name, self.narrow = "decoder", M.decoder_forward
            self.loss_fn = PIXEL_LOSSES[plan.pixel_loss]
            self.pixel_targets = normalize_tubelets(self.tokens, cfg.eps)
        else:
            self.head = M.init_predictor(cfg, init_rng)
            self.head_name, self.narrow = "predictor", M.predictor_forward
            self.loss_fn = T.l1_loss_masked
            if plan.stage == "stage2":
                self._load_teacher()
            else:
                if cfg.target_width != cfg.width:
                    raise ConfigError("EMA baseline teacher is a copy of the student: teacher_width must equal width")
                self.teacher = self.encoder.copy(requires_grad=plan.check_invariants)
        self.trainable = self.encoder.trainable() + self.head.trainable()
        self.decay = decay_mask(self.trainable)
        self.state = AdamState.zeros(self.trainable)
        self.n_enc = self.encoder.num_parameters()
        self.n_head = self.head.num_parameters()
        self.n_teacher = self.teacher.num_parameters() if self.teacher is not None else 0

    # -- setup ------------------------------------------------------------
    def _load_teacher(self) -> None:
        path = Path(self.plan.teacher)
        if not path.is_file():
            raise ConfigError(f"teacher checkpoint {path} not readable")
        echo, groups = load_params(path, None, ("encoder",))
        stored = ModelConfig.from_dict(echo["model"])
        if stored.grid != self.cfg.grid or stored.tubelet != self.cfg.tubelet:
            raise ConfigError(f"teacher grid {stored.grid} / tubelet {stored.tubelet} "
                              f"vs student {self.cfg.grid} / {self.cfg.tubelet}")
        if stored.width != self.cfg.target_width:
            raise ConfigError(f"teacher width {stored.width} != predictor target width {self.cfg.target_width}")
        self.teacher_cfg = stored
        self.teacher = groups["encoder"].freeze()
        self.teacher_sha = sha256_file(path)

    # -- echo / persistence ------------------------------------------------
    def echo(self, step: int) -> dict:
        out = {
            "stage": self.plan.stage,
            "step": step,
            "model": self.cfg.to_dict(),
            "optim": self.optim.to_dict(),
            "plan": self.plan.to_dict(),
            "dataset": self.dataset.spec.to_dict(),
        }
        if self.teacher_sha:
            out["teacher_sha256"] = self.teacher_sha
        out.update(self.extra_echo)
        return out

    def groups(self) -> dict[str, ParamSet]:
        g = {"encoder": self.encoder, self.head_name: self.head}
        if self.plan.stage == "ema_baseline":
            g["teacher"] = self.teacher
        return g

    def save(self, step: int) -> Path | None:
        if self.out_dir is None:
            return None
        path = self.out_dir / f"step_{step:06d}.ckpt"
        save_checkpoint(path, flatten(self.groups()), self.echo(step))
        return path

    # -- the step ----------------------------------------------------------
    def targets(self, batch_tokens: np.ndarray, idx: np.ndarray) -> np.ndarray:
        if self.plan.stage == "stage1":
            return self.pixel_targets[idx]
        if self.plan.stage == "ema_baseline" and self.plan.check_invariants:
            # run the teacher on the tape so the stop-gradient is what keeps it clean
            out = M.encode_full(self.teacher, self.cfg, batch_tokens)
            return T.detach(out).data
        with T.no_grad():
            return M.encode_full(self.teacher, self.teacher_cfg, batch_tokens).data

    def step(self, k: int, batch_rng: np.random.Generator, mask_rng: np.random.Generator) -> dict:
        plan, cfg = self.plan, self.cfg
        idx = np.sort(batch_rng.choice(self.tokens.shape[0], size=min(plan.batch_size, self.tokens.shape[0]),
                                       replace=False))
        batch = self.tokens[idx]
        targets = self.targets(batch, idx)
        masks = _masks_for_batch(plan, cfg.grid, idx.size, mask_rng)
        loss, enc_tok, head_tok = _loss_over_masks(self.encoder, self.head, cfg, batch, targets, masks,
                                                   self.narrow, self.loss_fn)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericError(f"non-finite loss {value} at step {k + 1}")
        for p in self.trainable:
            p.grad = None
        T.backward(loss)
        if self.teacher is not None and plan.check_invariants:
            leaked = [n for n, t in self.teacher.items() if t.grad is not None and np.any(t.grad != 0)]
            if leaked:
                raise ContractError(f"teacher received gradient in {leaked[0]} at step {k + 1}")
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.trainable]
        grads, norm = clip_gradients(grads, self.optim.grad_clip)
        lr, wd = lr_at(k, self.optim), wd_at(k, self.optim)
        adamw_step(self.trainable, grads, self.state, lr, wd, self.optim, self.decay)
        if plan.stage == "ema_baseline":
            ema_update(self.teacher, self.encoder, plan.ema().momentum(k + 1))
        flops = (train_flops(self.n_enc, enc_tok) + train_flops(self.n_head, head_tok)
                 + (teacher_forward_flops(self.n_teacher, idx.size * cfg.num_tokens)
                    if plan.stage != "stage1" else 0.0))
        return {"loss": value, "lr": lr, "wd": wd, "grad_norm": norm, "flops": flops}

    def run(self, log_every: int = 0) -> TrainResult:
        plan = self.plan
        batch_rng = substream(plan.seed, "batch")
        mask_rng = substream(plan.seed, "mask")
        save_at = set(checkpoint_steps(plan.steps, plan.cadence))
        records, paths = [], []
        flops_cum = 0.0
        t0 = time.perf_counter()
        rec_fh = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            rec_fh = open(self.out_dir / "records.jsonl", "w")
        teacher_before = ({k: v.data.copy() for k, v in self.teacher.items()}
                          if self.teacher is not None and plan.stage == "stage2" and plan.check_invariants
                          else None)
        try:
            for k in range(plan.steps):
                out = self.step(k, batch_rng, mask_rng)
                flops_cum += out["flops"]
                rec = {"step": k + 1, "loss": out["loss"], "lr": out["lr"], "wd": out["wd"],
                       "grad_norm": out["grad_norm"], "flops_cum": flops_cum,
                       "wall_time": round(time.perf_counter() - t0, 3)}
                records.append(rec)
                if rec_fh is not None:
                    rec_fh.write(json.dumps(rec) + "\n")
                    rec_fh.flush()
                if teacher_before is not None:
                    for name, arr in teacher_before.items():
                        if not np.array_equal(arr, self.teacher[name].data):
                            raise ContractError(f"frozen teacher tensor {name} changed at step {k + 1}")
                if log_every and (k + 1) % log_every == 0:
                    log.info("%s step %d loss %.4f lr %.2e", plan.stage, k + 1, out["loss"], out["lr"])
                if k + 1 in save_at:
                    p = self.save(k + 1)
                    if p is not None:
                        paths.append(p)
        finally:
            if rec_fh is not None:
                rec_fh.close()
        return TrainResult(self.groups(), records, paths)


def train(plan: TrainPlan, cfg: ModelConfig, optim: OptimConfig, dataset: Dataset,
          out_dir=None, log_every: int = 0) -> TrainResult:
    return Trainer(plan, cfg, optim, dataset, out_dir).run(log_every)


def train_stage1(plan: TrainPlan, cfg: ModelConfig, optim: OptimConfig, dataset: Dataset,
                 out_dir=None, log_every: int = 0) -> TrainResult:
    return train(plan.replace(stage="stage1"), cfg, optim, dataset, out_dir, log_every)


def train_stage2(plan: TrainPlan, cfg: ModelConfig, optim: OptimConfig, dataset: Dataset,
                 out_dir=None, log_every: int = 0) -> TrainResult:
    return train(plan.replace(stage="stage2"), cfg, optim, dataset, out_dir, log_every)


def train_ema_baseline(plan: TrainPlan, cfg: ModelConfig, optim: OptimConfig, dataset: Dataset,
                       out_dir=None, log_every: int = 0) -> TrainResult:
    return train(plan.replace(stage="ema_baseline"), cfg, optim, dataset, out_dir, log_every)


def read_records(path: str | os.PathLike) -> list[dict]:
    """Parse a RunRecord stream, checking steps strictly increase."""
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            missing = [f for f in RECORD_FIELDS if f not in rec]
            if missing:
                raise ContractError(f"record lacks {missing}")
            if out and rec["step"] <= out[-1]["step"]:
                raise ContractError(f"steps not increasing at {rec['step']}")
            out.append(rec)
    return out
