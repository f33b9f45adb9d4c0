"""Spatio-temporal token mask samplers.

A mask marks target tokens (``True`` = hidden, predicted) on a (T', H', W')
token grid flattened in (t, h, w) scan order.  Every sampler returns masks
with at least one visible and one hidden token.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateError, DimensionError

Grid = tuple[int, int, int]


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass
class MaskSpec:
    grid_dims: Grid
    masked: np.ndarray  # bool [N]
    strategy: str

    @property
    def num_tokens(self) -> int:
        return self.masked.size

    @property
    def achieved_ratio(self) -> float:
        return float(self.masked.sum()) / self.masked.size

    @property
    def visible(self) -> np.ndarray:
        return ~self.masked

    def as_grid(self) -> np.ndarray:
        return self.masked.reshape(self.grid_dims)


@dataclass
class MultiBlockParams:
    short_scale: float = 0.15
    long_scale: float = 0.7
    temporal_scale: float = 1.0
    aspect_ratio_range: tuple[float, float] = (0.75, 1.5)
    short_block_count: int = 8
    long_block_count: int = 2

    def validate(self) -> None:
        for name in ("short_scale", "long_scale", "temporal_scale"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ConfigError(f"{name} must lie in (0, 1], got {v}")
        lo, hi = self.aspect_ratio_range
        if not 0.0 < lo <= hi:
            raise ConfigError(f"aspect ratio range must be positive and ordered, got {(lo, hi)}")
        if self.short_block_count < 1 or self.long_block_count < 1:
            raise ConfigError("block counts must be >= 1")


@dataclass
class MaskedView:
    """Context/target decomposition of one token grid under one mask."""

    x: np.ndarray  # visible tokens [Nv, p]
    y: np.ndarray  # hidden tokens [Nm, p]
    x_index: np.ndarray  # flat grid indices of visible tokens
    y_index: np.ndarray  # flat grid indices of hidden tokens (delta y)
    x_positions: np.ndarray  # [Nv, 3]
    y_positions: np.ndarray  # [Nm, 3]


def _fix_degenerate(masked: np.ndarray) -> np.ndarray:
    # deterministic repair: first token becomes visible / hidden as needed
    if masked.all():
        masked[0] = False
    elif not masked.any():
        masked[0] = True
    return masked


def block_size(grid: Grid, scale: float, temporal_scale: float, aspect: float) -> tuple[int, int, int]:
    t, h, w = grid
    keep = int(h * w * scale)
    bh = min(h, max(1, round_half_up(math.sqrt(keep * aspect))))
    bw = min(w, max(1, round_half_up(math.sqrt(keep / aspect))))
    bt = max(1, int(t * temporal_scale))
    return bt, bh, bw


def _block_union(grid: Grid, count: int, scale: float, params: MultiBlockParams,
                 rng: np.random.Generator) -> np.ndarray:
    t, h, w = grid
    aspect = rng.uniform(*params.aspect_ratio_range)
    bt, bh, bw = block_size(grid, scale, params.temporal_scale, aspect)
    mask = np.zeros(grid, dtype=bool)
    for _ in range(count):
        t0 = rng.integers(0, t - bt + 1)
        h0 = rng.integers(0, h - bh + 1)
        w0 = rng.integers(0, w - bw + 1)
        mask[t0:t0 + bt, h0:h0 + bh, w0:w0 + bw] = True
    return mask.reshape(-1)


def _check_block_fits(grid: Grid, scale: float, params: MultiBlockParams) -> None:
    t, h, w = grid
    keep = int(h * w * scale)
    if keep < 1:
        raise ConfigError(f"grid {grid} too small for block scale {scale}")
    if keep >= h * w and max(1, int(t * params.temporal_scale)) >= t:
        raise DegenerateError(
            f"a block at scale {scale} spans the whole grid {grid}: no visible context"
        )


def sample_multiblock(grid: Grid, params: MultiBlockParams | None = None,
                      rng: np.random.Generator | None = None) -> tuple[MaskSpec, MaskSpec]:
    """Short-range and long-range multi-block masks for one clip.

    Each mask is the union of blocks sharing one sampled size; blocks span
    ``temporal_scale`` of the temporal slots and may overlap.
    """
    params = params or MultiBlockParams()
    params.validate()
    rng = rng if rng is not None else np.random.default_rng()
    _check_block_fits(grid, params.short_scale, params)
    _check_block_fits(grid, params.long_scale, params)
    short_rng, long_rng = rng.spawn(2)
    short = _block_union(grid, params.short_block_count, params.short_scale, params, short_rng)
    long = _block_union(grid, params.long_block_count, params.long_scale, params, long_rng)
    return (MaskSpec(grid, _fix_degenerate(short), "multiblock-short"),
            MaskSpec(grid, _fix_degenerate(long), "multiblock-long"))


def combined_ratio(masks) -> float:
    """Fraction of tokens that are a prediction target under at least one mask."""
    union = np.zeros_like(masks[0].masked)
    for m in masks:
        union |= m.masked
    return float(union.mean())


def _check_ratio(ratio: float) -> None:
    if not 0.0 < ratio < 1.0:
        raise DegenerateError(f"mask ratio must lie strictly in (0, 1), got {ratio}")


def sample_random_tube(grid: Grid, ratio: float, rng: np.random.Generator | None = None) -> MaskSpec:
    """Mask round(ratio * H' * W') spatial columns across every temporal slot."""
    _check_ratio(ratio)
    rng = rng if rng is not None else np.random.default_rng()
    t, h, w = grid
    count = round_half_up(ratio * h * w)
    if count <= 0 or count >= h * w:
        raise DegenerateError(f"ratio {ratio} on a {h}x{w} grid leaves no context or no targets")
    cols = np.zeros(h * w, dtype=bool)
    cols[rng.permutation(h * w)[:count]] = True
    masked = np.broadcast_to(cols, (t, h * w)).reshape(-1).copy()
    return MaskSpec(grid, masked, "random-tube")


def sample_multi_random_tube(grid: Grid, ratios: tuple[float, float] = (0.9, 0.9),
                             rng: np.random.Generator | None = None) -> tuple[MaskSpec, MaskSpec]:
    rng = rng if rng is not None else np.random.default_rng()
    for r in ratios:
        _check_ratio(r)
    a, b = rng.spawn(2)
    return sample_random_tube(grid, ratios[0], a), sample_random_tube(grid, ratios[1], b)


def sample_causal(grid: Grid, ratio: float, rng: np.random.Generator | None = None) -> MaskSpec:
    """Hide the last round(ratio * T') temporal slots; the visible part is a prefix."""
    t, h, w = grid
    if ratio >= 1.0 or ratio <= 0.0:
        raise DegenerateError(f"causal ratio must lie in (0, 1), got {ratio}")
    slots = round_half_up(ratio * t)
    if slots <= 0 or slots >= t:
        raise DegenerateError(f"causal ratio {ratio} with T'={t} leaves no context or no targets")
    masked = np.zeros(grid, dtype=bool)
    masked[t - slots:] = True
    return MaskSpec(grid, masked.reshape(-1), "causal")


STRATEGIES = ("multiblock", "random_tube", "multi_random_tube", "causal")


def sample_pair(strategy: str, grid: Grid, rng: np.random.Generator, *,
                multiblock: MultiBlockParams | None = None,
                ratios: tuple[float, float] = (0.9, 0.9)) -> tuple[MaskSpec, ...]:
    """Masks used for one clip in one training step (two, or one for ``random_tube``)."""
    if strategy == "multiblock":
        return sample_multiblock(grid, multiblock, rng)
    if strategy == "multi_random_tube":
        return sample_multi_random_tube(grid, ratios, rng)
    if strategy == "random_tube":
        return (sample_random_tube(grid, ratios[0], rng),)
    if strategy == "causal":
        a, b = rng.spawn(2)
        return sample_causal(grid, ratios[0], a), sample_causal(grid, ratios[1], b)
    raise ConfigError(f"unknown masking strategy {strategy!r}; expected one of {STRATEGIES}")


def split_view(tokens, positions: np.ndarray | None, mask: MaskSpec) -> MaskedView:
    """Partition a token grid into visible context and hidden targets.

    ``tokens`` may be a :class:`~salt.data.TokenGrid` or an ``[N, p]`` array.
    """
    if hasattr(tokens, "tokens"):
        if tuple(tokens.grid_dims) != tuple(mask.grid_dims):
            raise DimensionError(f"mask grid {mask.grid_dims} vs token grid {tokens.grid_dims}")
        positions = tokens.positions
        tokens = tokens.tokens
    if tokens.shape[0] != mask.num_tokens:
        raise DimensionError(f"{tokens.shape[0]} tokens vs mask over {mask.num_tokens}")
    if mask.masked.all():
        raise DegenerateError("mask leaves no visible context")
    if not mask.masked.any():
        raise DegenerateError("mask hides no targets")
    if positions is None:
        from .data import grid_positions

        positions = grid_positions(mask.grid_dims)
    xi = np.flatnonzero(~mask.masked)
    yi = np.flatnonzero(mask.masked)
    return MaskedView(tokens[xi], tokens[yi], xi, yi, positions[xi], positions[yi])


def reassemble(view: MaskedView) -> np.ndarray:
    n = view.x_index.size + view.y_index.size
    out = np.empty((n,) + view.x.shape[1:], dtype=view.x.dtype)
    out[view.x_index] = view.x
    out[view.y_index] = view.y
    return out


def mask_stats(strategy: str, grid: Grid, samples: int, seed: int, *,
               multiblock: MultiBlockParams | None = None,
               ratios: tuple[float, float] = (0.9, 0.9)) -> dict:
    """Achieved-ratio statistics and per-position masking frequency."""
    root = np.random.default_rng(seed)
    per_mask: list[list[float]] = []
    combined = []
    freq = np.zeros(int(np.prod(grid)))
    for rng in root.spawn(samples):
        masks = sample_pair(strategy, grid, rng, multiblock=multiblock, ratios=ratios)
        if not per_mask:
            per_mask = [[] for _ in masks]
        for i, m in enumerate(masks):
            per_mask[i].append(m.achieved_ratio)
            freq += m.masked
        combined.append(combined_ratio(masks))
    freq /= samples * len(per_mask)
    return {
        "strategy": strategy,
        "grid": list(grid),
        "samples": samples,
        "combined_mean": float(np.mean(combined)),
        "combined_std": float(np.std(combined)),
        "per_mask_mean": [float(np.mean(r)) for r in per_mask],
        "per_mask_std": [float(np.std(r)) for r in per_mask],
        "frequency": freq.reshape(grid),
    }
