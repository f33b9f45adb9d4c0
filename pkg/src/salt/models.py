"""Video transformer components built on :mod:`salt.tensor`.

Parameters live in flat ``ParamSet`` dictionaries keyed by dotted names
(``blocks.0.attn.qkv.weight``).  All forward functions take batched inputs:
``[B, L, width]`` latents and ``[B, L, 3]`` integer (t, h, w) positions.
Attention uses 3D rotary embeddings: each head's channels are split into three
equal groups rotated by the t, h and w coordinates respectively.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import grid_positions
from .errors import ConfigError, ContractError, DimensionError, NumericError
from .tensor import Tensor

INIT_STD = 0.02
# grey-level ImageNet statistics, the input normalisation VideoMAE applies
PIXEL_MEAN = 0.45
PIXEL_STD = 0.225


@dataclass(frozen=True)
class ModelConfig:
    name: str = "tiny-L"
    width: int = 72
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    mlp_hidden: int | None = None
    tubelet: tuple[int, int, int] = (2, 4, 4)
    channels: int = 1
    grid: tuple[int, int, int] = (8, 8, 8)
    pred_width: int = 48
    pred_depth: int = 3
    pred_heads: int = 4
    teacher_width: int | None = None
    dec_width: int = 48
    dec_depth: int = 2
    dec_heads: int = 4
    eps: float = 1e-6
    rope_base: float = 10000.0

    def __post_init__(self):
        for name in ("tubelet", "grid"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))

    # -- derived sizes -----------------------------------------------------
    @property
    def hidden(self) -> int:
        return self.mlp_hidden or int(round(self.width * self.mlp_ratio))

    @property
    def token_dim(self) -> int:
        tt, ph, pw = self.tubelet
        return tt * ph * pw * self.channels

    @property
    def num_tokens(self) -> int:
        t, h, w = self.grid
        return t * h * w

    @property
    def target_width(self) -> int:
        return self.teacher_width or self.width

    def validate(self, rope: bool = True) -> None:
        """Check every invariant; ``rope=False`` skips the head-size rule (counting only)."""
        if self.width <= 0 or self.depth < 0 or self.heads <= 0:
            raise ConfigError(f"{self.name}: width/depth/heads must be positive")
        pairs = [("encoder", self.width, self.heads), ("predictor", self.pred_width, self.pred_heads),
                 ("decoder", self.dec_width, self.dec_heads)]
        for what, w, h in pairs:
            if w <= 0 or h <= 0:
                raise ConfigError(f"{self.name}: {what} width/heads must be positive")
            if w % h:
                raise ConfigError(f"{self.name}: {what} width {w} not divisible by {h} heads")
            if rope and (w // h) % 6:
                raise ConfigError(
                    f"{self.name}: {what} head dim {w // h} must be divisible by 6 for 3-axis rotary pairs"
                )
        if min(self.tubelet) <= 0 or min(self.grid) <= 0 or self.channels <= 0:
            raise ConfigError(f"{self.name}: tubelet, grid and channels must be positive")

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        return cls(**d)


# Paper-scale encoders (count-only; head dims are not multiples of 6) and
# desk-scale configs that actually get instantiated.
_PAPER = dict(tubelet=(2, 16, 16), channels=3, grid=(8, 14, 14),
              pred_width=384, pred_depth=12, pred_heads=16, dec_width=384, dec_depth=4, dec_heads=16)
REGISTRY: dict[str, ModelConfig] = {
    "vit-b": ModelConfig("vit-b", 768, 12, 12, **_PAPER),
    "vit-l": ModelConfig("vit-l", 1024, 24, 16, **_PAPER),
    "vit-h": ModelConfig("vit-h", 1280, 32, 16, teacher_width=1024, **_PAPER),
    "vit-g": ModelConfig("vit-g", 1408, 40, 16, mlp_hidden=6144, teacher_width=1024, **_PAPER),
    "vit-G": ModelConfig("vit-G", 1664, 48, 16, mlp_hidden=8192, teacher_width=1024, **_PAPER),
    "tiny-L": ModelConfig("tiny-L", 72, 4, 4),
    "tiny-H": ModelConfig("tiny-H", 96, 6, 4),
}


def get_config(name: str, **overrides) -> ModelConfig:
    try:
        cfg = REGISTRY[name]
    except KeyError:
        raise ConfigError(f"unknown model {name!r}; known: {sorted(REGISTRY)}") from None
    return cfg.replace(**overrides) if overrides else cfg


# ---------------------------------------------------------------------------
# parameter collections
# ---------------------------------------------------------------------------

class ParamSet(dict):
    """Named tensors.  A frozen set holds read-only arrays and never tracks gradients."""

    def __init__(self, *args, frozen: bool = False, **kw):
        super().__init__(*args, **kw)
        self.frozen = False
        if frozen:
            self.freeze()

    def freeze(self) -> "ParamSet":
        for t in self.values():
            t.requires_grad = False
            t.grad = None
            t.data.flags.writeable = False
        self.frozen = True
        return self

    def trainable(self) -> list[Tensor]:
        if self.frozen:
            raise ContractError("frozen parameters cannot take part in optimisation")
        return list(self.values())

    def copy(self, frozen: bool = False, requires_grad: bool | None = None) -> "ParamSet":
        rg = (not frozen) if requires_grad is None else requires_grad
        out = ParamSet({k: Tensor(v.data.copy(), requires_grad=rg, name=k) for k, v in self.items()})
        if frozen:
            out.freeze()
        return out

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.values()))

    def prefixed(self, prefix: str) -> "ParamSet":
        return ParamSet({prefix + k: v for k, v in self.items()})

    def sub(self, prefix: str) -> "ParamSet":
        out = ParamSet({k[len(prefix):]: v for k, v in self.items() if k.startswith(prefix)})
        out.frozen = self.frozen
        return out

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def _new(params: ParamSet, name: str, arr: np.ndarray) -> None:
    params[name] = Tensor(arr, requires_grad=True, name=name)


def _init_linear(params, rng, name, fan_in, fan_out, std=INIT_STD, bias=True):
    w = trunc_normal(rng, (fan_in, fan_out), std)
    _new(params, name + ".weight", w)
    if bias:
        _new(params, name + ".bias", np.zeros(fan_out))


def _init_norm(params, name, d):
    _new(params, name + ".gain", np.ones(d))
    _new(params, name + ".bias", np.zeros(d))


def _init_blocks(params, rng, prefix, depth, width, hidden):
    for i in range(depth):
        p = f"{prefix}blocks.{i}."
        _init_norm(params, p + "norm1", width)
        _init_linear(params, rng, p + "attn.qkv", width, 3 * width)
        # residual outputs shrink with depth, as in the V-JEPA reference init
        out_std = INIT_STD / np.sqrt(2.0 * (i + 1))
        _init_linear(params, rng, p + "attn.proj", width, width, out_std)
        _init_norm(params, p + "norm2", width)
        _init_linear(params, rng, p + "mlp.fc1", width, hidden)
        _init_linear(params, rng, p + "mlp.fc2", hidden, width, out_std)


def init_encoder(cfg: ModelConfig, rng: np.random.Generator) -> ParamSet:
    cfg.validate()
    params = ParamSet()
    # 1/sqrt(fan_in) keeps unit-scale embeddings for small desk tubelets and is
    # ~0.02 at the paper's 2x16x16x3 tubelet
    _init_linear(params, rng, "patch_embed", cfg.token_dim, cfg.width, 1.0 / np.sqrt(cfg.token_dim))
    _init_blocks(params, rng, "", cfg.depth, cfg.width, cfg.hidden)
    _init_norm(params, "norm", cfg.width)
    return params


def _init_narrow(rng, in_dim, width, depth, out_dim, ratio) -> ParamSet:
    params = ParamSet()
    _init_linear(params, rng, "embed", in_dim, width)
    _new(params, "mask_token", trunc_normal(rng, (width,)))
    _init_blocks(params, rng, "", depth, width, int(round(width * ratio)))
    _init_norm(params, "norm", width)
    _init_linear(params, rng, "proj", width, out_dim)
    return params


def init_predictor(cfg: ModelConfig, rng: np.random.Generator) -> ParamSet:
    """Narrow transformer mapping student latents to teacher-width predictions."""
    cfg.validate()
    return _init_narrow(rng, cfg.width, cfg.pred_width, cfg.pred_depth, cfg.target_width, cfg.mlp_ratio)


def init_decoder(cfg: ModelConfig, rng: np.random.Generator) -> ParamSet:
    """Pixel decoder: same layout as the predictor, output = tubelet voxel count."""
    cfg.validate()
    return _init_narrow(rng, cfg.width, cfg.dec_width, cfg.dec_depth, cfg.token_dim, cfg.mlp_ratio)


def init_probe(width: int, heads: int, num_classes: int, rng: np.random.Generator,
               blocks: int = 3, mlp_ratio: float = 4.0) -> ParamSet:
    if num_classes < 2:
        raise ConfigError("a probe needs at least two classes")
    if width % heads:
        raise ConfigError(f"probe width {width} not divisible by {heads} heads")
    hidden = int(round(width * mlp_ratio))
    params = ParamSet()
    _init_blocks(params, rng, "", blocks, width, hidden)
    _new(params, "query", trunc_normal(rng, (width,)))
    _init_norm(params, "cross.norm_kv", width)
    _init_linear(params, rng, "cross.q", width, width)
    _init_linear(params, rng, "cross.kv", width, 2 * width)
    _init_linear(params, rng, "cross.proj", width, width)
    _init_norm(params, "cross.norm2", width)
    _init_linear(params, rng, "cross.mlp.fc1", width, hidden)
    _init_linear(params, rng, "cross.mlp.fc2", hidden, width)
    _init_norm(params, "head_norm", width)
    _init_linear(params, rng, "head", width, num_classes)
    return params


# ---------------------------------------------------------------------------
# parameter counting (closed form, independent of init)
# ---------------------------------------------------------------------------

def _block_count(width: int, hidden: int) -> int:
    attn = width * 3 * width + 3 * width + width * width + width
    mlp = width * hidden + hidden + hidden * width + width
    return attn + mlp + 4 * width


def parameter_breakdown(cfg: ModelConfig) -> dict[str, int]:
    cfg.validate(rope=False)
    enc = cfg.token_dim * cfg.width + cfg.width + cfg.depth * _block_count(cfg.width, cfg.hidden) + 2 * cfg.width

    def narrow(width, depth, out_dim):
        hidden = int(round(width * cfg.mlp_ratio))
        return (cfg.width * width + width + width + depth * _block_count(width, hidden)
                + 2 * width + width * out_dim + out_dim)

    return {
        "encoder": enc,
        "predictor": narrow(cfg.pred_width, cfg.pred_depth, cfg.target_width),
        "decoder": narrow(cfg.dec_width, cfg.dec_depth, cfg.token_dim),
    }


def parameter_count(cfg: ModelConfig, component: str = "encoder") -> int:
    """Exact learnable-scalar count, embedding included."""
    return parameter_breakdown(cfg)[component]


# ---------------------------------------------------------------------------
# rotary embeddings
# ---------------------------------------------------------------------------

def rope_angles(positions: np.ndarray, head_dim: int, base: float = 10000.0,
                dtype=None) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin per channel pair for integer (t, h, w) positions ``[..., L, 3]``.

    Pairs ``0 .. g/2-1`` follow t, the next ``g/2`` follow h, the last ``g/2``
    follow w, where ``g = head_dim / 3``.
    """
    if head_dim % 6:
        raise ConfigError(f"head dim {head_dim} cannot be split into three rotary groups")
    g = head_dim // 3
    inv_freq = base ** (-np.arange(0, g, 2, dtype=np.float64) / g)
    pos = np.asarray(positions, dtype=np.float64)
    if pos.shape[-1] != 3:
        raise DimensionError(f"positions must end in 3 coordinates, got {pos.shape}")
    ang = np.concatenate([pos[..., a:a + 1] * inv_freq for a in range(3)], axis=-1)
    dtype = dtype or T.default_dtype()
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def rope_rotate(x: Tensor, positions: np.ndarray, base: float = 10000.0) -> Tensor:
    """Rotate queries or keys ``[..., heads, L, d_h]`` by their grid positions.

    ``positions`` is ``[L, 3]`` or ``[B, L, 3]`` (the latter for ``x`` of shape
    ``[B, H, L, d_h]``).
    """
    cos, sin = rope_angles(positions, x.shape[-1], base, x.dtype)
    if cos.ndim == 3:  # batched positions: insert the head axis
        cos, sin = cos[:, None], sin[:, None]
    return T.rotate_pairs(x, cos, sin)


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------

def _lin(p: ParamSet, name: str, x: Tensor) -> Tensor:
    return T.linear(x, p[name + ".weight"], p.get(name + ".bias"))


def _ln(p: ParamSet, name: str, x: Tensor, eps: float) -> Tensor:
    return T.layer_norm(x, p[name + ".gain"], p[name + ".bias"], eps)


def _split_heads(x: Tensor, parts: int, heads: int) -> list[Tensor]:
    b, l, w = x.shape
    dh = w // (parts * heads)
    x = x.reshape(b, l, parts, heads, dh).transpose(2, 0, 3, 1, 4)
    return [T.slice_axis(x, 0, i, i + 1).reshape(b, heads, l, dh) for i in range(parts)]


def _merge_heads(x: Tensor) -> Tensor:
    b, h, l, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, l, h * dh)


def attention_block(p: ParamSet, prefix: str, x: Tensor, heads: int, rope, key_valid, eps: float) -> Tensor:
    """Pre-norm block: x + Attn(LN(x)), then x + MLP(LN(x))."""
    h = _ln(p, prefix + "norm1", x, eps)
    q, k, v = _split_heads(_lin(p, prefix + "attn.qkv", h), 3, heads)
    if rope is not None:
        cos, sin = rope
        q = T.rotate_pairs(q, cos, sin)
        k = T.rotate_pairs(k, cos, sin)
    a = _merge_heads(T.attention(q, k, v, key_valid))
    x = x + _lin(p, prefix + "attn.proj", a)
    h = _ln(p, prefix + "norm2", x, eps)
    h = _lin(p, prefix + "mlp.fc2", T.gelu(_lin(p, prefix + "mlp.fc1", h)))
    return x + h


def _rope_for(positions: np.ndarray, head_dim: int, base: float, dtype):
    cos, sin = rope_angles(positions, head_dim, base, dtype)
    return cos[:, None], sin[:, None]


def _stack(p: ParamSet, x: Tensor, depth: int, heads: int, positions, key_valid, eps, base) -> Tensor:
    b, l, w = x.shape
    positions = np.broadcast_to(np.asarray(positions), (b, l, 3))
    rope = _rope_for(positions, w // heads, base, x.dtype)
    for i in range(depth):
        x = attention_block(p, f"blocks.{i}.", x, heads, rope, key_valid, eps)
    return x


def _check(x: Tensor, what: str) -> Tensor:
    if not x.is_finite():
        bad = int((~np.isfinite(x.data)).sum())
        raise NumericError(f"{what}: {bad} non-finite activations (shape {x.shape})")
    return x


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tubelet_embed(params: ParamSet, tokens) -> Tensor:
    """Linear projection of flattened tubelets ``[..., p]`` to ``[..., width]``."""
    tokens = _as_tensor(tokens)
    w = params["patch_embed.weight"]
    if tokens.shape[-1] != w.shape[0]:
        raise DimensionError(f"token payload {tokens.shape[-1]} != embedding input {w.shape[0]}")
    dt = tokens.dtype.type
    x = (tokens.data - dt(PIXEL_MEAN)) * dt(1.0 / PIXEL_STD)
    return _lin(params, "patch_embed", Tensor(x))


def encoder_forward(params: ParamSet, cfg: ModelConfig, embedded: Tensor, positions: np.ndarray,
                    key_valid: np.ndarray | None = None) -> Tensor:
    """Encoder blocks plus final norm over ``[B, L, width]`` (or unbatched ``[L, width]``)."""
    squeeze = embedded.ndim == 2
    if squeeze:
        embedded = embedded.reshape(1, *embedded.shape)
        positions = np.asarray(positions)[None]
        key_valid = None if key_valid is None else np.asarray(key_valid)[None]
    if embedded.shape[1] < 1:
        raise ContractError("encoder needs at least one token")
    x = _stack(params, embedded, cfg.depth, cfg.heads, positions, key_valid, cfg.eps, cfg.rope_base)
    x = _check(_ln(params, "norm", x, cfg.eps), "encoder output")
    return x.reshape(*x.shape[1:]) if squeeze else x


def encode_full(params: ParamSet, cfg: ModelConfig, tokens: np.ndarray) -> Tensor:
    """Encode complete token grids ``[B, N, p]`` (teacher targets, probing)."""
    b, n, _ = tokens.shape
    grid = _grid_for(cfg, n)
    pos = grid_positions(grid)
    return encoder_forward(params, cfg, tubelet_embed(params, tokens), np.broadcast_to(pos, (b, n, 3)))


def _grid_for(cfg: ModelConfig, n: int) -> tuple[int, int, int]:
    if n == cfg.num_tokens:
        return cfg.grid
    t, h, w = cfg.grid
    if n % (h * w):
        raise DimensionError(f"{n} tokens do not tile the {h}x{w} spatial grid")
    return (n // (h * w), h, w)


@dataclass
class VisibleBatch:
    """Padded batch of visible-token index lists."""

    index: np.ndarray  # [B, L] flat grid index per slot (padding repeats a valid entry)
    valid: np.ndarray  # [B, L] bool
    grid: tuple[int, int, int]
    counts: np.ndarray = field(default=None)

    @classmethod
    def from_masks(cls, masked: np.ndarray, grid) -> "VisibleBatch":
        """``masked`` is bool ``[B, N]`` (True = hidden)."""
        vis = ~np.asarray(masked, dtype=bool)
        counts = vis.sum(axis=1)
        if (counts == 0).any():
            raise ContractError("a sample has no visible tokens")
        L = int(counts.max())
        index = np.zeros((vis.shape[0], L), dtype=np.int64)
        valid = np.zeros((vis.shape[0], L), dtype=bool)
        for b in range(vis.shape[0]):
            idx = np.flatnonzero(vis[b])
            index[b, : idx.size] = idx
            index[b, idx.size:] = idx[0]
            valid[b, : idx.size] = True
        return cls(index, valid, tuple(grid), counts)


def encode_visible(params: ParamSet, cfg: ModelConfig, tokens: np.ndarray, source: np.ndarray,
                   vb: VisibleBatch) -> Tensor:
    """Encode the visible tokens of several views.

    ``tokens`` is ``[B_clips, N, p]``; view ``i`` reads clip ``source[i]``.
    Returns ``[B_views, L, width]``; padded slots are garbage and must be ignored.
    """
    bc, n, p = tokens.shape
    emb = tubelet_embed(params, tokens.reshape(bc * n, p))
    rows = vb.index + (np.asarray(source) * n)[:, None]
    x = T.gather_rows(emb, rows)
    pos = grid_positions(vb.grid)[vb.index]
    return encoder_forward(params, cfg, x, pos, vb.valid)


def _narrow_forward(params: ParamSet, depth: int, heads: int, ctx: Tensor, vb: VisibleBatch,
                    eps: float, base: float, what: str) -> Tensor:
    """Shared body of predictor and decoder: fill the grid, run blocks, project."""
    b, L, _ = ctx.shape
    n = int(np.prod(vb.grid))
    emb = _lin(params, "embed", ctx)
    width = emb.shape[-1]
    table = T.concat([emb.reshape(b * L, width), params["mask_token"].reshape(1, width)], axis=0)
    index = np.full((b, n), b * L, dtype=np.int64)
    for i in range(b):
        k = int(vb.counts[i])
        index[i, vb.index[i, :k]] = i * L + np.arange(k)
    x = T.gather_rows(table, index)
    pos = grid_positions(vb.grid)
    x = _stack(params, x, depth, heads, np.broadcast_to(pos, (b, n, 3)), None, eps, base)
    x = _ln(params, "norm", x, eps)
    return _check(_lin(params, "proj", x), what)


def predictor_forward(params: ParamSet, cfg: ModelConfig, context: Tensor, vb: VisibleBatch) -> Tensor:
    """Predict teacher latents at every grid position ``[B, N, teacher_width]``.

    Context latents are projected into the grid at their own positions; every
    other position holds the shared mask token.  Callers select the target rows.
    """
    return _narrow_forward(params, cfg.pred_depth, cfg.pred_heads, context, vb, cfg.eps,
                           cfg.rope_base, "predictor output")


def decoder_forward(params: ParamSet, cfg: ModelConfig, context: Tensor, vb: VisibleBatch) -> Tensor:
    """Normalised-pixel predictions ``[B, N, token_dim]`` for every grid position."""
    return _narrow_forward(params, cfg.dec_depth, cfg.dec_heads, context, vb, cfg.eps,
                           cfg.rope_base, "decoder output")


def attentive_probe_forward(params: ParamSet, latents, heads: int, eps: float = 1e-6) -> Tensor:
    """Self-attention blocks, learnable-query cross-attention pooling, linear head.

    The probe carries no positional encoding; ``latents`` are ``[B, N, width]``
    and should already be detached from any backbone.
    """
    x = _as_tensor(latents)
    if x.requires_grad:
        x = T.detach(x)
    b, n, w = x.shape
    depth = sum(1 for k in params if k.startswith("blocks.") and k.endswith(".norm1.gain"))
    for i in range(depth):
        x = attention_block(params, f"blocks.{i}.", x, heads, None, None, eps)
    kv = _lin(params, "cross.kv", _ln(params, "cross.norm_kv", x, eps))
    k, v = _split_heads(kv, 2, heads)
    query = params["query"]
    qrow = T.gather_rows(query.reshape(1, w), np.zeros((b, 1), dtype=np.int64))  # [B, 1, w]
    (q,) = _split_heads(_lin(params, "cross.q", qrow), 1, heads)
    # one query row against N keys: composed from primitives, the fused kernel needs square shapes
    dh = w // heads
    logits = T.scale(T.matmul(q, k.transpose(0, 1, 3, 2)), 1.0 / np.sqrt(dh))
    a = T.matmul(T.softmax(logits, axis=-1), v)  # [B, H, 1, dh]
    pooled = qrow + _lin(params, "cross.proj", _merge_heads(a))
    h = _ln(params, "cross.norm2", pooled, eps)
    pooled = pooled + _lin(params, "cross.mlp.fc2", T.gelu(_lin(params, "cross.mlp.fc1", h)))
    pooled = _ln(params, "head_norm", pooled, eps).reshape(b, w)
    logits = _lin(params, "head", pooled)
    return logits
