"""Vision-LSTM backbone: patch embedding, alternating mLSTM blocks, pooling and head."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, fields, replace
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, ViLError
from .mlstm import mlstm
from .tensor import Tensor
from .traversal import (RB, RF, BlockDesign, Direction, TraversalPath, apply_permutation, assign_directions,
                        flip_sequence, grid_permutation, inverse_permutation)

LN_EPS = 1e-6


class Pooling(str, enum.Enum):
    AVG = "AVG"
    MIDDLE_PATCH = "MiddlePatch"
    MIDDLE_CLS = "MiddleCLS"
    BILATERAL_AVG = "BilateralAvg"
    BILATERAL_CONCAT = "BilateralConcat"


class ConvKind(str, enum.Enum):
    CAUSAL_1D = "Causal1D"
    CONV_2D = "Conv2D3x3"


@dataclass(frozen=True)
class ViLConfig:
    image_size: int = 224
    patch_size: int = 16
    patch_stride: int | None = None
    dim: int = 192
    depth: int = 24
    expansion: int = 2
    qk_dim_ratio: float = 0.5
    heads: int = 4
    block_design: BlockDesign = field(default_factory=lambda: BlockDesign.from_name("alt-bi"))
    pooling: Pooling = Pooling.BILATERAL_CONCAT
    conv_kind: ConvKind = ConvKind.CONV_2D
    use_bias: bool = True
    num_classes: int = 1000
    drop_path_rate: float = 0.0
    drop_path_schedule: str = "linear"
    in_channels: int = 3
    mlstm_mode: str = "parallel"
    mlstm_chunk: int | None = None

    def __post_init__(self):
        if isinstance(self.block_design, str):
            object.__setattr__(self, "block_design", BlockDesign.from_name(self.block_design))
        object.__setattr__(self, "pooling", Pooling(self.pooling))
        object.__setattr__(self, "conv_kind", ConvKind(self.conv_kind))
        if self.patch_stride is None:
            object.__setattr__(self, "patch_stride", self.patch_size)
        for name in ("image_size", "patch_size", "patch_stride", "dim", "depth", "expansion", "heads",
                     "num_classes", "in_channels"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.patch_size > self.image_size or (self.image_size - self.patch_size) % self.patch_stride:
            raise ConfigError(f"(image_size - patch_size) = {self.image_size - self.patch_size} "
                              f"is not divisible by patch_stride {self.patch_stride}")
        if self.inner_dim % self.heads:
            raise ConfigError(f"inner width {self.inner_dim} not divisible by {self.heads} heads")
        if self.qk_dim < self.heads or self.qk_dim % self.heads:
            raise ConfigError(f"qk width {self.qk_dim} not divisible by {self.heads} heads")
        if not 0 <= self.drop_path_rate < 1:
            raise ConfigError(f"drop_path_rate must lie in [0, 1), got {self.drop_path_rate}")
        if self.drop_path_schedule not in ("linear", "constant"):
            raise ConfigError(f"drop_path_schedule must be 'linear' or 'constant'")
        if self.mlstm_mode not in ("parallel", "recurrent", "chunkwise"):
            raise ConfigError(f"unknown mlstm_mode {self.mlstm_mode!r}")
        if self.mlstm_mode == "chunkwise" and (self.mlstm_chunk is None or self.mlstm_chunk < 1):
            raise ConfigError("chunkwise mlstm_mode needs a positive mlstm_chunk")
        if self.pooling is Pooling.MIDDLE_CLS and self.num_patches % 2:
            raise ConfigError("a middle [CLS] token needs an even number of patches")

    @property
    def inner_dim(self) -> int:
        return self.expansion * self.dim

    @property
    def qk_dim(self) -> int:
        return int(round(self.inner_dim * self.qk_dim_ratio))

    @property
    def grid(self) -> tuple[int, int]:
        n = (self.image_size - self.patch_size) // self.patch_stride + 1
        return n, n

    @property
    def num_patches(self) -> int:
        h, w = self.grid
        return h * w

    @property
    def seq_len(self) -> int:
        return self.num_patches + (1 if self.pooling is Pooling.MIDDLE_CLS else 0)

    @property
    def feature_dim(self) -> int:
        return 2 * self.dim if self.pooling is Pooling.BILATERAL_CONCAT else self.dim

    @property
    def conv_taps(self) -> int:
        return 9 if self.conv_kind is ConvKind.CONV_2D else 4

    def drop_rates(self) -> list[float]:
        """Per-block drop-path rate (linear ramp from 0 to the peak, or constant)."""
        if self.drop_path_schedule == "constant" or self.depth == 1:
            return [float(self.drop_path_rate)] * self.depth
        return [float(r) for r in np.linspace(0.0, self.drop_path_rate, self.depth)]

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, BlockDesign):
                v = {"directions": [d.value for d in v.directions], "alternating": v.alternating,
                     "shared_params": v.shared_params}
            elif isinstance(v, enum.Enum):
                v = v.value
            out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ViLConfig":
        d = dict(d)
        bd = d.get("block_design")
        if isinstance(bd, dict):
            d["block_design"] = BlockDesign(tuple(Direction(x) for x in bd["directions"]),
                                            bool(bd.get("alternating", False)), bool(bd.get("shared_params", False)))
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown ViLConfig keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> "ViLConfig":
        return replace(self, **kw)


PRESETS = {
    "tiny": dict(dim=192, depth=24, drop_path_rate=0.0),
    "small": dict(dim=384, depth=24, drop_path_rate=0.05),
    "base": dict(dim=768, depth=24, drop_path_rate=0.2),
}


def preset(name: str, **overrides) -> ViLConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return ViLConfig(**{**base, "patch_size": 16, **overrides})


# ---------------------------------------------------------------- tokens
@dataclass
class PatchSequence:
    """Tokens ``(B, L, D)`` with their patch grid and the index of a [CLS] token, if any."""

    tokens: Tensor
    grid: tuple[int, int]
    cls_position: int | None = None

    def __post_init__(self):
        expected = self.grid[0] * self.grid[1] + (1 if self.cls_position is not None else 0)
        if self.tokens.shape[-2] != expected:
            raise DimensionError(f"{self.tokens.shape[-2]} tokens for grid {self.grid} "
                                 f"(cls={self.cls_position is not None})")

    @property
    def length(self) -> int:
        return self.tokens.shape[-2]


def extract_patches(images: np.ndarray, patch: int, stride: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Flatten patches of ``images[B, H, W, C]`` to ``(B, L, patch*patch*C)`` in row-major grid order."""
    images = np.asarray(images)
    if images.ndim != 4:
        raise DimensionError(f"images must be (B, H, W, C), got {images.shape}")
    B, H, W, C = images.shape
    for extent in (H, W):
        if extent < patch or (extent - patch) % stride:
            raise ConfigError(f"image extent {extent} incompatible with patch {patch} / stride {stride}")
    win = np.lib.stride_tricks.sliding_window_view(images, (patch, patch), axis=(1, 2))[:, ::stride, ::stride]
    gh, gw = win.shape[1], win.shape[2]
    flat = win.transpose(0, 1, 2, 4, 5, 3).reshape(B, gh * gw, patch * patch * C)
    return flat, (gh, gw)


def patchify(images, weight: Tensor, bias: Tensor | None, patch: int, stride: int) -> PatchSequence:
    """One shared linear projection of every patch; tokens ordered top-left to bottom-right."""
    flat, grid = extract_patches(images, patch, stride)
    x = Tensor(flat.astype(weight.dtype, copy=False))
    return PatchSequence(T.linear(x, weight, bias), grid)


def add_positional(seq: PatchSequence, pos: Tensor) -> PatchSequence:
    if seq.cls_position is not None or pos.shape != seq.tokens.shape[-2:]:
        raise DimensionError(f"positional table {pos.shape} does not match patch tokens {seq.tokens.shape}")
    return PatchSequence(seq.tokens + pos.broadcast_to(seq.tokens.shape), seq.grid)


def _cubic_weights(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Keys cubic-convolution weights for taps at offsets -1, 0, 1, 2 from ``floor``."""
    d = np.stack([t + 1, t, 1 - t, 2 - t], axis=-1)
    ad = np.abs(d)
    near = (a + 2) * ad ** 3 - (a + 3) * ad ** 2 + 1
    far = a * ad ** 3 - 5 * a * ad ** 2 + 8 * a * ad - 4 * a
    return np.where(ad <= 1, near, np.where(ad < 2, far, 0.0))


def bicubic_matrix(n_in: int, n_out: int) -> np.ndarray:
    """``(n_out, n_in)`` resampling matrix, pixel-centre aligned.

    Samples outside the input are linearly extrapolated from the two nearest
    edge samples, so linear fields are reproduced exactly.
    """
    if n_in < 1 or n_out < 1:
        raise ConfigError(f"interpolation extents must be positive, got {n_in} -> {n_out}")
    if n_in == 1:
        return np.ones((n_out, 1))
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    base = np.floor(src).astype(int)
    w = _cubic_weights(src - base)
    M = np.zeros((n_out, n_in))
    for r in range(n_out):
        for tap in range(4):
            j = base[r] - 1 + tap
            if j < 0:
                # f(j) = (1 - j) f(0) + j f(1)
                M[r, 0] += w[r, tap] * (1 - j)
                M[r, 1] += w[r, tap] * j
            elif j > n_in - 1:
                e = j - (n_in - 1)
                M[r, n_in - 1] += w[r, tap] * (1 + e)
                M[r, n_in - 2] -= w[r, tap] * e
            else:
                M[r, j] += w[r, tap]
    return M


def interpolate_positional(pos: Tensor, grid: tuple[int, int], new_grid: tuple[int, int]) -> Tensor:
    """Bicubic resampling of a ``(h*w, D)`` positional table onto ``new_grid``."""
    h, w = grid
    nh, nw = new_grid
    if nh < 1 or nw < 1:
        raise ConfigError(f"degenerate target grid {new_grid}")
    if pos.shape[0] != h * w:
        raise DimensionError(f"positional table has {pos.shape[0]} rows for grid {grid}")
    if (h, w) == (nh, nw):
        return pos
    D = pos.shape[1]
    Rh = Tensor(bicubic_matrix(h, nh).astype(pos.dtype))
    Rw = Tensor(bicubic_matrix(w, nw).astype(pos.dtype))
    x = (Rh @ pos.reshape(h, w * D)).reshape(nh, w, D)
    x = x.transpose(1, 0, 2).reshape(w, nh * D)
    x = (Rw @ x).reshape(nw, nh, D).transpose(1, 0, 2)
    return x.reshape(nh * nw, D)


def pool(seq: PatchSequence, mode: Pooling | str) -> Tensor:
    """Reduce ``(B, L, D)`` tokens to the classification feature."""
    mode = Pooling(mode)
    x = seq.tokens
    has_cls = seq.cls_position is not None
    if (mode is Pooling.MIDDLE_CLS) != has_cls:
        raise ConfigError(f"pooling {mode.value} {'requires' if not has_cls else 'forbids'} a [CLS] token")
    L = seq.length
    if mode is Pooling.AVG:
        return x.mean(axis=-2)
    if mode is Pooling.MIDDLE_PATCH:
        return x[..., L // 2, :]
    if mode is Pooling.MIDDLE_CLS:
        return x[..., seq.cls_position, :]
    if mode is Pooling.BILATERAL_AVG:
        return (x[..., 0, :] + x[..., L - 1, :]) * 0.5
    return T.concat([x[..., 0, :], x[..., L - 1, :]], axis=-1)


def drop_path(x: Tensor, branch: Callable[[Tensor], Tensor], rate: float, training: bool,
              rng: np.random.Generator | None) -> Tensor:
    """Residual ``x + branch(x)`` with per-sample stochastic depth.

    In training each sample skips the branch with probability ``rate``; the
    branch is evaluated only on surviving samples, which are scaled by
    ``1 / (1 - rate)``. Evaluation always runs the branch unscaled.
    """
    if not 0 <= rate < 1:
        raise ConfigError(f"drop-path rate must lie in [0, 1), got {rate}")
    if not training or rate == 0:
        return x + branch(x)
    if rng is None:
        raise ConfigError("training-mode drop path needs an rng")
    B = x.shape[0]
    keep = np.flatnonzero(rng.random(B) >= rate)
    if keep.size == 0:
        return x
    scale = 1.0 / (1.0 - rate)
    if keep.size == B:
        return x + branch(x) * scale
    y = branch(T.take(x, keep, 0)) * scale
    return x + T.scatter_rows(y, keep, B)


# ------------------------------------------------------------------- model
LAYER_PARAM_NAMES = ("norm.weight", "norm.bias", "up.weight", "up.bias", "conv.weight", "conv.bias",
                     "q.weight", "q.bias", "k.weight", "k.bias", "igate.weight", "igate.bias",
                     "fgate.weight", "fgate.bias", "skip", "outnorm.weight", "outnorm.bias",
                     "down.weight", "down.bias")
BIAS_GATED = {"norm.bias", "up.bias", "conv.bias", "outnorm.bias", "down.bias"}


def layer_param_shapes(cfg: ViLConfig) -> dict[str, tuple[int, ...]]:
    D, E, H, Q = cfg.dim, cfg.inner_dim, cfg.heads, cfg.qk_dim
    conv = (3, 3, E) if cfg.conv_kind is ConvKind.CONV_2D else (4, E)
    shapes = {
        "norm.weight": (D,), "norm.bias": (D,),
        "up.weight": (D, 2 * E), "up.bias": (2 * E,),
        "conv.weight": conv, "conv.bias": (E,),
        "q.weight": (H, E // H, Q // H), "q.bias": (Q,),
        "k.weight": (H, E // H, Q // H), "k.bias": (Q,),
        "igate.weight": (E, H), "igate.bias": (H,),
        "fgate.weight": (E, H), "fgate.bias": (H,),
        "skip": (E,), "outnorm.weight": (E,), "outnorm.bias": (E,),
        "down.weight": (E, D), "down.bias": (D,),
    }
    if not cfg.use_bias:
        shapes = {k: v for k, v in shapes.items() if k not in BIAS_GATED}
    return shapes


def top_param_shapes(cfg: ViLConfig) -> dict[str, tuple[int, ...]]:
    D = cfg.dim
    shapes = {"patch_embed.weight": (cfg.patch_size ** 2 * cfg.in_channels, D), "patch_embed.bias": (D,),
              "pos_embed": (cfg.num_patches, D)}
    if cfg.pooling is Pooling.MIDDLE_CLS:
        shapes["cls_token"] = (D,)
    shapes.update({"norm.weight": (D,), "norm.bias": (D,),
                   "head.weight": (cfg.feature_dim, cfg.num_classes), "head.bias": (cfg.num_classes,)})
    if not cfg.use_bias:
        del shapes["patch_embed.bias"], shapes["norm.bias"]
    return shapes


def count_params(cfg: ViLConfig) -> int:
    """Exact number of learnable scalars of a model built from ``cfg``."""
    layer = sum(math.prod(s) for s in layer_param_shapes(cfg).values())
    top = sum(math.prod(s) for s in top_param_shapes(cfg).values())
    return top + cfg.depth * cfg.block_design.param_sets * layer


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return np.clip(rng.normal(0.0, std, shape), -2 * std, 2 * std)


def _init_layer(rng: np.random.Generator, cfg: ViLConfig, shapes: dict) -> dict[str, np.ndarray]:
    D, E, H = cfg.dim, cfg.inner_dim, cfg.heads
    small = math.sqrt(2 / (5 * D))
    out = {}
    for name, shape in shapes.items():
        if name in ("norm.weight", "outnorm.weight", "skip"):
            v = np.ones(shape)
        elif name == "up.weight":
            v = rng.normal(0.0, small, shape)
        elif name in ("q.weight", "k.weight"):
            v = rng.normal(0.0, math.sqrt(2 / (5 * (E // H))), shape)
        elif name == "conv.weight":
            fan_in = math.prod(shape[:-1])
            v = rng.uniform(-1, 1, shape) / math.sqrt(fan_in)
        elif name == "down.weight":
            v = rng.normal(0.0, 2 / cfg.depth / math.sqrt(E), shape)
        elif name == "igate.bias":
            v = rng.normal(0.0, 0.1, shape)
        elif name == "fgate.bias":
            v = np.linspace(3.0, 6.0, shape[0])
        else:
            v = np.zeros(shape)
        out[name] = v
    return out


class VisionLSTM:
    """Isotropic ViL classifier with parameters held in an ordered name -> Tensor map."""

    def __init__(self, cfg: ViLConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.schedule = assign_directions(cfg.block_design, cfg.depth)
        self.drop_rates = cfg.drop_rates()
        self.block_hook: Callable | None = None
        rng = np.random.default_rng(seed)
        params: dict[str, np.ndarray] = {}
        top = top_param_shapes(cfg)
        params["patch_embed.weight"] = _trunc_normal(rng, top["patch_embed.weight"], 0.02)
        if "patch_embed.bias" in top:
            params["patch_embed.bias"] = np.zeros(top["patch_embed.bias"])
        params["pos_embed"] = _trunc_normal(rng, top["pos_embed"], 0.02)
        if "cls_token" in top:
            params["cls_token"] = _trunc_normal(rng, top["cls_token"], 0.02)
        shapes = layer_param_shapes(cfg)
        for i in range(cfg.depth):
            for j in range(cfg.block_design.param_sets):
                for name, v in _init_layer(rng, cfg, shapes).items():
                    params[f"blocks.{i}.{j}.{name}"] = v
        params["norm.weight"] = np.ones(top["norm.weight"])
        if "norm.bias" in top:
            params["norm.bias"] = np.zeros(top["norm.bias"])
        params["head.weight"] = _trunc_normal(rng, top["head.weight"], 0.02)
        params["head.bias"] = np.zeros(top["head.bias"])
        self.params: dict[str, Tensor] = {k: Tensor(v.astype(dtype), requires_grad=True, name=k)
                                          for k, v in params.items()}

    # -------------------------------------------------------------- params
    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def astype(self, dtype) -> "VisionLSTM":
        for p in self.params.values():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    @property
    def dtype(self):
        return self.params["pos_embed"].dtype

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def layer_params(self, block: int, slot: int) -> dict[str, Tensor | None]:
        j = 0 if self.cfg.block_design.param_sets == 1 else slot
        prefix = f"blocks.{block}.{j}."
        return {n: self.params.get(prefix + n) for n in LAYER_PARAM_NAMES}

    # ------------------------------------------------------------- forward
    def embed(self, images) -> PatchSequence:
        """Patchify, add (possibly resampled) positional embeddings, insert the [CLS] token."""
        cfg = self.cfg
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        seq = patchify(images, self.params["patch_embed.weight"], self.params.get("patch_embed.bias"),
                       cfg.patch_size, cfg.patch_stride)
        pos = self.params["pos_embed"]
        if seq.grid != cfg.grid:
            pos = interpolate_positional(pos, cfg.grid, seq.grid)
        seq = add_positional(seq, pos)
        if cfg.pooling is Pooling.MIDDLE_CLS:
            mid = seq.length // 2
            B = seq.tokens.shape[0]
            cls = self.params["cls_token"].reshape(1, 1, cfg.dim).broadcast_to((B, 1, cfg.dim))
            tok = T.concat([seq.tokens[:, :mid], cls, seq.tokens[:, mid:]], axis=1)
            seq = PatchSequence(tok, seq.grid, mid)
        return seq

    def _conv(self, x: Tensor, P: dict, scan_grid: tuple[int, int], cls_pos: int | None) -> Tensor:
        B, L, E = x.shape
        if self.cfg.conv_kind is ConvKind.CAUSAL_1D:
            return T.causal_conv1d(x, P["conv.weight"], P["conv.bias"])
        h, w = scan_grid
        if cls_pos is None:
            y = T.conv2d_depthwise(x.reshape(B, h, w, E), P["conv.weight"], P["conv.bias"])
            return y.reshape(B, L, E)
        patches = T.concat([x[:, :cls_pos], x[:, cls_pos + 1:]], axis=1)
        yp = T.conv2d_depthwise(patches.reshape(B, h, w, E), P["conv.weight"], P["conv.bias"]).reshape(B, L - 1, E)
        yc = T.conv2d_depthwise(x[:, cls_pos:cls_pos + 1].reshape(B, 1, 1, E), P["conv.weight"],
                                P["conv.bias"]).reshape(B, 1, E)
        return T.concat([yp[:, :cls_pos], yc, yp[:, cls_pos:]], axis=1)

    def mlstm_branch(self, x: Tensor, P: dict, scan_grid: tuple[int, int], cls_pos: int | None = None) -> Tensor:
        """Residual-branch output of one mLSTM layer on tokens ``x (B, L, D)`` in their current order."""
        cfg = self.cfg
        B, L, D = x.shape
        E, H, Q = cfg.inner_dim, cfg.heads, cfg.qk_dim
        dh, dq = E // H, Q // H
        xn = T.layernorm(x, P["norm.weight"], P["norm.bias"], LN_EPS)
        up = T.linear(xn, P["up.weight"], P["up.bias"])
        x_in, z = up[..., :E], up[..., E:]
        xc = self._conv(x_in, P, scan_grid, cls_pos).silu()

        heads = xc.reshape(B, L, H, dh).transpose(0, 2, 1, 3)

        def headwise(name: str) -> Tensor:
            Wb = P[f"{name}.weight"].broadcast_to((B, H, dh, dq))
            bb = P[f"{name}.bias"].reshape(1, H, 1, dq).broadcast_to((B, H, L, dq))
            return heads @ Wb + bb

        q, k = headwise("q"), headwise("k")
        v = x_in.reshape(B, L, H, dh).transpose(0, 2, 1, 3)
        i_pre = T.linear(xc, P["igate.weight"], P["igate.bias"]).transpose(0, 2, 1)
        f_pre = T.linear(xc, P["fgate.weight"], P["fgate.bias"]).transpose(0, 2, 1)
        h = mlstm(q, k, v, i_pre, f_pre, cfg.mlstm_mode, cfg.mlstm_chunk)
        h = T.layernorm(h, None, None, LN_EPS).transpose(0, 2, 1, 3).reshape(B, L, E)
        h = h * P["outnorm.weight"].broadcast_to(h.shape)
        if P["outnorm.bias"] is not None:
            h = h + P["outnorm.bias"].broadcast_to(h.shape)
        h = h + P["skip"].broadcast_to(xc.shape) * xc
        h = h * z.silu()
        return T.linear(h, P["down.weight"], P["down.bias"])

    def mlstm_layer(self, x: Tensor, P: dict, scan_grid: tuple[int, int], cls_pos: int | None = None) -> Tensor:
        return x + self.mlstm_branch(x, P, scan_grid, cls_pos)

    def _full_permutation(self, direction: Direction, grid: tuple[int, int], cls_pos: int | None) -> np.ndarray:
        perm = grid_permutation(TraversalPath(direction, grid))
        if cls_pos is None:
            return perm
        shifted = np.where(perm >= cls_pos, perm + 1, perm)
        return np.concatenate([shifted[:cls_pos], [cls_pos], shifted[cls_pos:]])

    def block_branch(self, x: Tensor, block: int, grid: tuple[int, int], cls_pos: int | None) -> Tensor:
        """Sum over this block's directions of permute -> mLSTM branch -> un-permute."""
        out = None
        for slot, direction in enumerate(self.schedule[block]):
            P = self.layer_params(block, slot)
            scan_grid = TraversalPath(direction, grid).scan_grid
            if direction is RF:
                y = self.mlstm_branch(x, P, scan_grid, cls_pos)
            elif direction is RB:
                y = flip_sequence(self.mlstm_branch(flip_sequence(x), P, scan_grid, cls_pos))
            else:
                perm = self._full_permutation(direction, grid, cls_pos)
                inv = inverse_permutation(perm)
                if self.block_hook is not None:
                    self.block_hook(block, direction, perm, inv)
                y = apply_permutation(self.mlstm_branch(apply_permutation(x, perm), P, scan_grid, cls_pos), inv)
            if self.block_hook is not None and direction in (RF, RB):
                perm = self._full_permutation(direction, grid, cls_pos)
                self.block_hook(block, direction, perm, inverse_permutation(perm))
            out = y if out is None else out + y
        return out

    def features(self, images, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        seq = self.embed(images)
        x = seq.tokens
        for i in range(self.cfg.depth):
            try:
                x = drop_path(x, lambda t, i=i: self.block_branch(t, i, seq.grid, seq.cls_position),
                              self.drop_rates[i], training, rng)
            except ViLError as e:
                raise type(e)(f"block {i}: {e}") from e
        x = T.layernorm(x, self.params["norm.weight"], self.params.get("norm.bias"), LN_EPS)
        return pool(PatchSequence(x, seq.grid, seq.cls_position), self.cfg.pooling)

    def forward(self, images, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """Logits ``(B, num_classes)`` for ``images (B, H, W, C)``."""
        feat = self.features(images, training, rng)
        return T.linear(feat, self.params["head.weight"], self.params["head.bias"])

    __call__ = forward
