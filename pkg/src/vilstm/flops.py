"""Analytic multiply-accumulate counts for the mLSTM kernels and the full backbone.

One MAC is one FLOP unit. Matrix products count ``m*k*n``; activations,
norms and elementwise gates count one unit per output element. The causal
score/value products count only the unmasked half, ``c*c/2`` per chunk,
although the kernels compute the full square.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .backbone import ConvKind, Pooling, ViLConfig
from .errors import ConfigError

MODES = ("parallel", "recurrent", "chunkwise")


def chunk_sizes(L: int, chunk: int) -> list[int]:
    full, rest = divmod(L, chunk)
    return [chunk] * full + ([rest] if rest else [])


def mlstm_terms(L: int, d_qk: int, d_v: int, mode: str = "parallel", chunk: int | None = None) -> dict[str, int]:
    """Per-head MAC breakdown of one mLSTM sequence pass.

    ``score_value`` is the causal intra-chunk product, ``readout`` reads the
    carried memory, ``state_update`` writes the end-of-chunk memory,
    ``state_decay`` rescales the carried memory once per chunk boundary and
    ``normalize`` divides the readout. Parallel is one chunk of length L,
    recurrent is L chunks of length 1.
    """
    if L < 1 or d_qk < 1 or d_v < 1:
        raise ConfigError(f"L and head dims must be >= 1, got L={L}, d_qk={d_qk}, d_v={d_v}")
    if mode == "parallel":
        chunk = L
    elif mode == "recurrent":
        chunk = 1
    elif mode == "chunkwise":
        if chunk is None or not 1 <= chunk <= L:
            raise ConfigError(f"chunkwise needs 1 <= C <= L, got C={chunk}, L={L}")
    else:
        raise ConfigError(f"unknown mode {mode!r}; choose from {MODES}")
    sizes = chunk_sizes(L, chunk)
    memory = d_qk * d_v + d_qk
    return {
        "score_value": sum(c * c * (d_qk + d_v) // 2 for c in sizes),
        "readout": sum(c * memory for c in sizes[1:]),
        "state_update": sum(c * memory for c in sizes[:-1]),
        "state_decay": (len(sizes) - 1) * memory,
        "normalize": L * d_v,
    }


def flops_mlstm(L: int, d_qk: int, d_v: int, mode: str = "parallel", chunk: int | None = None) -> int:
    return sum(mlstm_terms(L, d_qk, d_v, mode, chunk).values())


def unmasked_score_value(L: int, d_qk: int, d_v: int) -> int:
    """The full ``L x L`` score and value products without causal masking."""
    return L * L * (d_qk + d_v)


def chunk_sweep(L: int, d_qk: int, d_v: int, chunks=None) -> list[tuple[int, int]]:
    """``(C, count)`` for every chunk size (all of 1..L by default)."""
    chunks = range(1, L + 1) if chunks is None else chunks
    return [(int(c), flops_mlstm(L, d_qk, d_v, "chunkwise", int(c))) for c in chunks]


def optimal_chunk(L: int, d_qk: int, d_v: int) -> int:
    """Smallest chunk size minimizing the chunkwise count, by exhaustive scan."""
    return min(chunk_sweep(L, d_qk, d_v), key=lambda t: (t[1], t[0]))[0]


@dataclass
class FlopsReport:
    components: dict[str, int]
    mode: str
    seq_len: int
    width: int
    depth: int
    chunk: int | None = None
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        for k, v in self.components.items():
            if int(v) != v or v < 0:
                raise ConfigError(f"component {k} must be a non-negative integer, got {v}")
            self.components[k] = int(v)

    @property
    def total(self) -> int:
        return sum(self.components.values())

    @property
    def block_total(self) -> int:
        return sum(v for k, v in self.components.items() if k.startswith("blocks."))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["component", "count"])
        for k, v in self.components.items():
            w.writerow([k, v])
        w.writerow(["total", self.total])
        return buf.getvalue()

    def to_text(self) -> str:
        mode = self.mode if self.chunk is None else f"{self.mode}(C={self.chunk})"
        lines = [f"mode={mode} L={self.seq_len} D={self.width} depth={self.depth}"]
        width = max(len(k) for k in self.components) + 2
        for k, v in self.components.items():
            lines.append(f"{k:<{width}}{v:>16,d}  {100 * v / max(self.total, 1):5.1f}%")
        lines.append(f"{'total':<{width}}{self.total:>16,d}  ({self.total / 1e9:.3f} G)")
        return "\n".join(lines)


def estimate_model_flops(cfg: ViLConfig, resolution: int | None = None, mode: str = "parallel",
                         chunk: int | None = None) -> FlopsReport:
    """Itemized MAC count of one forward pass of a single image."""
    res = cfg.image_size if resolution is None else resolution
    if res < cfg.patch_size or (res - cfg.patch_size) % cfg.patch_stride:
        raise ConfigError(f"resolution {res} incompatible with patch {cfg.patch_size} / stride {cfg.patch_stride}")
    g = (res - cfg.patch_size) // cfg.patch_stride + 1
    n_patches = g * g
    L = n_patches + (1 if cfg.pooling is Pooling.MIDDLE_CLS else 0)
    D, E, H, Q = cfg.dim, cfg.inner_dim, cfg.heads, cfg.qk_dim
    layers = cfg.depth * cfg.block_design.per_block
    taps = 9 if cfg.conv_kind is ConvKind.CONV_2D else 4

    proj = L * (D * 2 * E + 2 * E * (Q // H) + 2 * E * H + E * D)
    conv = L * E * taps
    core = H * flops_mlstm(L, Q // H, E // H, mode, chunk)
    # pre-norm, two SiLUs, head norm, affine, skip, output gate, residual add
    elementwise = L * (2 * D + 5 * E)
    if cfg.block_design.per_block > 1:
        elementwise += L * D

    pooled = {Pooling.AVG: L * D, Pooling.BILATERAL_AVG: D}.get(cfg.pooling, 0)
    comps = {
        "patch_embed": n_patches * cfg.patch_size ** 2 * cfg.in_channels * D,
        "pos_embed": n_patches * D,
        "blocks.projections": layers * proj,
        "blocks.conv": layers * conv,
        "blocks.mlstm_core": layers * core,
        "blocks.elementwise": layers * elementwise,
        "final_norm": L * D,
        "pooling": pooled,
        "head": cfg.feature_dim * cfg.num_classes,
    }
    return FlopsReport(comps, mode, L, D, cfg.depth, chunk if mode == "chunkwise" else None,
                       extras={"drop_path_schedule": cfg.drop_path_schedule})


def survival_probabilities(depth: int, rate: float, schedule: str = "linear") -> np.ndarray:
    if not 0 <= rate < 1:
        raise ConfigError(f"drop-path rate must lie in [0, 1), got {rate}")
    if schedule == "constant" or depth == 1:
        return np.full(depth, 1.0 - rate)
    if schedule != "linear":
        raise ConfigError(f"unknown drop-path schedule {schedule!r}")
    return 1.0 - np.linspace(0.0, rate, depth)


def expected_flops_with_droppath(report: FlopsReport, rate: float, schedule: str | None = None) -> float:
    """Expected per-image count when dropped blocks are skipped entirely.

    Every block costs the same, so the block components scale by the mean
    survival probability of the schedule.
    """
    schedule = schedule or report.extras.get("drop_path_schedule", "linear")
    keep = survival_probabilities(report.depth, rate, schedule)
    return report.total - report.block_total + report.block_total * float(keep.mean())
