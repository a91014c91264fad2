"""Cross-mode equivalence checks and the kernel timing harness."""

from __future__ import annotations

import csv
import io
import time
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .flops import flops_mlstm
from .mlstm import forward_chunkwise, forward_parallel, forward_recurrent
from .tensor import Tensor, no_grad

TOLERANCE = {np.float32: 1e-4, np.float64: 1e-10}


def random_inputs(rng: np.random.Generator, batch: tuple[int, ...], L: int, d: int, dtype=np.float32):
    """Standard-normal ``q, k, v, i_pre, f_pre`` with leading ``batch`` axes."""
    qkv = [rng.standard_normal(batch + (L, d)).astype(dtype) for _ in range(3)]
    gates = [rng.standard_normal(batch + (L,)).astype(dtype) for _ in range(2)]
    return [Tensor(x) for x in qkv + gates]


@dataclass
class EquivalenceRow:
    L: int
    d: int
    chunk: int
    max_dev: float
    worst_trial: int


def mode_deviation(inputs, chunks) -> tuple[dict[int, np.ndarray], np.ndarray]:
    """Per-trial max |difference| of parallel and every chunk size against recurrent."""
    with no_grad():
        ref = forward_recurrent(*inputs)[0].data
        par = forward_parallel(*inputs).data
        base = np.abs(par - ref).reshape(len(par), -1).max(-1)
        per_chunk = {}
        for c in chunks:
            out = forward_chunkwise(*inputs, chunk=c)[0].data
            per_chunk[c] = np.abs(out - ref).reshape(len(out), -1).max(-1)
    return per_chunk, base


def equivalence_check(lengths, dims, chunks, trials: int = 100, seed: int = 0,
                      dtype=np.float32) -> list[EquivalenceRow]:
    """Max deviation across recurrent, parallel and chunkwise outputs.

    Chunk sizes may be ints or the strings ``"L"`` and ``"L/2"``; sizes larger
    than L are clamped to L. Trials run batched along a leading axis.
    """
    if not lengths or not dims or not chunks or trials < 1:
        raise ConfigError("lengths, dims and chunks must be non-empty and trials >= 1")
    rows = []
    rng = np.random.default_rng(seed)
    for L in lengths:
        for d in dims:
            resolved = sorted({min(L, max(1, _resolve_chunk(c, L))) for c in chunks})
            inputs = random_inputs(rng, (trials,), int(L), int(d), dtype)
            per_chunk, base = mode_deviation(inputs, resolved)
            for c in resolved:
                dev = np.maximum(per_chunk[c], base)
                rows.append(EquivalenceRow(int(L), int(d), c, float(dev.max()), int(dev.argmax())))
    return rows


def _resolve_chunk(c, L: int) -> int:
    if isinstance(c, str):
        s = c.strip()
        if s == "L":
            return L
        if s == "L/2":
            return L // 2
        return int(s)
    return int(c)


def _time_once(fn) -> float:
    t0 = time.perf_counter()
    fn()
    return time.perf_counter() - t0


def median_ms(fn, repeats: int = 5, warmup: int = 1) -> float:
    if repeats < 5:
        raise ConfigError("timing needs at least 5 repeats")
    for _ in range(warmup):
        fn()
    return float(np.median([_time_once(fn) for _ in range(repeats)])) * 1e3


@dataclass
class BenchRow:
    L: int
    chunk: int
    mode: str
    median_ms: float
    flops: int


def bench(lengths=(128, 256, 512, 1024, 2048), d: int = 64, chunks=(), repeats: int = 5, warmup: int = 1,
          modes=("parallel", "recurrent", "chunkwise"), seed: int = 0, dtype=np.float32) -> list[BenchRow]:
    """Wall-clock medians of the single-head kernels, paired with analytic counts.

    Timing assumes an otherwise idle, single-threaded process.
    """
    rng = np.random.default_rng(seed)
    rows = []
    for L in lengths:
        inputs = random_inputs(rng, (), int(L), d, dtype)
        plan = []
        if "parallel" in modes:
            plan.append(("parallel", L, lambda: forward_parallel(*inputs)))
        if "recurrent" in modes:
            plan.append(("recurrent", 1, lambda: forward_recurrent(*inputs)))
        if "chunkwise" in modes:
            for c in chunks:
                c = min(int(c), L)
                plan.append(("chunkwise", c, lambda c=c: forward_chunkwise(*inputs, chunk=c)))
        for mode, c, fn in plan:
            with no_grad():
                ms = median_ms(fn, repeats, warmup)
            if ms < 1.0:
                warnings.warn(f"median {ms:.3f} ms for {mode} L={L} is near timer resolution", RuntimeWarning)
            count = flops_mlstm(L, d, d, mode, c if mode == "chunkwise" else None)
            rows.append(BenchRow(int(L), int(c), mode, ms, count))
    return rows


def scaling_exponent(rows: list[BenchRow], mode: str) -> float:
    """Slope of log(median time) against log(L) for one mode."""
    pts = [(r.L, r.median_ms) for r in rows if r.mode == mode]
    if len(pts) < 2:
        raise ConfigError(f"need at least two lengths for mode {mode}")
    L, ms = np.array(pts, dtype=np.float64).T
    return float(np.polyfit(np.log(L), np.log(ms), 1)[0])


def bench_csv(rows: list[BenchRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["L", "C", "mode", "median_ms", "flops"])
    for r in rows:
        w.writerow([r.L, r.chunk, r.mode, f"{r.median_ms:.4f}", r.flops])
    return buf.getvalue()


GRADCHECK_PARAM_LIMIT = 50_000


def micro_config():
    """The smallest useful backbone: 16x16 images, 2x2 patch grid, D=8, depth 2."""
    from .backbone import ViLConfig

    return ViLConfig(image_size=16, patch_size=8, dim=8, depth=2, num_classes=3)


def model_gradcheck(cfg=None, seed: int = 0, batch: int = 2, max_entries: int | None = None,
                    frozen=(), h: float | None = None):
    """Finite-difference check of every parameter of a float64 model on a cross-entropy loss.

    Names listed in ``frozen`` have ``requires_grad`` switched off and come
    back as skipped reports.
    """
    from . import tensor as T
    from .backbone import VisionLSTM, count_params
    from .gradcheck import FD_STEP, check_gradients

    cfg = cfg or micro_config()
    if count_params(cfg) > GRADCHECK_PARAM_LIMIT:
        raise ConfigError(f"gradcheck needs a micro config (<= {GRADCHECK_PARAM_LIMIT} params), "
                          f"got {count_params(cfg)}")
    model = VisionLSTM(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    # perturb the zero-initialised entries so every path carries gradient
    for name, p in model.named_parameters():
        p.data = p.data + rng.normal(0.0, 0.1, p.shape)
        if name in frozen:
            p.requires_grad = False
    images = rng.standard_normal((batch, cfg.image_size, cfg.image_size, cfg.in_channels))
    labels = rng.integers(0, cfg.num_classes, size=batch)

    def loss():
        return T.cross_entropy(model(images), labels)

    return check_gradients(loss, dict(model.named_parameters()), h or FD_STEP, max_entries, rng)
