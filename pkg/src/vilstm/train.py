"""Training and evaluation loop for the synthetic corners task."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .backbone import VisionLSTM
from .checkpoint import save_checkpoint
from .config import TrainConfig
from .data import SyntheticCornersDataset, load_split, to_float
from .errors import ConfigError, NumericError
from .optim import AdamW, clip_grad_norm

log = logging.getLogger(__name__)

METRICS_HEADER = ("step", "loss", "train_acc", "eval_acc", "lr", "ms_per_step")


def lr_at(step: int, total_steps: int, warmup_steps: int, peak: float, end: float) -> float:
    """Linear warmup from 0 to ``peak``, then cosine decay reaching ``end`` at the last step."""
    if step < warmup_steps:
        return peak * step / warmup_steps
    span = total_steps - 1 - warmup_steps
    if span <= 0:
        return peak
    progress = min(1.0, (step - warmup_steps) / span)
    return end + (peak - end) * 0.5 * (1 + math.cos(math.pi * progress))


@dataclass
class MetricsRecord:
    step: int
    loss: float
    train_acc: float
    eval_acc: float | None
    lr: float
    ms_per_step: float

    def row(self) -> list[str]:
        ev = "" if self.eval_acc is None else f"{self.eval_acc:.6f}"
        return [str(self.step), f"{self.loss:.8f}", f"{self.train_acc:.6f}", ev, f"{self.lr:.8e}",
                f"{self.ms_per_step:.3f}"]


@dataclass
class TrainResult:
    model: VisionLSTM
    metrics: list[MetricsRecord] = field(default_factory=list)
    steps: int = 0
    train_acc: float = float("nan")
    eval_acc: float = float("nan")
    checkpoint: Path | None = None


def dtype_of(precision: str):
    return {"f32": np.float32, "f64": np.float64}[precision]


def load_data(cfg: TrainConfig):
    """Training and evaluation splits, read from ``data.dir`` or synthesized in memory."""
    if cfg.data.dir:
        train, evl = load_split(cfg.data.dir, "train"), load_split(cfg.data.dir, "eval")
    else:
        spec = dataset_spec(cfg)
        train, evl = spec.sample(cfg.data.n_train, 0), spec.sample(cfg.data.n_eval, 1)
    for images, _ in (train, evl):
        if len(images) and images.shape[1:3] != (cfg.model.image_size, cfg.model.image_size):
            raise ConfigError(f"dataset images are {images.shape[1:3]}, model expects {cfg.model.image_size}")
    return train, evl


def dataset_spec(cfg: TrainConfig) -> SyntheticCornersDataset:
    return SyntheticCornersDataset(cfg.model.image_size, cfg.model.num_classes, cfg.data.seed,
                                   cfg.data.marker_size, cfg.data.noise)


def evaluate(model: VisionLSTM, images: np.ndarray, labels: np.ndarray, batch_size: int = 256) -> float:
    """Eval-mode accuracy."""
    if len(images) == 0:
        return float("nan")
    correct = 0
    with T.no_grad():
        for s in range(0, len(images), batch_size):
            logits = model(to_float(images[s:s + batch_size], model.dtype)).data
            correct += int((logits.argmax(-1) == labels[s:s + batch_size]).sum())
    return correct / len(images)


def schedule_lengths(cfg: TrainConfig, n_train: int) -> tuple[int, int]:
    per_epoch = max(1, math.ceil(n_train / cfg.batch_size))
    total = cfg.max_steps if cfg.max_steps is not None else cfg.epochs * per_epoch
    warmup = int(round(cfg.warmup_epochs * per_epoch))
    return total, min(warmup, total)


def write_metrics(path: Path, records: list[MetricsRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in records:
            w.writerow(r.row())


def train(cfg: TrainConfig, out_dir=None, data=None, write_files: bool = True) -> TrainResult:
    """Run AdamW training; returns the model, metric records and final accuracies.

    A non-finite loss stops the run, writes the last good parameters to
    ``last_good.ckpt`` and raises :class:`NumericError`.
    """
    out = Path(out_dir or cfg.out_dir)
    dtype = dtype_of(cfg.precision)
    (train_x, train_y), (eval_x, eval_y) = data if data is not None else load_data(cfg)
    model = VisionLSTM(cfg.model, seed=cfg.seed, dtype=dtype)
    params = model.parameters()
    opt = AdamW(params, lr=0.0, betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay,
                decay_mask=[p.ndim >= 2 for p in params])
    order_rng = np.random.default_rng([cfg.seed, 1])
    drop_rng = np.random.default_rng([cfg.seed, 2])
    total, warmup = schedule_lengths(cfg, len(train_x))
    if total and len(train_x) == 0:
        raise ConfigError("training set is empty")
    result = TrainResult(model)
    if write_files:
        out.mkdir(parents=True, exist_ok=True)
    last_good = {k: v.data.copy() for k, v in model.named_parameters()}

    order, cursor = np.empty(0, dtype=np.int64), 0
    for step in range(total):
        if cursor >= len(order):
            order, cursor = order_rng.permutation(len(train_x)), 0
        idx = order[cursor:cursor + cfg.batch_size]
        cursor += cfg.batch_size
        lr = lr_at(step, total, warmup, cfg.peak_lr, cfg.end_lr)
        t0 = time.perf_counter()
        model.zero_grad()
        logits = model(to_float(train_x[idx], dtype), training=True, rng=drop_rng)
        loss = T.cross_entropy(logits, train_y[idx])
        loss_value = float(loss.data)
        if not math.isfinite(loss_value):
            if write_files:
                for k, v in model.named_parameters():
                    v.data = last_good[k]
                save_checkpoint(model, out / "last_good.ckpt")
                write_metrics(out / "metrics.csv", result.metrics)
            raise NumericError(f"non-finite loss {loss_value} at step {step} (lr={lr:.3e}); "
                               f"last good parameters saved to {out / 'last_good.ckpt'}")
        last_good = {k: v.data.copy() for k, v in model.named_parameters()}
        loss.backward()
        clip_grad_norm(params, cfg.grad_clip_norm)
        opt.lr = lr
        opt.step()
        ms = (time.perf_counter() - t0) * 1e3 if cfg.record_timing else 0.0
        final = step == total - 1
        if step % cfg.log_every == 0 or final or (step + 1) % cfg.eval_every == 0:
            acc = float((logits.data.argmax(-1) == train_y[idx]).mean())
            ev = evaluate(model, eval_x, eval_y) if ((step + 1) % cfg.eval_every == 0 or final) else None
            result.metrics.append(MetricsRecord(step, loss_value, acc, ev, lr, ms))
            log.info("step %d loss %.4f acc %.3f eval %s lr %.2e", step, loss_value, acc, ev, lr)
    result.steps = total
    result.train_acc = evaluate(model, train_x, train_y)
    result.eval_acc = evaluate(model, eval_x, eval_y)
    if write_files:
        write_metrics(out / "metrics.csv", result.metrics)
        result.checkpoint = out / "model.ckpt"
        save_checkpoint(model, result.checkpoint)
    return result
