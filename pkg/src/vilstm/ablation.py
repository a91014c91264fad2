"""Design-matrix sweeps: train each (block design, pooling) pair over several seeds."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace

import numpy as np

from .backbone import Pooling, count_params
from .config import TrainConfig
from .train import load_data, train

DEFAULT_MATRIX = (("uni", "MiddlePatch"), ("alt-bi", "MiddlePatch"), ("alt-bi", "BilateralConcat"),
                  ("bi", "BilateralConcat"), ("bi-shared", "BilateralConcat"), ("alt-bi", "AVG"))


@dataclass
class AblationRow:
    design: str
    pooling: str
    seeds: tuple[int, ...]
    params: int
    feature_dim: int
    train_acc: list[float]
    eval_acc: list[float]

    @property
    def mean_eval(self) -> float:
        return float(np.mean(self.eval_acc))

    @property
    def mean_train(self) -> float:
        return float(np.mean(self.train_acc))


def run_ablation(base: TrainConfig, matrix=DEFAULT_MATRIX, seeds=(0, 1, 2)) -> list[AblationRow]:
    """Train every row on the same data for every seed; the data seed stays fixed."""
    data = load_data(base)
    rows = []
    for design, pooling in matrix:
        model_cfg = base.model.replace(block_design=design, pooling=Pooling(pooling))
        row = AblationRow(design, Pooling(pooling).value, tuple(seeds), count_params(model_cfg),
                          model_cfg.feature_dim, [], [])
        for seed in seeds:
            res = train(replace(base, model=model_cfg, seed=seed), data=data, write_files=False)
            row.train_acc.append(res.train_acc)
            row.eval_acc.append(res.eval_acc)
        rows.append(row)
    return rows


def ablation_csv(rows: list[AblationRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["design", "pooling", "params", "feature_dim", "seeds", "mean_train_acc", "mean_eval_acc",
                "eval_acc_per_seed"])
    for r in rows:
        w.writerow([r.design, r.pooling, r.params, r.feature_dim, len(r.seeds), f"{r.mean_train:.6f}",
                    f"{r.mean_eval:.6f}", " ".join(f"{a:.4f}" for a in r.eval_acc)])
    return buf.getvalue()
