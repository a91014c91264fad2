"""``vilstm <verb>``: train, eval, gradcheck, equivalence, bench, ablate, synth, flops, params.

Exit status is 0 on success, 1 when a check fails and 2 on configuration
errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from .backbone import PRESETS, ViLConfig, VisionLSTM, count_params, layer_param_shapes, preset, top_param_shapes
from .config import TrainConfig, load_config
from .errors import ConfigError, NumericError, ViLError

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _chunks(text: str) -> list:
    return [x.strip() if x.strip() in ("L", "L/2") else int(x) for x in text.split(",") if x.strip()]


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="INI file with [model], [train], [data] sections")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", type=Path, default=None, help="output directory")
    p.add_argument("--precision", choices=("f32", "f64"), default=None)


def _train_config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.precision is not None:
        over["precision"] = args.precision
    if args.out is not None:
        over["out_dir"] = str(args.out)
    if getattr(args, "max_steps", None) is not None:
        over["max_steps"] = args.max_steps
    return dataclasses.replace(cfg, **over) if over else cfg


def _model_config(args) -> ViLConfig:
    if getattr(args, "preset", None):
        return preset(args.preset)
    return _train_config(args).model


def _out_dir(args, default: str) -> Path:
    out = args.out or Path(default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args) -> int:
    from .train import train

    cfg = _train_config(args)
    res = train(cfg)
    print(f"steps={res.steps} train_acc={res.train_acc:.4f} eval_acc={res.eval_acc:.4f} checkpoint={res.checkpoint}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .train import dtype_of, evaluate, load_data

    cfg = _train_config(args)
    model = VisionLSTM(cfg.model, seed=cfg.seed, dtype=dtype_of(cfg.precision))
    ckpt = args.checkpoint or Path(cfg.out_dir) / "model.ckpt"
    load_checkpoint(model, ckpt)
    (tx, ty), (ex, ey) = load_data(cfg)
    print(f"checkpoint={ckpt} train_acc={evaluate(model, tx, ty):.4f} eval_acc={evaluate(model, ex, ey):.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .verify import micro_config, model_gradcheck

    cfg = _train_config(args).model if args.config else micro_config()
    frozen = tuple(x for x in (args.freeze or "").split(",") if x)
    reports = model_gradcheck(cfg, seed=args.seed or 0, max_entries=args.max_entries, frozen=frozen)
    failed = 0
    for r in reports:
        ok = r.passed(args.tol)
        failed += not ok
        status = "SKIP" if r.skipped else ("PASS" if ok else "FAIL")
        print(f"{status} {r.name:<28} max_rel_err={r.max_rel_error:.3e} checked={r.checked}")
    print(f"{len(reports) - failed}/{len(reports)} parameter groups within {args.tol:g}")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_equivalence(args) -> int:
    from .verify import TOLERANCE, equivalence_check

    dtype = np.float64 if args.precision == "f64" else np.float32
    tol = args.tol if args.tol is not None else TOLERANCE[dtype]
    rows = equivalence_check(_ints(args.lengths), _ints(args.dims), _chunks(args.chunks), args.trials,
                             args.seed or 0, dtype)
    bad = [r for r in rows if not r.max_dev < tol]
    for r in rows:
        print(f"L={r.L} d={r.d} C={r.chunk} max_dev={r.max_dev:.3e}")
    if bad:
        r = max(bad, key=lambda r: r.max_dev)
        print(f"FAIL: L={r.L} d={r.d} C={r.chunk} trial={r.worst_trial} deviation {r.max_dev:.3e} >= {tol:g}")
        return EXIT_FAIL
    print(f"PASS: all {len(rows)} (L, d, C) tuples within {tol:g}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .verify import bench, bench_csv, scaling_exponent

    dtype = np.float64 if args.precision == "f64" else np.float32
    rows = bench(_ints(args.lengths), args.d, _ints(args.chunks) if args.chunks else (), args.repeats,
                 seed=args.seed or 0, dtype=dtype)
    text = bench_csv(rows)
    if args.out:
        (_out_dir(args, ".") / "bench.csv").write_text(text)
    print(text, end="")
    for mode in ("parallel", "recurrent"):
        if any(r.mode == mode for r in rows) and len(set(_ints(args.lengths))) > 1:
            print(f"# {mode} exponent {scaling_exponent(rows, mode):.3f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .ablation import DEFAULT_MATRIX, ablation_csv, run_ablation

    cfg = _train_config(args)
    matrix = DEFAULT_MATRIX
    if args.rows:
        matrix = [tuple(r.split(":")) for r in args.rows.split(",")]
    rows = run_ablation(cfg, matrix, _ints(args.seeds))
    text = ablation_csv(rows)
    (_out_dir(args, cfg.out_dir) / "ablation.csv").write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .data import synthesize_dataset
    from .train import dataset_spec

    cfg = _train_config(args)
    out = args.out or Path(cfg.data.dir or "data/corners")
    paths = synthesize_dataset(out, dataset_spec(cfg), cfg.data.n_train, cfg.data.n_eval)
    for name, p in paths.items():
        print(f"{name}: {p}")
    return EXIT_OK


def cmd_flops(args) -> int:
    from .flops import chunk_sweep, estimate_model_flops, optimal_chunk

    cfg = _model_config(args)
    mode = args.mode
    rep = estimate_model_flops(cfg, args.resolution, mode, args.chunk)
    print(rep.to_text())
    if args.out:
        (_out_dir(args, ".") / "flops.csv").write_text(rep.to_csv())
    if args.sweep:
        dq, dv = cfg.qk_dim // cfg.heads, cfg.inner_dim // cfg.heads
        L = rep.seq_len
        print("# per-head mLSTM chunk sweep (C, MACs)")
        for c, n in chunk_sweep(L, dq, dv):
            print(f"{c},{n}")
        print(f"# optimal chunk {optimal_chunk(L, dq, dv)}")
    return EXIT_OK


def cmd_params(args) -> int:
    cfg = _model_config(args)
    layer = sum(int(np.prod(s)) for s in layer_param_shapes(cfg).values())
    top = sum(int(np.prod(s)) for s in top_param_shapes(cfg).values())
    print(f"per_layer={layer} layers={cfg.depth * cfg.block_design.param_sets} non_block={top}")
    print(f"total={count_params(cfg)} ({count_params(cfg) / 1e6:.2f}M)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vilstm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("train", help="train on the synthetic corners task")
    _common(p)
    p.add_argument("--max-steps", type=int, default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", type=Path, default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check at 64-bit")
    _common(p)
    p.add_argument("--max-entries", type=int, default=None)
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--freeze", default="", help="comma-separated parameter names to freeze")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("equivalence", help="recurrent vs parallel vs chunkwise deviation")
    _common(p)
    p.add_argument("--lengths", default="64")
    p.add_argument("--dims", default="32")
    p.add_argument("--chunks", default="1,8,64", help="ints, 'L' or 'L/2'")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--tol", type=float, default=None)
    p.set_defaults(fn=cmd_equivalence)

    p = sub.add_parser("bench", help="time the kernels over a length sweep")
    _common(p)
    p.add_argument("--lengths", default="128,256,512,1024,2048")
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--chunks", default="")
    p.add_argument("--repeats", type=int, default=5)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("ablate", help="train a design matrix over several seeds")
    _common(p)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--rows", default="", help="design:pooling pairs, comma-separated")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("synth", help="write the synthetic corners dataset")
    _common(p)
    p.set_defaults(fn=cmd_synth)

    for verb, fn in (("flops", cmd_flops), ("params", cmd_params)):
        p = sub.add_parser(verb, help=f"analytic {verb} of a preset or config")
        _common(p)
        p.add_argument("--preset", choices=sorted(PRESETS), default=None)
        if verb == "flops":
            p.add_argument("--resolution", type=int, default=None)
            p.add_argument("--mode", choices=("parallel", "recurrent", "chunkwise"), default="parallel")
            p.add_argument("--chunk", type=int, default=None)
            p.add_argument("--sweep", action="store_true", help="also print the mLSTM chunk-size sweep")
        p.set_defaults(fn=fn)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except (ConfigError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, ViLError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
