"""Command-line entry point.

Subcommands: describe, params, flops, bench, train, eval, sweep, table1.
Every command takes --seed, --threads, --out and --precision; outputs are
machine-parseable (CSV/JSON) with figures rendered alongside where a
report makes sense. Exit codes: 0 success, 1 numeric failure (NaN), 2
usage or configuration error.

The --threads value is exported to the BLAS thread environment before
numeric modules load, so results under --threads 1 are byte-reproducible.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=0, help="global RNG seed")
    p.add_argument("--threads", type=int, default=1, help="BLAS/OMP worker budget")
    p.add_argument("--out", default=None, help="output directory (default: print only)")
    p.add_argument("--precision", choices=("f32", "f64"), default="f32")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    p = argparse.ArgumentParser(
        prog="pyrcore",
        description="Feature-pyramid core architectures: describe, count, "
                    "benchmark, train and report.")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("describe", parents=[common], help="print a core's schedule")
    d.add_argument("--model", required=True, help="model description JSON")

    pa = sub.add_parser("params", parents=[common], help="per-module parameter table")
    pa.add_argument("--model", required=True)

    fl = sub.add_parser("flops", parents=[common], help="per-module FLOP table")
    fl.add_argument("--model", required=True)
    fl.add_argument("--size", type=int, nargs="+", default=[256],
                    help="image size (H or H W), divisible by 32")

    be = sub.add_parser("bench", parents=[common], help="wall-clock latency")
    be.add_argument("--model", required=True)
    be.add_argument("--batch", type=int, default=2)
    be.add_argument("--size", type=int, default=64)
    be.add_argument("--iters", type=int, default=10)
    be.add_argument("--mode", choices=("infer", "train"), default="infer")
    be.add_argument("--no-timing", action="store_true",
                    help="emit only the deterministic columns (no wall clock)")

    trn = sub.add_parser("train", parents=[common], help="run the training loop")
    trn.add_argument("--config", required=True, help="JSON with 'model' and 'train' sections")
    trn.add_argument("--max-steps", type=int, default=None)

    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--n-images", type=int, default=8)
    ev.add_argument("--size", type=int, default=64)
    ev.add_argument("--data-seed", type=int, default=None,
                    help="dataset seed (defaults to --seed)")

    sw = sub.add_parser("sweep", parents=[common], help="(L, B) frontier sweep")
    sw.add_argument("--grid", required=True, help="sweep config JSON")
    sw.add_argument("--no-timing", action="store_true")

    sub.add_parser("table1", parents=[common],
                   help="reproduce the published parameter column")
    return p


def _outdir(args) -> Path | None:
    if args.out is None:
        return None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dtype(args):
    import numpy as np
    return {"f32": np.float32, "f64": np.float64}[args.precision]


def _load_model_spec(path):
    from .model import ModelSpec
    return ModelSpec.from_json_file(path)


# ---------------------------------------------------------------------------
# command handlers
# ---------------------------------------------------------------------------

def cmd_describe(args) -> int:
    import numpy as np

    from . import analysis as A
    from . import cores as C

    spec = _load_model_spec(args.model)
    graph = C.build_core(spec.core, np.random.default_rng(args.seed), dtype=_dtype(args))
    rows = graph.describe()
    print(f"core: {spec.core.kind} (L={spec.core.L}, B={spec.core.B}, "
          f"levels {spec.core.levels[0]}..{spec.core.levels[1]})")
    print(f"{'stage':10s} {'op':5s} {'level':>5s} {'sources':12s} {'block':28s} param shapes")
    for stage, op, level, sources, bid, shapes in rows:
        src = ",".join(str(s) for s in sources)
        print(f"{stage:10s} {op:5s} {level:>5d} {src:12s} {bid:28s} {shapes}")
    ptab, total = A.count_params(spec)
    print("module parameters: " + "  ".join(f"{k}={v}" for k, v in ptab) + f"  total={total}")
    out = _outdir(args)
    if out is not None:
        with open(out / "describe.csv", "w") as fh:
            fh.write("stage,op,level,sources,block,param_shapes\n")
            for stage, op, level, sources, bid, shapes in rows:
                src = ";".join(str(s) for s in sources)
                fh.write(f"{stage},{op},{level},{src},{bid},{shapes}\n")
    return 0


def cmd_params(args) -> int:
    from . import analysis as A

    spec = _load_model_spec(args.model)
    rows, total = A.count_params(spec)
    for name, count in rows:
        print(f"{name:10s} {count:>12d}  ({count / 1e6:8.3f} M)")
    print(f"{'total':10s} {total:>12d}  ({total / 1e6:8.3f} M)")
    out = _outdir(args)
    if out is not None:
        with open(out / "params.csv", "w") as fh:
            fh.write("module,count\n")
            for name, count in rows:
                fh.write(f"{name},{count}\n")
            fh.write(f"total,{total}\n")
    return 0


def cmd_flops(args) -> int:
    from . import analysis as A

    spec = _load_model_spec(args.model)
    if len(args.size) not in (1, 2):
        raise ValueError("--size takes one or two integers")
    h = args.size[0]
    w = args.size[1] if len(args.size) == 2 else h
    rows, total = A.count_flops(spec, h, w)
    for name, count in rows:
        print(f"{name:10s} {count:>16d}  ({count / 1e9:10.4f} G)")
    print(f"{'total':10s} {total:>16d}  ({total / 1e9:10.4f} G)")
    out = _outdir(args)
    if out is not None:
        with open(out / "flops.csv", "w") as fh:
            fh.write(f"# image {h}x{w}; FLOPs = 2 x conv MACs\nmodule,flops\n")
            for name, count in rows:
                fh.write(f"{name},{count}\n")
            fh.write(f"total,{total}\n")
    return 0


def cmd_bench(args) -> int:
    from . import analysis as A

    spec = _load_model_spec(args.model)
    _, params = A.count_params(spec)
    _, flops = A.count_flops(spec, args.size, args.size)
    record = {"model": args.model, "mode": args.mode, "batch": args.batch,
              "size": args.size, "iters": args.iters, "threads": args.threads,
              "seed": args.seed, "params": params, "flops_per_image": flops}
    if args.no_timing:
        record.update({"fps": None, "ms_per_batch": None, "spread": None,
                       "peak_rss_mb": None})
    else:
        r = A.latency_bench(spec, batch=args.batch, size=args.size, iters=args.iters,
                            mode=args.mode, seed=args.seed, threads=args.threads)
        record.update({"fps": r.fps, "ms_per_batch": r.ms_per_batch,
                       "spread": r.spread, "peak_rss_mb": r.peak_rss_mb})
        print(f"{args.mode} fps={r.fps:.3f} ms/batch={r.ms_per_batch:.1f} "
              f"spread={r.spread:.2%} rss={r.peak_rss_mb:.0f}MB threads={args.threads}")
    out = _outdir(args)
    if out is not None:
        with open(out / "bench.json", "w") as fh:
            json.dump(record, fh, indent=2, sort_keys=True)
            fh.write("\n")
        with open(out / "bench.csv", "w") as fh:
            keys = ["mode", "batch", "size", "iters", "threads", "params",
                    "flops_per_image", "fps", "ms_per_batch"]
            fh.write(",".join(keys) + "\n")
            fh.write(",".join("" if record[k] is None else str(record[k]) for k in keys) + "\n")
    return 0


def cmd_train(args) -> int:
    from . import report
    from . import train as tr
    from .model import ModelSpec

    with open(args.config) as fh:
        cfg = json.load(fh)
    if "model" not in cfg:
        raise ValueError("train config needs a 'model' section")
    spec = ModelSpec.from_dict(cfg["model"])
    tcfg_dict = dict(cfg.get("train", {}))
    tcfg_dict.setdefault("seed", args.seed)
    tcfg = tr.TrainConfig.from_dict(tcfg_dict)
    out = _outdir(args) or Path("out_train")
    out.mkdir(parents=True, exist_ok=True)
    result, summary = tr.run_training(spec, tcfg, out, max_steps=args.max_steps,
                                      log=print, dtype=_dtype(args))
    report.save_loss_figure(out / "loss_curve.png", result.loss_history)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    from . import report
    from . import train as tr
    from .model import load_checkpoint

    _, model = load_checkpoint(args.checkpoint)
    data_seed = args.seed if args.data_seed is None else args.data_seed
    scenes = tr.gen_dataset(data_seed, args.n_images, args.size)
    metrics, preds, _ = tr.evaluate_on_scenes(model, scenes)
    print(json.dumps(metrics, indent=2, sort_keys=True))
    out = _outdir(args)
    if out is not None:
        from .head import export_detections_csv
        export_detections_csv(out / "detections.csv", preds)
        with open(out / "metrics.json", "w") as fh:
            json.dump(metrics, fh, indent=2, sort_keys=True)
            fh.write("\n")
        report.save_scene_overlay(out / "detections.png", scenes, preds)
    return 0


def cmd_sweep(args) -> int:
    from . import analysis as A
    from . import report

    with open(args.grid) as fh:
        grid = json.load(fh)
    cfg = A.SweepConfig.from_dict(grid)
    if args.no_timing:
        cfg.timing = False
    if "seed" not in grid:
        cfg.seed = args.seed
    rows = A.sweep(cfg, log=print)
    out = _outdir(args) or Path("out_sweep")
    out.mkdir(parents=True, exist_ok=True)
    A.sweep_rows_to_csv(out / "frontier.csv", rows, timing=cfg.timing)
    report.save_frontier_figure(out / "frontier.png", rows)
    print(f"wrote {out / 'frontier.csv'} ({len(rows)} rows)")
    return 0


def cmd_table1(args) -> int:
    from . import analysis as A
    from . import report

    rows = A.table1_rows()
    md = A.table1_to_markdown(rows)
    print(md, end="")
    out = _outdir(args)
    if out is not None:
        A.table1_to_csv(out / "table1.csv", rows)
        with open(out / "table1.md", "w") as fh:
            fh.write(md)
        report.save_table1_figure(out / "table1.png", rows)
    return 0 if all(r["within_tol"] for r in rows) else 1


_HANDLERS = {
    "describe": cmd_describe,
    "params": cmd_params,
    "flops": cmd_flops,
    "bench": cmd_bench,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "table1": cmd_table1,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    # pin the worker budget before any numeric module loads
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(args.threads)
    try:
        return _HANDLERS[args.command](args)
    except BrokenPipeError:
        return 0
    except Exception as exc:  # noqa: BLE001 - map to documented exit codes
        from .train import DivergenceError
        if isinstance(exc, DivergenceError):
            print(f"numeric failure: {exc}", file=sys.stderr)
            return 1
        if isinstance(exc, (ValueError, KeyError, FileNotFoundError,
                            json.JSONDecodeError, NotADirectoryError)):
            print(f"error: {exc}", file=sys.stderr)
            return 2
        raise


if __name__ == "__main__":
    sys.exit(main())
