"""``dynlora`` command line: train, compare, sweep, inspect."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from typing import Sequence

import numpy as np

from .baselines import COLUMNS, aggregate, apply_strategy, pretrain_base
from .config import RunConfig, load_config
from .data import Dataset, gen_layer_concentrated_task, gen_mixture_task, load_csv_dataset
from .errors import ConfigError, DynLoraError, ParseError
from .lora import delta
from .network import Model, atomic_write_text, init_model, load_checkpoint, save_checkpoint
from .trainer import RunRecord, TrainConfig, parameter_counts, train

log = logging.getLogger("dynlora")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

LOSS_CURVE_COLUMNS = ("epoch", "loss_total", "loss_task", "train_acc", "val_acc")
ALPHA_TRACE_COLUMNS = ("epoch", "layer", "gamma", "alpha", "rank")
TRAIN_ARTIFACTS = ("loss_curve.csv", "alpha_trace.csv", "checkpoint.json", "run_record.json")


def _csv_text(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, default=_json_default) + "\n"


# --- task construction ---------------------------------------------------------


def build_task(cfg: RunConfig, seed: int) -> tuple[Dataset, Model]:
    """Dataset plus frozen base model for one seed."""
    d = cfg.data
    ds_seed = cfg.data_seed(seed)
    if d["kind"] == "mixture":
        ds = gen_mixture_task(d["n"], d["d"], d["n_classes"], d["difficulty"], ds_seed)
        base = init_model([d["d"], *cfg.model["hidden"]], d["n_classes"], seed)
        if cfg.pretrain is not None:
            p = cfg.pretrain
            source = gen_mixture_task(p["n"], d["d"], d["n_classes"], d["difficulty"], ds_seed + p["seed_offset"])
            base = pretrain_base(base, source, TrainConfig(epochs=p["epochs"], seed=seed + p["seed_offset"]))
        return ds, base
    if d["kind"] == "layer_concentrated":
        hidden = cfg.model["hidden"]
        base = init_model([hidden[0], *hidden], d["n_classes"], seed)
        ds = gen_layer_concentrated_task(base, d["perturbed_layer"], d["perturb_rank"], d["n"], ds_seed,
                                         magnitude=d["magnitude"], kind=d["perturbation"])
        return ds, base
    ds = load_csv_dataset(d["path"], d["n_classes"], seed=ds_seed)
    return ds, init_model([ds.n_features, *cfg.model["hidden"]], d["n_classes"], seed)


def _check_task(cfg: RunConfig) -> None:
    d = cfg.data
    if d["kind"] == "layer_concentrated":
        n_layers = len(cfg.model["hidden"])
        if not 0 <= d["perturbed_layer"] < n_layers:
            raise ConfigError(f"must lie in [0, {n_layers})", "data.perturbed_layer")
        if d["perturb_rank"] > min(cfg.model["hidden"]):
            raise ConfigError("exceeds the layer dimensions", "data.perturb_rank")
    if d["kind"] == "csv" and not os.path.exists(d["path"]):
        raise ConfigError("CSV file not found", "data.path")


def _run(cfg: RunConfig, tag: str, seed: int, overrides: dict | None = None) -> tuple[Model, RunRecord]:
    tc = cfg.train_config(tag, seed, overrides)
    ds, base = build_task(cfg, seed)
    model = apply_strategy(base, tag, tc)
    return model, train(model, ds, tc)


def _safe_run(cfg: RunConfig, tag: str, seed: int, overrides: dict | None = None):
    """Picklable outcome: ("ok", record) or ("fail", message)."""
    try:
        return "ok", _run(cfg, tag, seed, overrides)[1]
    except Exception as exc:  # one failed run must not lose the others
        return "fail", f"run strategy={tag} seed={seed} failed: {type(exc).__name__}: {exc}"


def _map_runs(jobs: list[tuple], n_workers: int) -> list:
    if n_workers <= 1 or len(jobs) <= 1:
        return [_safe_run(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(_safe_run, *zip(*jobs)))


def _ensure_dir(path: str) -> None:
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory: {exc.strerror}", "output") from None


# --- commands ------------------------------------------------------------------


def cmd_train(cfg: RunConfig) -> int:
    if cfg.schedule is not None and cfg.strategy != "lora_dynamic":
        raise ConfigError(f"a rank schedule only applies to lora_dynamic, not {cfg.strategy}", "schedule")
    _check_task(cfg)
    out = cfg.output
    _ensure_dir(out)
    try:
        model, rec = _run(cfg, cfg.strategy, cfg.seed)
    except ConfigError:
        raise
    except Exception as exc:
        print(f"error: run strategy={cfg.strategy} seed={cfg.seed} failed: {type(exc).__name__}: {exc}",
              file=sys.stderr)
        return EXIT_RUNTIME
    write_train_artifacts(out, cfg, model, rec)
    print(f"strategy {rec.strategy} seed {rec.seed}")
    for k, v in rec.test.items():
        if k != "warnings":
            print(f"  {k:<13}{v:.4f}")
    for w in rec.test.get("warnings", []):
        print(f"  warning: {w}")
    print(f"  param_ratio  {rec.param_ratio:.6f}")
    return EXIT_OK


def write_train_artifacts(out: str, cfg: RunConfig, model: Model, rec: RunRecord) -> None:
    curve = [(e, rec.loss_total[e], rec.loss_task[e], rec.train_acc[e], rec.val_acc[e])
             for e in range(len(rec.loss_total))]
    atomic_write_text(os.path.join(out, "loss_curve.csv"), _csv_text(LOSS_CURVE_COLUMNS, curve))
    atomic_write_text(os.path.join(out, "alpha_trace.csv"), _csv_text(ALPHA_TRACE_COLUMNS, rec.alpha_trace_rows()))
    save_checkpoint(model, os.path.join(out, "checkpoint.json"))
    doc = {"config": cfg.to_dict(), **rec.to_dict()}
    atomic_write_text(os.path.join(out, "run_record.json"), _dump(doc))


def _table_csv(rows: list[dict], header: Sequence[str]) -> str:
    return _csv_text(header, ([r[h] for h in header] for r in rows))


def cmd_compare(cfg: RunConfig) -> int:
    if len(cfg.strategies) < 2:
        raise ConfigError("compare needs at least two strategies", "strategies")
    _check_task(cfg)
    _ensure_dir(cfg.output)
    results = _map_runs([(cfg, tag, seed) for seed in cfg.seeds for tag in cfg.strategies], cfg.jobs)
    runs = [r for status, r in results if status == "ok"]
    failures = [r for status, r in results if status == "fail"]
    runs_dir = os.path.join(cfg.output, "runs")
    _ensure_dir(runs_dir)
    for rec in runs:
        atomic_write_text(os.path.join(runs_dir, f"{rec.strategy}_seed{rec.seed}.json"), _dump(rec.to_dict()))
    table = aggregate(cfg.strategies, runs)
    atomic_write_text(os.path.join(cfg.output, "comparison.csv"), table.to_csv())
    atomic_write_text(os.path.join(cfg.output, "comparison.txt"), table.to_text())
    print(table.to_text(), end="")
    for msg in failures:
        print(f"error: {msg}", file=sys.stderr)
    return EXIT_RUNTIME if failures else EXIT_OK


def cmd_sweep(cfg: RunConfig) -> int:
    if cfg.sweep is None:
        raise ConfigError("sweep needs a 'sweep' section with a grid", "sweep")
    points = cfg.sweep_points()
    cap = cfg.sweep["max_points"]
    if len(points) > cap:
        raise ConfigError(f"grid has {len(points)} points, above the cap of {cap}; "
                          "raise sweep.max_points or shrink the grid", "sweep.grid")
    tag = cfg.sweep["strategy"]
    for p in points:
        cfg.train_config(tag, cfg.seed, p)  # validate every point before any compute
    _check_task(cfg)
    _ensure_dir(cfg.output)
    jobs = [(cfg, tag, seed, p) for p in points for seed in cfg.seeds]
    results = _map_runs(jobs, cfg.jobs)
    keys = list(points[0])
    header = ["point", *keys, *COLUMNS[1:], "n_runs"]
    rows, failures = [], []
    per_point = len(cfg.seeds)
    for i, p in enumerate(points):
        chunk = results[i * per_point:(i + 1) * per_point]
        failures += [r for s, r in chunk if s == "fail"]
        ok = [r for s, r in chunk if s == "ok"]
        if not ok:
            continue
        row = aggregate([tag], ok).rows[0]
        rows.append({"point": i, **p, **{c: getattr(row, c) for c in COLUMNS[1:]}, "n_runs": row.n_runs})
    atomic_write_text(os.path.join(cfg.output, "sweep.csv"), _table_csv(rows, header))
    print(_table_csv(rows, header), end="")
    for msg in failures:
        print(f"error: {msg}", file=sys.stderr)
    return EXIT_RUNTIME if failures else EXIT_OK


def inspect_rows(model: Model) -> list[dict]:
    rows = []
    for l, s in enumerate(model.layers):
        ad = model.adapters[l] if model.adapters else None
        if ad is None:
            rows.append({"layer": l, "d_in": s.d_in, "d_out": s.d_out, "rank": None, "alpha": None,
                         "norm_a": None, "norm_b": None, "norm_delta": None})
            continue
        rows.append({"layer": l, "d_in": s.d_in, "d_out": s.d_out, "rank": ad.rank, "alpha": ad.alpha,
                     "norm_a": float(np.linalg.norm(ad.a)), "norm_b": float(np.linalg.norm(ad.b)),
                     "norm_delta": float(np.linalg.norm(ad.alpha * delta(ad)))})
    return rows


def cmd_inspect(path: str) -> int:
    try:
        model = load_checkpoint(path)
    except (ParseError, OSError) as exc:
        print(f"error: cannot read checkpoint {path}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"dims      {model.dims} -> {model.n_classes} classes")
    print(f"strategy  {model.strategy}")
    print(f"{'layer':>5}{'shape':>10}{'rank':>6}{'alpha':>12}{'|A|_F':>12}{'|B|_F':>12}{'|dW|_F':>12}")
    for r in inspect_rows(model):
        shape = f"{r['d_in']}x{r['d_out']}"
        if r["rank"] is None:
            print(f"{r['layer']:>5}{shape:>10}{'-':>6}{'-':>12}{'-':>12}{'-':>12}{'-':>12}")
        else:
            print(f"{r['layer']:>5}{shape:>10}{r['rank']:>6}{r['alpha']:>12.6f}{r['norm_a']:>12.6f}"
                  f"{r['norm_b']:>12.6f}{r['norm_delta']:>12.6f}")
    if model.strategy == "base":
        print("param_ratio n/a (no strategy applied)")
    else:
        c = parameter_counts(model)
        print(f"param_ratio {c['param_ratio']:.6f} ({c['body_trainable']}/{c['body_total']} body parameters)")
    return EXIT_OK


# --- entry point ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dynlora", description="Dynamic LoRA fine-tuning experiments")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)
    for name, text in (("train", "run one training"), ("compare", "compare strategies over seeds"),
                       ("sweep", "grid over schedule and regularization settings")):
        sp = sub.add_parser(name, help=text)
        sp.add_argument("--config", required=True, help="JSON run configuration")
        sp.add_argument("--out", help="output directory (overrides config 'output')")
        sp.add_argument("--seed", type=int, help="seed override (also replaces 'seeds')")
        sp.add_argument("--jobs", type=int, help="parallel runs for compare/sweep")
    ip = sub.add_parser("inspect", help="summarize a checkpoint")
    ip.add_argument("checkpoint")
    return p


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if args.out is not None:
        cfg.output = args.out
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.seeds = [args.seed]
    if args.jobs is not None:
        if args.jobs < 1:
            raise ConfigError("must be >= 1", "--jobs")
        cfg.jobs = args.jobs
    return cfg


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "inspect":
        return cmd_inspect(args.checkpoint)
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        return {"train": cmd_train, "compare": cmd_compare, "sweep": cmd_sweep}[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DynLoraError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
