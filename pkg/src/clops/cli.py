"""Command-line entry point: ``clops <command> [--config run.toml] [--override key=value ...]``.

Exit codes: 0 on success, 2 for invalid configuration or arguments, 1 for any
other failure. Outputs are written to ``<name>.tmp`` and renamed when complete.
"""
from __future__ import annotations

import argparse
import contextlib
import dataclasses
import gzip
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import (ATTENTION_MASKS, HEADS, POSITIONAL_ENCODINGS, VARIANTS, ConfigError, EvalPlan, ModelConfig,
                     RunConfig, eval_plan_from, load_run_config, model_config_from, train_config_from)
from .etl import SchemaError, SplitError, TimeSeriesRecord, apply_split, check_leakage, ingest, make_split
from .evaluation import _atomic_write, _atomic_write_csv, rolling_evaluate
from .store import export_store, import_store
from .synthetic import SynthParams, gen_synthetic
from .training import FINETUNE_GRID, finetune, holdout_last_horizon, pretrain, train_scratch, validation_loss, zero_shot

log = logging.getLogger("clops")

ABLATION_AXES = {
    "architecture": ("variant", VARIANTS),
    "head": ("head", HEADS),
    "pe": ("pe", POSITIONAL_ENCODINGS),
    "mask": ("attn_mask", ATTENTION_MASKS),
}
SCALING_COLUMNS = ["size", "frac", "params", "observations", "n_seeds", "val_loss", "val_loss_mean",
                   "smape", "crps", "config_hash"]


class UsageError(ConfigError):
    pass


# -- configuration resolution ----------------------------------------------------------

def resolve(args, command: str) -> tuple[RunConfig, dict]:
    """Merge the config file, ``--override`` flags and ``--seed`` into one resolved RunConfig."""
    raw = load_run_config(args.config, args.override)
    seed = args.seed if args.seed is not None else int(raw.get("seed", 0))
    msec = dict(raw.get("model", {}))
    if not any(k in msec for k in ("size", "layers", "d_model")):
        msec["size"] = "tiny"
    model = model_config_from(msec)
    train = train_config_from(raw.get("train", {}), **{"seed": seed})
    plan = eval_plan_from(raw.get("eval", {}), H=model.H, stride=model.H, seed=seed)
    if plan.H != model.H:
        raise ConfigError(f"eval.H={plan.H} must equal model.H={model.H}")
    data = dict(raw.get("data", {}))
    data.setdefault("split_seed", seed)
    sections = {
        "seed": seed,
        "data": data,
        "model": model.to_dict(),
        "train": train.to_dict(),
        "eval": plan.to_dict(),
        **{k: v for k, v in raw.items() if k not in ("seed", "data", "model", "train", "eval")},
    }
    objs = {"model": model, "train": train, "plan": plan, "data": data, "seed": seed, "raw": raw}
    return RunConfig(command, sections), objs


def _synthetic(spec: dict) -> list[TimeSeriesRecord]:
    known = {f.name for f in dataclasses.fields(SynthParams)}
    params = SynthParams(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in spec.items() if k in known})
    return gen_synthetic(int(spec.get("n_series", 100)), int(spec.get("length", 2000)),
                         seed=int(spec.get("seed", 0)), params=params, d_y=int(spec.get("d_y", 1)))


def load_collections(data: dict, plan: EvalPlan) -> tuple[list, list]:
    """(pretrain, traintest) from pre-split stores, a single store, or a synthetic spec."""
    if "pretrain" in data or "traintest" in data:
        pre = import_store(data["pretrain"]) if data.get("pretrain") else []
        tt = import_store(data["traintest"]) if data.get("traintest") else []
        return pre, tt
    if "store" in data:
        series = import_store(data["store"])
    elif "synthetic" in data:
        series = _synthetic(data["synthetic"])
    else:
        raise ConfigError("config needs [data] with pretrain/traintest stores, a store, or a synthetic table")
    split = make_split(series, float(data.get("frac", 0.1)), int(data["split_seed"]), H=plan.test_length, windows=1)
    pre, tt = apply_split(series, split)
    check_leakage(pre, tt, split)
    return pre, tt


def train_region(series: list[TimeSeriesRecord], plan: EvalPlan) -> list[TimeSeriesRecord]:
    """Train-test series with the test windows cut off."""
    return [s.slice(0, s.length - plan.test_length) for s in series if s.length > plan.test_length]


def _write_json(path: Path, doc: dict) -> Path:
    return _atomic_write(path, json.dumps(doc, indent=2, sort_keys=True, default=str))


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- commands ---------------------------------------------------------------------

def cmd_ingest(args) -> dict:
    if not args.trace or not args.kind:
        raise UsageError("ingest needs --trace and --kind")
    run = RunConfig("ingest", {"trace": str(args.trace), "kind": args.kind})
    opener = gzip.open if str(args.trace).endswith(".gz") else open
    with opener(args.trace, "rt") as fh:
        series, preport, creport = ingest(fh, args.kind)
    out = Path(args.out or f"{args.kind}.jsonl.gz")
    export_store(series, out, kind=args.kind, meta={"config_hash": run.fingerprint})
    report = {"series": len(series), "parse": dataclasses.asdict(preport), "cleaning": dataclasses.asdict(creport),
              "store": str(out), "config_hash": run.fingerprint}
    _write_json(out.with_name(out.name + ".report.json"), report)
    return report


def cmd_split(args) -> dict:
    if not args.store:
        raise UsageError("split needs --store")
    series = import_store(args.store)
    frac = args.frac if args.frac is not None else 0.1
    seed = args.seed if args.seed is not None else 0
    H, windows = args.horizon, args.windows
    run = RunConfig("split", {"store": str(args.store), "frac": frac, "seed": seed, "H": H, "windows": windows})
    plan = make_split(series, frac, seed, H=H, windows=windows)
    pre, tt = apply_split(series, plan)
    check_leakage(pre, tt, plan)
    out = _out_dir(args)
    meta = {"config_hash": run.fingerprint, "test_start": str(plan.test_start), "seed": seed}
    export_store(pre, out / "pretrain.jsonl.gz", kind="pretrain", meta=meta)
    export_store(tt, out / "traintest.jsonl.gz", kind="traintest", meta=meta)
    doc = {"pretrain_series": len(pre), "traintest_series": len(tt),
           "pretrain_attrs": sorted(plan.pretrain_attrs), "traintest_attrs": sorted(plan.traintest_attrs),
           "end_timestamp": str(plan.end_timestamp), "test_start": str(plan.test_start),
           "config": run.to_dict(), "config_hash": run.fingerprint}
    _write_json(out / "split.json", doc)
    return {k: doc[k] for k in ("pretrain_series", "traintest_series", "test_start", "config_hash")}


def cmd_synth(args) -> dict:
    raw = load_run_config(args.config, args.override)
    spec = dict(raw.get("synthetic", raw.get("data", {}).get("synthetic", {})))
    if args.seed is not None:
        spec["seed"] = args.seed
    if args.n_series is not None:
        spec["n_series"] = args.n_series
    if args.length is not None:
        spec["length"] = args.length
    run = RunConfig("synth", {"synthetic": spec})
    series = _synthetic(spec)
    out = Path(args.out or "synthetic.jsonl.gz")
    export_store(series, out, kind="synthetic", meta={"config_hash": run.fingerprint, "params": spec})
    return {"series": len(series), "store": str(out), "config_hash": run.fingerprint}


def cmd_pretrain(args) -> dict:
    run, o = resolve(args, "pretrain")
    pre, _ = load_collections(o["data"], o["plan"])
    out = _out_dir(args)
    _write_json(out / "run.json", {"config": run.to_dict(), "config_hash": run.fingerprint})
    result = pretrain(pre, o["model"], o["train"], out_dir=out, resume_from=args.resume,
                      meta={"config_hash": run.fingerprint})
    return {"checkpoint": str(out / "final.clops"), "final_loss": result.losses[-1] if result.losses else None,
            "val_loss": result.final_val, "params": result.model.num_parameters(), "config_hash": run.fingerprint}


def cmd_adapt(args) -> dict:
    run, o = resolve(args, "adapt")
    mode = args.mode or o["raw"].get("adapt", {}).get("mode")
    if mode not in ("zero_shot", "finetune", "scratch"):
        raise UsageError(f"--mode must be zero_shot, finetune or scratch, got {mode!r}")
    run.sections["adapt"] = {**run.sections.get("adapt", {}), "mode": mode}
    _, tt = load_collections(o["data"], o["plan"])
    region = train_region(tt, o["plan"])
    out = _out_dir(args)
    meta = {"config_hash": run.fingerprint, "mode": mode}
    doc: dict = {"mode": mode, "config": run.to_dict(), "config_hash": run.fingerprint}
    if mode == "scratch":
        result = train_scratch(region, o["model"], o["train"], meta=meta)
        model = result.model
        doc["val_loss"] = result.final_val
    else:
        ckpt_path = args.checkpoint or o["raw"].get("adapt", {}).get("checkpoint")
        if not ckpt_path:
            raise UsageError(f"{mode} needs --checkpoint")
        ckpt = load_checkpoint(ckpt_path)
        if mode == "zero_shot":
            model = zero_shot(ckpt, tt)
        else:
            grid = tuple(o["raw"].get("adapt", {}).get("lr_grid", FINETUNE_GRID))
            res = finetune(ckpt, region, o["train"], grid)
            model = res.model
            doc.update(best_lr=res.best_lr, grid={str(k): v for k, v in res.grid.items()},
                       fallback=res.fallback, baseline_val=res.baseline_val)
    path = save_checkpoint(model, out / "adapted.clops", None, meta)
    doc["checkpoint"] = str(path)
    _write_json(out / "adapt.json", doc)
    return {k: v for k, v in doc.items() if k != "config"}


def cmd_evaluate(args) -> dict:
    run, o = resolve(args, "evaluate")
    target = args.checkpoint or o["raw"].get("evaluate", {}).get("checkpoint", "naive")
    run.sections["evaluate"] = {"checkpoint": str(target)}
    _, tt = load_collections(o["data"], o["plan"])
    mc = o["model"]
    forecaster = "naive" if target == "naive" else load_checkpoint(target).model
    report = rolling_evaluate(forecaster, tt, o["plan"], L=mc.L, lags=mc.lags, fingerprint=run.fingerprint)
    out = _out_dir(args)
    report.to_json(out / "metrics.json", config=run.to_dict())
    report.to_csv(out / "metrics.csv")
    return report.summary()


def _subset(series: list, frac: float, seed: int) -> list:
    if frac >= 1.0:
        return list(series)
    n = max(1, int(round(frac * len(series))))
    idx = np.sort(np.random.default_rng(seed).permutation(len(series))[:n])
    return [series[i] for i in idx]


def cmd_ablate(args) -> dict:
    run, o = resolve(args, "ablate")
    axis = args.axis or o["raw"].get("ablate", {}).get("axis")
    if axis not in ABLATION_AXES:
        raise UsageError(f"--axis must be one of {sorted(ABLATION_AXES)}, got {axis!r}")
    run.sections["ablate"] = {"axis": axis}
    field_name, values = ABLATION_AXES[axis]
    pre, tt = load_collections(o["data"], o["plan"])
    val_set = holdout_last_horizon(train_region(tt, o["plan"]), o["model"].H)[1]
    base = o["model"].to_dict()
    rows = []
    for value in values:
        mc = ModelConfig(**{**base, field_name: value})
        result = pretrain(pre, mc, o["train"], meta={"config_hash": run.fingerprint})
        report = rolling_evaluate(result.model, tt, o["plan"], L=mc.L, fingerprint=run.fingerprint)
        rows.append([axis, value, result.model.num_parameters(), validation_loss(result.model, val_set),
                     report.smape, report.crps, run.fingerprint])
        log.info("ablate %s=%s smape=%.3f crps=%.4f", axis, value, report.smape, report.crps)
    out = _out_dir(args)
    cols = ["axis", "value", "params", "val_loss", "smape", "crps", "config_hash"]
    _atomic_write_csv(out / f"ablate_{axis}.csv", cols, rows)
    _write_json(out / f"ablate_{axis}.json", {"config": run.to_dict(), "config_hash": run.fingerprint,
                                              "rows": [dict(zip(cols, r)) for r in rows]})
    return {"rows": len(rows), "csv": str(out / f"ablate_{axis}.csv"), "config_hash": run.fingerprint}


def cmd_scaling(args) -> dict:
    run, o = resolve(args, "scaling")
    sc = o["raw"].get("scaling", {})
    sizes = args.sizes.split(",") if args.sizes else list(sc.get("sizes", ["tiny", "small"]))
    fracs = [float(x) for x in args.fracs.split(",")] if args.fracs else [float(x) for x in sc.get("fracs", [0.1, 1.0])]
    seeds = [int(x) for x in args.seeds.split(",")] if args.seeds else [int(x) for x in sc.get("seeds", [o["seed"]])]
    run.sections["scaling"] = {"sizes": sizes, "fracs": fracs, "seeds": seeds}
    pre, tt = load_collections(o["data"], o["plan"])
    val_set = holdout_last_horizon(train_region(tt, o["plan"]), o["model"].H)[1]
    overrides = {k: v for k, v in o["raw"].get("model", {}).items() if k != "size"}
    detail, rows = [], []
    for size in sizes:
        for frac in fracs:
            runs = []
            for seed in seeds:
                mc = ModelConfig.preset(size, **overrides)
                tc = dataclasses.replace(o["train"], seed=seed)
                subset = _subset(pre, frac, seed)
                result = pretrain(subset, mc, tc, meta={"config_hash": run.fingerprint})
                report = rolling_evaluate(result.model, tt, o["plan"], L=mc.L, fingerprint=run.fingerprint)
                obs = int(sum(s.targets.size for s in subset))
                vl = validation_loss(result.model, val_set)
                runs.append((vl, report.smape, report.crps))
                detail.append([size, frac, seed, result.model.num_parameters(), obs, vl, report.smape, report.crps,
                               run.fingerprint])
                log.info("scaling size=%s frac=%g seed=%d val=%.4f", size, frac, seed, vl)
            arr = np.array(runs)
            rows.append([size, frac, detail[-1][3], detail[-1][4], len(seeds), float(np.median(arr[:, 0])),
                         float(arr[:, 0].mean()), float(np.median(arr[:, 1])), float(np.median(arr[:, 2])),
                         run.fingerprint])
    out = _out_dir(args)
    _atomic_write_csv(out / "scaling.csv", SCALING_COLUMNS, rows)
    _atomic_write_csv(out / "scaling_runs.csv",
                      ["size", "frac", "seed", "params", "observations", "val_loss", "smape", "crps", "config_hash"],
                      detail)
    _write_json(out / "scaling.json", {"config": run.to_dict(), "config_hash": run.fingerprint,
                                       "rows": [dict(zip(SCALING_COLUMNS, r)) for r in rows]})
    return {"rows": len(rows), "csv": str(out / "scaling.csv"), "config_hash": run.fingerprint}


COMMANDS = {
    "ingest": cmd_ingest, "split": cmd_split, "synth": cmd_synth, "pretrain": cmd_pretrain,
    "adapt": cmd_adapt, "evaluate": cmd_evaluate, "ablate": cmd_ablate, "scaling": cmd_scaling,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clops", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=Path, help="output file (ingest, synth) or directory")
    common.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted override such as train.iterations=200 (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="parse, resample and clean a raw trace CSV")
    p.add_argument("--trace", type=Path)
    p.add_argument("--kind", choices=["azure2017", "borg2011", "ali2018", "synthetic"])

    p = sub.add_parser("split", parents=[common], help="pre-train / train-test split by top-level attribute")
    p.add_argument("--store", type=Path)
    p.add_argument("--frac", type=float)
    p.add_argument("--horizon", type=int, default=48)
    p.add_argument("--windows", type=int, default=12)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic collection store")
    p.add_argument("--n-series", type=int)
    p.add_argument("--length", type=int)

    p = sub.add_parser("pretrain", parents=[common], help="pre-train a model")
    p.add_argument("--resume", type=Path, help="continue from a checkpoint with optimizer state")

    p = sub.add_parser("adapt", parents=[common], help="zero-shot, fine-tune or from-scratch adaptation")
    p.add_argument("--mode", choices=["zero_shot", "finetune", "scratch"])
    p.add_argument("--checkpoint", type=Path)

    p = sub.add_parser("evaluate", parents=[common], help="rolling-window test evaluation")
    p.add_argument("--checkpoint", help="checkpoint path or 'naive'")

    p = sub.add_parser("ablate", parents=[common], help="architecture / head / PE / mask comparison")
    p.add_argument("--axis", choices=sorted(ABLATION_AXES))

    p = sub.add_parser("scaling", parents=[common], help="model-size x data-fraction grid")
    p.add_argument("--sizes", help="comma-separated presets, e.g. tiny,small")
    p.add_argument("--fracs", help="comma-separated data fractions, e.g. 0.1,1.0")
    p.add_argument("--seeds", help="comma-separated seeds")
    return parser


@contextlib.contextmanager
def _thread_cap():
    value = os.environ.get("CLOPS_THREADS")
    if not value:
        yield
        return
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=int(value)):
        yield


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_cap():
            result = COMMANDS[args.command](args)
    except (ConfigError, SchemaError, SplitError) as exc:
        print(f"clops {args.command}: invalid configuration: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, OSError, RuntimeError, ValueError, ArithmeticError) as exc:
        print(f"clops {args.command}: failed: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(result, indent=2, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
