"""Command-line entry point: ``stgrid <command> --config run.yaml [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path


from . import __version__
from .config import (
    COMMANDS,
    ConfigError,
    check_required,
    dump_config,
    grid_spec,
    parse_config,
    pattern_spec,
    resolve,
    run_hash,
    start_time,
    train_config,
)
from .evaluation import (
    bilinear_upsample,
    export_error_map,
    export_heatmap,
    historical_mean_baseline,
    mae_rmse,
    nn_bilinear_baseline,
    prepare_observation,
    run_ablation,
    run_scenario,
)
from .grid import Granularity, GridSeries, ingest_records, series_features
from .pipeline import (
    CheckpointBundle,
    joint_train,
    load_checkpoint,
    pretrain_stage_c,
    pretrain_stage_f,
    reconstruct,
    save_checkpoint,
    train,
    _fit_norm,
    _grid_meta,
)
from .storage import atomic_write_text, load_mask, load_series, read_records_csv, save_mask, save_series
from .synth import split_series, synth_series

log = logging.getLogger("stgrid")


class Run:
    """Tracks inputs/outputs of one command for the manifest."""

    def __init__(self, command: str, cfg: dict, out: Path):
        self.command = command
        self.cfg = cfg
        self.out = out
        self.inputs: list[str] = []
        self.outputs: list[str] = []

    def input(self, key: str) -> Path:
        p = Path(self.cfg["paths"][key])
        if not p.exists():
            raise ConfigError(f"paths.{key}", f"file not found: {p}")
        self.inputs.append(str(p))
        return p

    def output(self, name: str) -> Path:
        p = self.out / name
        self.outputs.append(str(p))
        return p

    def manifest(self) -> dict:
        def digest(p):
            p = Path(p)
            return hashlib.sha256(p.read_bytes()).hexdigest() if p.is_file() else None

        return {
            "command": self.command,
            "version": __version__,
            "seed": self.cfg["seed"],
            "config_hash": run_hash(self.cfg),
            "inputs": {p: digest(p) for p in self.inputs},
            "outputs": {p: digest(p) for p in self.outputs},
            "created": datetime.now(timezone.utc).isoformat(),
        }


def _holidays(run: Run):
    if not run.cfg["paths"]["holidays"]:
        return None
    lines = run.input("holidays").read_text().split()
    return [ln for ln in lines if ln]


def _external(run: Run, series: GridSeries):
    table = _holidays(run)
    return None if table is None else series_features(series, table)


def _eval_portion(run: Run, series: GridSeries) -> GridSeries:
    part = run.cfg["split"]["eval_on"]
    if part == "all":
        return series
    tr, va, te = split_series(series, tuple(run.cfg["split"]["fractions"]))
    return {"train": tr, "val": va, "test": te}[part]


def _train_portion(run: Run, series: GridSeries) -> GridSeries:
    return split_series(series, tuple(run.cfg["split"]["fractions"]))[0]


def _load_fine(run: Run) -> GridSeries:
    series, _ = load_series(run.input("data"))
    if series.granularity is not Granularity.FINE:
        raise ConfigError("paths.data", "expected a fine-grained series")
    return series


# ---------------------------------------------------------------- commands


def cmd_synth(run: Run):
    cfg = run.cfg
    g, s = cfg["grid"], cfg["synth"]
    spec = grid_spec(cfg)
    series = synth_series(
        rows=g["rows"],
        cols=g["cols"],
        magnification=g["magnification"],
        steps=s["steps"],
        periods=tuple(s["periods"]),
        amplitudes=tuple(s["amplitudes"]),
        hotspots=s["hotspots"],
        noise=s["noise"],
        seed=cfg["seed"],
        start_time=start_time(cfg),
        interval=g["interval"],
        bbox=spec.bbox,
    )
    save_series(run.output("data.stgr"), series)
    log.info("synthesized %s fine series", series.values.shape)


def cmd_ingest(run: Run):
    records = read_records_csv(run.input("records"))
    series, mask = ingest_records(records, grid_spec(run.cfg), start_time(run.cfg), run.cfg["ingest"]["steps"])
    save_series(run.output("ingested.stgr"), series)
    save_mask(run.output("ingested_mask.stgr"), mask, series.spec, series.start_time)
    log.info("ingested %d records into %s cells, %d observed", len(records), series.values.shape, mask.flags.sum())


def cmd_mask(run: Run):
    truth = _eval_portion(run, _load_fine(run))
    observed, mask = prepare_observation(truth, pattern_spec(run.cfg))
    save_series(run.output("truth.stgr"), truth)
    save_series(run.output("observed.stgr"), observed)
    save_mask(run.output("mask.stgr"), mask, observed.spec, observed.start_time)
    log.info("masked %.1f%% of coarse cells", 100.0 * (1.0 - mask.flags.mean()))


def cmd_pretrain(run: Run):
    fine = _train_portion(run, _load_fine(run))
    cfg, pattern = train_config(run.cfg), pattern_spec(run.cfg)
    ext = _external(run, fine)
    norm = _fit_norm(fine, None)
    bc = pretrain_stage_c(fine, pattern, cfg, norm, ext)
    bf = pretrain_stage_f(fine, cfg, norm, ext)
    ckpt = CheckpointBundle(bc, bf, cfg, pattern, _grid_meta(fine), {"joint": []})
    save_checkpoint(run.output("pretrained.ckpt"), ckpt)


def cmd_train(run: Run):
    fine = _train_portion(run, _load_fine(run))
    cfg, pattern = train_config(run.cfg), pattern_spec(run.cfg)
    ext = _external(run, fine)
    if run.cfg["paths"]["checkpoint"]:
        # continue from a pretrained checkpoint with the joint phase only
        pre = load_checkpoint(run.input("checkpoint"))
        ckpt = joint_train(pre.stage_c, pre.stage_f, fine, pattern, cfg, external=ext)
    else:
        ckpt = train(fine, pattern, cfg, ext)
    save_checkpoint(run.output("model.ckpt"), ckpt)


def cmd_reconstruct(run: Run):
    ckpt = load_checkpoint(run.input("checkpoint"))
    observed, _ = load_series(run.input("observed"))
    mask = load_mask(run.input("mask"))
    pred = reconstruct(ckpt, observed, mask, _external(run, observed), run.cfg["seed"])
    save_series(run.output("prediction.stgr"), pred)


def cmd_eval(run: Run):
    ckpt = load_checkpoint(run.input("checkpoint"))
    series = _load_fine(run)
    truth = _eval_portion(run, series)
    pattern = pattern_spec(run.cfg)
    report = run_scenario(ckpt, truth, pattern, run.cfg["seed"], _external(run, truth))
    observed, mask = prepare_observation(truth, pattern)
    report.extra["baselines"] = {
        "nn_bilinear": mae_rmse(nn_bilinear_baseline(observed, mask), truth),
        "historical_mean": mae_rmse(
            historical_mean_baseline(_train_portion(run, series), truth.num_steps), truth
        ),
    }
    report.save(run.output("report.json"))
    log.info("MAE %.4f RMSE %.4f", report.mae, report.rmse)


def cmd_ablate(run: Run):
    series = _load_fine(run)
    full = load_checkpoint(run.input("checkpoint")) if run.cfg["paths"]["checkpoint"] else None
    variant = run.cfg["ablate"]["variant"]
    res = run_ablation(
        variant,
        _train_portion(run, series),
        _eval_portion(run, series),
        pattern_spec(run.cfg),
        train_config(run.cfg),
        run.cfg["seed"],
        # the swap variant replaces stage F by plain bilinear upsampling
        fine_model=bilinear_upsample if variant == "noFG-swap" else None,
        full_checkpoint=full,
    )
    out = res.to_json()
    for r in (out["full"], out["ablated"]):
        r.pop("runtime_s")  # keeps the artifact reproducible
    atomic_write_text(run.output("ablation.json"), json.dumps(out, indent=2, sort_keys=True))
    log.info("%s: relative MAE change %+.2f%%", res.variant, 100 * res.relative_change())


def cmd_export(run: Run):
    pred, _ = load_series(run.input("prediction"))
    step = run.cfg["export"]["step"]
    if step >= pred.num_steps:
        raise ConfigError("export.step", f"out of range for {pred.num_steps} steps")
    export_heatmap(pred, step, run.output(f"heatmap_{step}.png"), run.cfg["export"]["cmap"])
    run.outputs.append(str(run.out / f"heatmap_{step}.csv"))
    if run.cfg["paths"]["truth"]:
        truth, _ = load_series(run.input("truth"))
        export_error_map(pred, truth, step, run.output(f"error_{step}.png"))
        run.outputs.append(str(run.out / f"error_{step}.csv"))


HANDLERS = {name: globals()[f"cmd_{name}"] for name in COMMANDS}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stgrid", description="Two-stage diffusion reconstruction of fine-grained grid maps.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, help="YAML run configuration")
    ap.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    ap.add_argument("--out", default="run", help="output directory (default: ./run)")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = parse_config(args.config)
        if args.seed is not None:
            cfg = copy.deepcopy(cfg)
            cfg["seed"] = args.seed
            cfg = resolve(cfg)
        check_required(args.command, cfg)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        run = Run(args.command, cfg, out)
        run.inputs.append(str(Path(args.config)))
        atomic_write_text(run.output("config.resolved.yaml"), dump_config(cfg))
        HANDLERS[args.command](run)
        atomic_write_text(out / "manifest.json", json.dumps(run.manifest(), indent=2))
    except ConfigError as e:
        print(json.dumps({"error": "config", "field": e.path, "message": str(e)}), file=sys.stderr)
        return 2
    except (ValueError, OSError) as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
