"""Command line entry point: ``gkd run`` and ``gkd evaluate``.

Failures exit nonzero and print one JSON error record on stderr.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import torch

from . import nets as N
from .checkpoint import Checkpoint, has_checkpoint
from .config import ExperimentConfig, normalize_phase
from .errors import ConfigError, GKDError, LoadError
from .metrics import MetricsReport, evaluate_predictions, fsd, gap_row, report_dict, reports_to_csv, reports_to_table
from .report import dump_masks, plot_loss_curves, plot_metric_bars
from .synthdata import domain_shift, make_dataset
from .tensorio import write_json
from .trainer import P1, P2, P3, P4, PREREQUISITES, Trainer, latent_pairs, predict

log = logging.getLogger("gkd")

OUTPUT_ENV = "GKD_OUTPUT_DIR"
EXIT_CONFIG = 2
EXIT_FAILURE = 1
SEGNETS = ("teacher", "student", "distilled")
HEADER_FOR = {"teacher": "tan", "student": "san", "distilled": "san"}


class OutputLock:
    """Exclusive lock file; a second run on the same directory fails fast."""

    def __init__(self, directory):
        self.path = Path(directory) / ".gkd.lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(f"output directory {self.path.parent} is locked by another run ({self.path})") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        with contextlib.suppress(FileNotFoundError):
            self.path.unlink()


def build_data(cfg: ExperimentConfig):
    d = cfg.raw["data"]
    data = make_dataset(d["seed_a"], d["seed_b"], d["n_train"], d["n_test"], size=cfg.net.input_size,
                        spec_a=cfg.domain_a, spec_b=cfg.domain_b)
    shift = domain_shift(data["test_A"], data["test_B"])
    if shift <= d["shift_threshold"]:
        raise ConfigError(f"domains A and B barely differ (shift {shift:.4f} <= {d['shift_threshold']})")
    return data


def resolve_output(cfg: ExperimentConfig, flag):
    if flag:
        return Path(flag)
    if os.environ.get(OUTPUT_ENV):
        return Path(os.environ[OUTPUT_ENV])
    return cfg.output_dir


def check_prerequisites(phases, out_dir):
    """Fail before any computation if a requested phase cannot be satisfied."""
    for phase in phases:
        for pre in PREREQUISITES[phase]:
            if pre not in phases and not has_checkpoint(out_dir, pre):
                short = pre.split("_", 1)[0]
                raise ConfigError(f"phase {phase} requires a {pre} checkpoint in {out_dir}, none found",
                                  missing_phase=short)


def _meta(cfg):
    return {"config_hash": cfg.config_hash, "net_hash": cfg.net_hash}


# -- run -------------------------------------------------------------------

def cmd_run(args):
    cfg = ExperimentConfig.load(args.config)
    phases = [normalize_phase(p) for p in args.phases.split(",")] if args.phases else None
    out_dir = resolve_output(cfg, args.output_dir)
    cfg = cfg.with_overrides(seed=args.seed, output_dir=out_dir, phases=phases)
    if args.eval_only:
        targets = [p for p in (P4, P2) if has_checkpoint(out_dir, p) and p in cfg.phases]
        if not targets:
            raise ConfigError(f"no P2 or P4 checkpoint to evaluate in {out_dir}", missing_phase="P2")
        with OutputLock(out_dir):
            for phase in targets:
                evaluate(cfg, out_dir, phase, ("test_A", "test_B"), args.dump_masks)
        return 0
    check_prerequisites(cfg.phases, out_dir)
    with OutputLock(out_dir):
        (out_dir / "config.yaml").write_text(f"# config_hash={cfg.config_hash}\n" + cfg.dump())
        data = build_data(cfg)
        nets = N.GKDNets(cfg.net, seed=cfg.train.seed)
        trainer = Trainer(nets, data, cfg.train, cfg.loss, run_dir=out_dir, meta=_meta(cfg))
        timings = {}
        for phase in cfg.phases:
            t0 = time.perf_counter()
            trainer.run([phase])
            timings[phase] = round(time.perf_counter() - t0, 3)
            log.info("%s done in %.1fs", phase, timings[phase])
        plot_loss_curves(trainer.log, out_dir / "loss_curves.png", cfg.config_hash)
        write_json(out_dir / "run_manifest.json", {
            "config_hash": cfg.config_hash,
            "net_hash": cfg.net_hash,
            "seeds": cfg.seeds(),
            "phases": list(cfg.phases),
            "seconds": timings,
        })
    print(json.dumps({"status": "ok", "config_hash": cfg.config_hash, "output_dir": str(out_dir),
                      "phases": list(cfg.phases)}))
    return 0


# -- evaluate --------------------------------------------------------------

def _load_compatible(cfg, run_dir, phase):
    ckpt = Checkpoint.load(run_dir, phase)
    recorded = ckpt.meta.get("net_hash")
    if recorded is not None and recorded != cfg.net_hash:
        raise LoadError(f"checkpoint {run_dir}/{phase} was written for network config {recorded}, "
                        f"the requested config has {cfg.net_hash}")
    return ckpt


def evaluate(cfg: ExperimentConfig, run_dir, phase, datasets, dump_count=0, out_dir=None):
    """Evaluate the segmentation networks stored in ``phase``; returns report rows."""
    run_dir = Path(run_dir)
    out_dir = Path(out_dir or run_dir) / f"eval_{phase}"
    ckpt = _load_compatible(cfg, run_dir, phase)
    models = [c for c in ckpt.components() if c in SEGNETS]
    if not models:
        raise ConfigError(f"checkpoint {phase} holds no segmentation network (components: {ckpt.components()})")
    nets = N.GKDNets(cfg.net, seed=cfg.train.seed)
    trainer = Trainer(nets, {}, cfg.train, cfg.loss)
    trainer.load_checkpoint(ckpt)
    with_fsd = has_checkpoint(run_dir, P1) and has_checkpoint(run_dir, P3)
    if with_fsd:
        for extra in (P1, P3):
            trainer.load_checkpoint(_load_compatible(cfg, run_dir, extra))
    data = build_data(cfg)
    thr, eps = cfg.raw["eval"]["threshold"], cfg.raw["eval"]["fsd_eps"]
    rows = []
    with torch.no_grad():
        for name in models:
            model = trainer.distilled if name == "distilled" else nets.component(name)
            per_set = []
            for ds in datasets:
                preds, masks = predict(model, data[ds])
                vals = evaluate_predictions(preds, masks, thr)
                value = math.nan
                if with_fsd and len(data[ds]) > cfg.net.latent_dim:
                    lat, lat_y = latent_pairs(model, nets.component(HEADER_FOR[name]), nets.psae, data[ds])
                    value = max(fsd(lat, lat_y, eps), 0.0)
                row = MetricsReport(name, ds, fsd=value, **vals)
                rows.append(row)
                per_set.append(row)
                if dump_count:
                    dump_masks(preds, masks, out_dir / "masks", f"{name}_{ds}", dump_count, cfg.config_hash)
            if len(per_set) == 2:
                rows.append(gap_row(*per_set))
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_text = reports_to_csv(rows, cfg.config_hash)
    (out_dir / "report.csv").write_text(csv_text)
    (out_dir / "report.txt").write_text(reports_to_table(rows, cfg.config_hash))
    write_json(out_dir / "report.json", {"config_hash": cfg.config_hash, "phase": phase,
                                         "rows": [_jsonable(report_dict(r)) for r in rows]})
    plot_metric_bars(rows, out_dir / "metrics.png", cfg.config_hash)
    sys.stdout.write(csv_text)
    return rows


def _jsonable(d):
    return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in d.items()}


def cmd_evaluate(args):
    cfg = ExperimentConfig.load(args.config)
    run_dir = Path(args.checkpoint_dir) if args.checkpoint_dir else resolve_output(cfg, None)
    out_dir = resolve_output(cfg, args.output_dir) if (args.output_dir or os.environ.get(OUTPUT_ENV)) else run_dir
    datasets = tuple(dict.fromkeys(args.datasets.split(",")))
    for ds in datasets:
        if ds not in ("test_A", "test_B"):
            raise ConfigError(f"unknown dataset {ds!r}; expected test_A and/or test_B")
    phase = normalize_phase(args.phase)
    if not has_checkpoint(run_dir, phase):
        raise ConfigError(f"no {phase} checkpoint in {run_dir}", missing_phase=phase.split("_", 1)[0])
    with OutputLock(out_dir):
        evaluate(cfg, run_dir, phase, datasets, args.dump_masks, out_dir)
    return 0


# -- plumbing --------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="gkd", description="Generalizable distillation pipeline", allow_abbrev=False)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train phases", allow_abbrev=False)
    run.add_argument("--config", required=True, help="YAML experiment config")
    run.add_argument("--phases", help="comma list, e.g. P1,P2 (default: from config)")
    run.add_argument("--seed", type=int, help="override train.seed")
    run.add_argument("--output-dir", help=f"override output_dir (else ${OUTPUT_ENV}, else config)")
    run.add_argument("--eval-only", action="store_true", help="skip training, evaluate existing checkpoints")
    run.add_argument("--dump-masks", type=int, default=0, metavar="N", help="with --eval-only: masks to write per set")
    run.set_defaults(func=cmd_run)

    ev = sub.add_parser("evaluate", help="evaluate a checkpoint", allow_abbrev=False)
    ev.add_argument("--config", required=True)
    ev.add_argument("--phase", default=P4, help="checkpoint phase holding the networks (P2 or P4)")
    ev.add_argument("--checkpoint-dir", help="run directory holding the checkpoints (default: output dir)")
    ev.add_argument("--datasets", default="test_A,test_B")
    ev.add_argument("--output-dir", help="where reports go (default: the run directory)")
    ev.add_argument("--dump-masks", type=int, default=0, metavar="N")
    ev.set_defaults(func=cmd_evaluate)
    return parser


def error_record(exc):
    rec = {"status": "error", "error": type(exc).__name__, "message": str(exc)}
    missing = getattr(exc, "missing_phase", None)
    if missing:
        rec["missing_phase"] = missing.split("_", 1)[0]
    return rec


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    torch.set_num_threads(max(1, min(4, os.cpu_count() or 1)))
    try:
        return args.func(args)
    except GKDError as exc:
        sys.stderr.write(json.dumps(error_record(exc)) + "\n")
        return EXIT_CONFIG if isinstance(exc, ConfigError) else EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
