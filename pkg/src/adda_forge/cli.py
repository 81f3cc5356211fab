"""``adda-forge`` command line.

Subcommands: run, pretrain, infer, bag, ablate, sweep-z, verify. All outputs go
under ``--out-dir`` (default: the config's ``[output] dir`` or ``./adda-out``).

Exit codes: 0 success, 1 failed checks or training errors, 2 bad config or
missing inputs.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import verify as verify_mod
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigFileError, ExperimentConfig, load_config
from .errors import AddaError, ConfigError
from .models import EncoderModel
from .pipeline import (BaggedModel, accuracy, bagged_infer, infer, is_valid_pairing,
                       pretrain_source, run_experiment)

log = logging.getLogger("adda_forge")

METRICS_HEADER = ["iteration", "disc_loss", "enc_loss", "val_accuracy", "wall_ms"]
ABLATION_HEADER = ["disc_variant", "enc_variant", "target_reg", "seeds", "mean_acc", "std_acc"]
SWEEP_HEADER = ["z", "val_accuracy"]
PREDICTIONS_HEADER = ["index", "prediction", "label"]


class CsvLog:
    """CSV file with a fixed header; appending to an existing file checks the header first."""

    def __init__(self, path, header):
        self.path = Path(path)
        self.header = list(header)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if self.path.exists() and self.path.stat().st_size > 0:
            with open(self.path, newline="") as fh:
                existing = next(csv.reader(fh), None)
            if existing != self.header:
                raise ConfigError(f"{self.path} has header {existing}, expected {self.header}")
        else:
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(self.header)

    def append(self, row: dict) -> None:
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([_fmt(row.get(k)) for k in self.header])


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def write_summary(path, values: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{k}={_fmt(v)}\n" for k, v in values.items()), encoding="utf-8")


def read_summary(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k] = v
    return out


def _worker_cap(requested: int) -> int:
    cap = os.environ.get("ADDA_FORGE_THREADS")
    n = max(1, requested)
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise ConfigError(f"ADDA_FORGE_THREADS must be an integer, got {cap!r}") from None
    return n


def _experiment(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _out_dir(args, cfg: ExperimentConfig | None) -> Path:
    if args.out_dir:
        return Path(args.out_dir)
    if cfg is not None and cfg.out_dir:
        return cfg.out_dir
    return Path("adda-out")


def _load_encoder(path) -> EncoderModel:
    model, _ = load_checkpoint(path)
    if not isinstance(model, EncoderModel):
        raise ConfigError(f"{path} holds a discriminator, expected an encoder")
    return model


def _base_summary(cfg: ExperimentConfig) -> dict:
    a = cfg.adapt
    return {"seed": a.seed, "disc_variant": a.disc_variant, "enc_variant": a.enc_variant,
            "target_reg": a.target_reg, "z": a.z, "step2_iters": a.step2_iters}


# -- subcommands ----------------------------------------------------------------

def cmd_run(args) -> int:
    cfg = _experiment(args)
    out = _out_dir(args, cfg)
    source, target, eval_set = cfg.load_data()
    source_enc = _load_encoder(args.checkpoint[0]) if args.checkpoint else None
    if source_enc is not None:
        source_enc.freeze()
    metrics_path = out / "metrics.csv"
    if metrics_path.exists():
        metrics_path.unlink()
    metrics = CsvLog(metrics_path, METRICS_HEADER)
    result = run_experiment(cfg.adapt, cfg.arch, source, target, eval_set, source_enc, metrics.append)
    ckpt = out / "checkpoints"
    meta = {"seed": cfg.adapt.seed, "iteration": cfg.adapt.step2_iters}
    save_checkpoint(ckpt / "source.ckpt", result.source_encoder, meta)
    save_checkpoint(ckpt / "target.ckpt", result.target_encoder,
                    {**meta, "target_reg": int(cfg.adapt.target_reg)})
    save_checkpoint(ckpt / "discriminator.ckpt", result.discriminator, meta)
    write_summary(out / "summary.txt", {**_base_summary(cfg), **result.summary()})
    print(f"final_accuracy={result.final_accuracy:.4f} source_only_accuracy="
          f"{result.source_only_accuracy:.4f} -> {out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _experiment(args)
    out = _out_dir(args, cfg)
    source, _, eval_set = cfg.load_data()
    enc = pretrain_source(cfg.adapt, source, cfg.arch)
    save_checkpoint(out / "checkpoints" / "source.ckpt", enc, {"iteration": cfg.adapt.step1_iters})
    summary = {"seed": cfg.adapt.seed, "step1_iters": cfg.adapt.step1_iters,
               "source_accuracy": infer(enc, source)[1], "source_only_accuracy": infer(enc, eval_set)[1]}
    write_summary(out / "summary.txt", summary)
    print(f"source_accuracy={summary['source_accuracy']:.4f} -> {out / 'checkpoints' / 'source.ckpt'}")
    return 0


def _write_predictions(path, preds, labels) -> None:
    if path.exists():
        path.unlink()
    log_ = CsvLog(path, PREDICTIONS_HEADER)
    for i, (p, y) in enumerate(zip(preds, labels)):
        log_.append({"index": i, "prediction": int(p), "label": int(y)})


def cmd_infer(args) -> int:
    if not args.checkpoint:
        raise ConfigError("infer needs --checkpoint pointing at an encoder")
    cfg = _experiment(args)
    out = _out_dir(args, cfg)
    _, _, eval_set = cfg.load_data()
    enc = _load_encoder(args.checkpoint[0])
    preds, acc = infer(enc, eval_set)
    _write_predictions(out / "predictions.csv", preds, eval_set.y)
    write_summary(out / "summary.txt", {"checkpoint": args.checkpoint[0], "final_accuracy": acc})
    print(f"final_accuracy={acc:.4f}")
    return 0


def cmd_bag(args) -> int:
    if not args.checkpoint or len(args.checkpoint) != 2:
        raise ConfigError("bag needs exactly two --checkpoint values: the model trained with "
                          "target regularization first, then the one without")
    cfg = _experiment(args)
    out = _out_dir(args, cfg)
    _, _, eval_set = cfg.load_data()
    bag = BaggedModel(_load_encoder(args.checkpoint[0]), _load_encoder(args.checkpoint[1]))
    preds = bagged_infer(bag, eval_set)
    _write_predictions(out / "predictions.csv", preds, eval_set.y)
    summary = {"reg_accuracy": infer(bag.model_reg, eval_set)[1],
               "noreg_accuracy": infer(bag.model_noreg, eval_set)[1],
               "final_accuracy": accuracy(preds, eval_set.y)}
    write_summary(out / "summary.txt", summary)
    print(f"final_accuracy={summary['final_accuracy']:.4f}")
    return 0


def _ablation_cell(job):
    cfg, disc, enc, reg, seeds, sources = job
    accs = []
    for seed in seeds:
        run_cfg = cfg.with_seed(seed)
        run_cfg = replace(run_cfg, adapt=replace(run_cfg.adapt, disc_variant=disc, enc_variant=enc, target_reg=reg))
        source, target, eval_set = run_cfg.load_data()
        res = run_experiment(run_cfg.adapt, run_cfg.arch, source, target, eval_set, sources[seed])
        accs.append(res.final_accuracy)
    return accs


def cmd_ablate(args) -> int:
    cfg = _experiment(args)
    out = _out_dir(args, cfg)
    spec = cfg.ablate
    seeds = (args.seed,) if args.seed is not None else spec["seeds"]
    cells = [(d, e, r) for d in spec["disc_variants"] for e in spec["enc_variants"] for r in spec["target_reg"]]
    path = out / "ablation.csv"
    if path.exists():
        path.unlink()
    table = CsvLog(path, ABLATION_HEADER)
    valid = [c for c in cells if is_valid_pairing(c[0], c[1])]
    sources, src_accs = {}, []
    if valid:
        for seed in seeds:
            run_cfg = cfg.with_seed(seed)
            source, _, eval_set = run_cfg.load_data()
            sources[seed] = pretrain_source(run_cfg.adapt, source, run_cfg.arch)
            src_accs.append(infer(sources[seed], eval_set)[1])
    jobs = [(cfg, d, e, r, seeds, sources) for d, e, r in valid]
    workers = min(_worker_cap(args.workers), max(1, len(jobs)))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_ablation_cell, jobs))
    else:
        results = [_ablation_cell(j) for j in jobs]
    by_cell = dict(zip(valid, results))
    seed_text = ";".join(str(s) for s in seeds)
    for d, e, r in cells:
        accs = by_cell.get((d, e, r))
        if accs is None:
            print(f"warning: {d} x {e} is not a valid discriminator/encoder pairing; row left as nan",
                  file=sys.stderr)
            mean = std = float("nan")
        else:
            mean, std = float(np.mean(accs)), float(np.std(accs))
        table.append({"disc_variant": d, "enc_variant": e, "target_reg": r, "seeds": seed_text,
                      "mean_acc": mean, "std_acc": std})
    summary = {"cells": len(cells), "valid_cells": len(valid), "seeds": seed_text}
    if src_accs:
        summary["source_only_mean_acc"] = float(np.mean(src_accs))
    write_summary(out / "summary.txt", summary)
    print(f"{len(cells)} cells -> {path}")
    return 0


def cmd_sweep_z(args) -> int:
    cfg = _experiment(args)
    out = _out_dir(args, cfg)
    z_values = cfg.z_values
    if args.z:
        z_values = tuple(float(z) for z in args.z.split(","))
        bad = [z for z in z_values if not 0.0 < z <= 1.0]
        if bad:
            raise ConfigError(f"--z values must lie in (0, 1], got {bad}")
    source, target, eval_set = cfg.load_data()
    if args.checkpoint:
        source_enc = _load_encoder(args.checkpoint[0]).freeze()
    else:
        source_enc = pretrain_source(cfg.adapt, source, cfg.arch)
    path = out / "sweep_z.csv"
    if path.exists():
        path.unlink()
    table = CsvLog(path, SWEEP_HEADER)
    for z in z_values:
        # z = 1 is the uncorrupted run
        adapt = replace(cfg.adapt, z=z)
        res = run_experiment(adapt, cfg.arch, source, target, eval_set, source_enc)
        table.append({"z": z, "val_accuracy": res.val_accuracy})
        print(f"z={z}: val_accuracy={res.val_accuracy:.4f}")
    return 0


def cmd_verify(args) -> int:
    failed = []
    for result in verify_mod.run_all():
        print(result.line(), flush=True)
        if not result.passed:
            failed.append(result.name)
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(failed)}")
        return 1
    print("all checks passed")
    return 0


COMMANDS = {"run": cmd_run, "pretrain": cmd_pretrain, "infer": cmd_infer, "bag": cmd_bag,
            "ablate": cmd_ablate, "sweep-z": cmd_sweep_z, "verify": cmd_verify}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adda-forge", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {"run": "pretrain (or load --checkpoint), adapt, evaluate",
             "pretrain": "train and save the source encoder only",
             "infer": "evaluate an encoder checkpoint on the eval set",
             "bag": "confidence-weighted inference from two encoder checkpoints (reg, noreg)",
             "ablate": "run the [ablate] matrix and write ablation.csv",
             "sweep-z": "one adaptation run per corruption keep probability",
             "verify": "run the invariant battery"}
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        if name == "verify":
            continue
        p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--seed", type=int, help="override [adapt] seed (ablate: run only this seed)")
        p.add_argument("--out-dir", help="output directory")
        p.add_argument("--checkpoint", action="append", help="encoder checkpoint (repeat for bag)")
        p.add_argument("--workers", type=int, default=1, help="parallel ablation cells")
        if name == "sweep-z":
            p.add_argument("--z", help="comma-separated keep probabilities (overrides [sweep] z_values)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigFileError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (AddaError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
