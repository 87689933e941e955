"""Command-line entry point: ``symtrack <command> --config run.json``.

Exit codes: 0 success, 2 bad config, 3 numeric failure, 4 I/O failure. On
failure a single JSON object ``{"error": ..., "message": ..., "exit_code": ...}``
is written to stderr.
"""

from __future__ import annotations

import os

# deterministic single-threaded BLAS unless the caller says otherwise
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .census import param_census
from .config import ConfigError, RunConfig, config_hash, load_run_config
from .tensor import NumericError

EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 2, 3, 4
COMMANDS = ("gen-data", "pretrain", "adapt", "eval", "robust-eval", "grad-check", "param-census", "report")


def _emit(rec: dict) -> None:
    print(json.dumps(rec, sort_keys=True))


def _load(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_jsonl(records, path: Path) -> None:
    from .evaluate import write_jsonl

    write_jsonl(records, path)


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    from .evaluate import held_out_sequences
    from .synthdata import export_sequence, sequence_pool

    cfg = _load(args)
    out = _out(args)
    if args.split == "test":
        seqs = held_out_sequences(cfg)
    else:
        seqs = sequence_pool(cfg.data, cfg.train.n_sequences, cfg.seed)
    recs = []
    for i, seq in enumerate(seqs):
        path = export_sequence(seq.frames(), seq.spec, out / f"{args.split}_{i:03d}")
        recs.append({"index": i, "path": str(path), "seed": seq.spec.seed,
                     "frames": len(seq), "complementary": int((seq.codes != 0).sum())})
    _write_jsonl(recs, out / "gen-data.jsonl")
    _emit({"command": "gen-data", "split": args.split, "sequences": len(recs)})
    return 0


def cmd_pretrain(args) -> int:
    from .trainer import JsonlLog, pretrain

    cfg = _load(args)
    out = _out(args)
    log = JsonlLog(out / "pretrain_log.jsonl")
    ckpt = pretrain(cfg, steps=args.steps, logger=log)
    path = ckpt.save(out / "pretrain.ckpt")
    rec = {"command": "pretrain", "checkpoint": str(path), "content_hash": ckpt.content_hash,
           "steps": ckpt.meta["steps"], "config_hash": config_hash(cfg), "seed": cfg.seed}
    _write_jsonl([rec], out / "pretrain.jsonl")
    _emit(rec)
    return 0


def cmd_adapt(args) -> int:
    from .checkpoint import Checkpoint
    from .trainer import JsonlLog, ablated, adapt

    cfg = _load(args)
    if args.ablate:
        cfg = ablated(cfg)
    out = _out(args)
    pre = Checkpoint.load(args.pretrained)
    log = JsonlLog(out / "adapt_log.jsonl")
    ckpt = adapt(pre, cfg, steps=args.steps, logger=log)
    path = ckpt.save(out / "adapt.ckpt")
    rec = {"command": "adapt", "checkpoint": str(path), "content_hash": ckpt.content_hash,
           "steps": ckpt.meta["steps"], "config_hash": config_hash(cfg), "seed": cfg.seed,
           "ablated": bool(args.ablate)}
    _write_jsonl([rec], out / "adapt.jsonl")
    _emit(rec)
    return 0


def _eval_model(args, cfg: RunConfig):
    from .checkpoint import load_checkpoint
    from .model import SymTracker

    if args.blind:
        return None
    if args.checkpoint:
        return load_checkpoint(args.checkpoint)
    # untrained tracker: random weights drawn from the run seed
    model = SymTracker(cfg.model, np.random.default_rng(cfg.seed))
    model.init_adaptation(np.random.default_rng([cfg.seed, 1]))
    return model


def _run_eval(args, conditions, name: str) -> int:
    from .evaluate import run_eval, write_curves

    cfg = _load(args)
    out = _out(args)
    model = _eval_model(args, cfg)
    table, recs = run_eval(model, cfg, conditions)
    _write_jsonl(recs, out / f"{name}.jsonl")
    write_curves(table, out / f"{name}_curves.csv")
    for rec in recs:
        _emit({"command": name, "condition": rec["condition"], "success_auc": rec["success_auc"],
               "precision_20": rec["precision_20"], "f_score": rec["f_score"]})
    return 0


def cmd_eval(args) -> int:
    from .config import Perturbation

    return _run_eval(args, (Perturbation(kind="none", probability=0.0),), "eval")


def cmd_robust_eval(args) -> int:
    return _run_eval(args, None, "robust-eval")


def cmd_grad_check(args) -> int:
    from .gradsuite import OP_CASES, check_op, model_gradcheck

    cfg = _load(args)
    out = _out(args)
    recs, ok = [], True
    for k in range(args.seeds):
        seed = cfg.seed + k
        if not args.skip_ops:
            for name in OP_CASES:
                r = check_op(name, seed, tol=args.tol)
                recs.append({"check": name, "seed": seed, **r.as_dict()})
                ok &= r.passed
        r = model_gradcheck(cfg.model, seed, tol=args.tol, weights=cfg.loss, mask=cfg.mask,
                            per_tensor=args.per_tensor)
        recs.append({"check": "l_track", "seed": seed, **r.as_dict()})
        ok &= r.passed
    _write_jsonl(recs, out / "grad-check.jsonl")
    worst = max(recs, key=lambda r: r["max_rel_err"])
    _emit({"command": "grad-check", "max_rel_err": worst["max_rel_err"], "worst": worst["check"],
           "checks": len(recs), "pass": ok})
    if not ok:
        raise NumericError(f"gradient check failed: {worst['check']} max_rel_err {worst['max_rel_err']:.3g}")
    return 0


def cmd_param_census(args) -> int:
    cfg = _load(args)
    mode = args.mode or cfg.census_mode
    c = param_census(cfg.model, mode)
    rec = {"command": "param-census", **c.as_dict()}
    if args.out:
        _write_jsonl([rec], _out(args) / "param-census.jsonl")
    _emit(rec)
    return 0


def cmd_report(args) -> int:
    from .evaluate import read_jsonl

    out = _out(args)
    rows = []
    for path in args.inputs:
        for rec in read_jsonl(path):
            if "condition" in rec and "success_auc" in rec:
                rows.append((Path(path).stem, rec))
    if not rows:
        raise ConfigError("no metric records found in the given files")
    lines = ["| run | condition | success AUC | P@20 | Pr | Re | F |", "|---|---|---|---|---|---|---|"]
    for run, r in rows:
        lines.append(f"| {run} | {r['condition']} | {r['success_auc']:.4f} | {r['precision_20']:.4f} "
                     f"| {r['pr']:.4f} | {r['re']:.4f} | {r['f_score']:.4f} |")
    (out / "report.md").write_text("\n".join(lines) + "\n")
    with open(out / "report_precision.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "condition", "threshold_px", "precision"])
        for run, r in rows:
            for th, v in sorted(r["precision_at"].items(), key=lambda kv: int(kv[0])):
                w.writerow([run, r["condition"], th, v])
    print("\n".join(lines))
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="symtrack", description="Symmetric multimodal tracking toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, fn, help_text, out_default="runs"):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="run config JSON (strict; unknown keys are rejected)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", default=out_default, help="output directory (default: %(default)s)")
        p.set_defaults(func=fn)
        return p

    p = add("gen-data", cmd_gen_data, "export synthetic sequences as .npy frames plus manifests")
    p.add_argument("--split", choices=("train", "test"), default="test", help="which pool to export")
    p = add("pretrain", cmd_pretrain, "train the single-modality tracker")
    p.add_argument("--steps", type=int, help="optimizer steps (default: epochs from the config)")
    p = add("adapt", cmd_adapt, "adapter-tune the multimodal tracker on top of a pretrained checkpoint")
    p.add_argument("--pretrained", required=True, help="checkpoint written by pretrain")
    p.add_argument("--steps", type=int, help="optimizer steps (default: epochs from the config)")
    p.add_argument("--ablate", action="store_true", help="disable masking and self-distillation")
    for name, fn, text in (("eval", cmd_eval, "clean-condition tracking metrics"),
                           ("robust-eval", cmd_robust_eval, "metrics under every configured perturbation")):
        p = add(name, fn, text)
        p.add_argument("--checkpoint", help="checkpoint to evaluate (default: untrained random model)")
        p.add_argument("--blind", action="store_true", help="evaluate the blind centre-prior tracker")
    p = add("grad-check", cmd_grad_check, "finite-difference gradient checks in float64")
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds (default: %(default)s)")
    p.add_argument("--tol", type=float, default=1e-3, help="max relative error (default: %(default)s)")
    p.add_argument("--skip-ops", action="store_true", help="only check the full training loss")
    p.add_argument("--per-tensor", type=int, help="random scalars probed per parameter tensor (default: all)")
    p = add("param-census", cmd_param_census, "count total and tuned parameters", out_default=None)
    p.add_argument("--mode", choices=("frozen", "cma", "mfa", "cma+mfa"), help="adapter layout to count")
    p = add("report", cmd_report, "render metric tables and curve CSVs from JSON-lines results")
    p.add_argument("inputs", nargs="+", help="JSON-lines files written by eval or robust-eval")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, NumericError, OSError) as exc:
        code, kind = _classify(exc)
        print(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc),
                          "exit_code": code}), file=sys.stderr)
        return code


def _classify(exc: Exception) -> tuple[int, str]:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG, "config"
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC, "numeric"
    return EXIT_IO, "io"


if __name__ == "__main__":
    sys.exit(main())
