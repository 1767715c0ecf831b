"""Command-line harness: experiment orchestration and artifact emission.

Verbs: train, spectrum, normlab, calibrate, eval-ppl, eval-passkey, compare.
Configuration comes from built-in defaults, optionally overlaid by a JSON
config file (--config) and then by --set key=value flags, which win. Every
run creates an output directory (default under $SSMLAB_OUT or ./runs) and
always writes a manifest there, even when the command fails partway.

Exit codes: 0 success, 2 configuration error, 3 numeric failure
(overflow or divergence), 4 I/O error.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .calibrate import (
    CalibrationConfig,
    CalibrationDivergedError,
    ScalingFactors,
    constant_factors,
    grad_calibrate,
    init_factors,
    resolve_scales,
    spsa_calibrate,
)
from .model import (
    CheckpointError,
    ToyModelConfig,
    TrainDivergedError,
    build_model,
    load_checkpoint,
    perplexity_by_length,
    save_checkpoint,
    train,
)
from .quad import IntegrationError
from .scan import ScanOverflowError
from .spectrum import model_spectrum
from .statenorm import (
    LambdaLaw,
    NormExperiment,
    simulate_state_norm,
    track_model_state_norms,
)
from .tasks import (
    PASSKEY_VOCAB,
    copy_batches,
    lm_batches,
    load_text_corpus,
    passkey_batches,
    passkey_grid_eval,
    synthetic_corpus,
)

OUTPUT_ROOT_ENV = "SSMLAB_OUT"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

FACTOR_FORMAT = "ssmlab-scaling-factors-v1"


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


DEFAULTS: dict = {
    "seed": 0,
    "threads": 1,
    "model": {
        "vocab_size": 256,
        "d_m": 128,
        "d_h": 16,
        "n_layers": 4,
        "variant": "mamba",
        "heads": None,
        "train_length": 256,
        "gated": False,
        "a_init_range": [0.05, 8.0],
        "train_dynamics": True,
    },
    "task": {
        "kind": "text",          # text | copy | passkey
        "corpus_path": None,     # file of raw bytes; None -> seeded babble
        "corpus_tokens": 500_000,
        "corpus_seed": 100,
        "pattern_len": 8,
    },
    "train": {
        "steps": 1200,
        "batch_size": 8,
        "lr": 3e-3,
        "data_seed": 1,
    },
    "calibration": {
        "method": "spsa",        # spsa | grad
        "target": "a",           # a | delta
        "granularity": "layer",  # layer | channel | head
        "init": "uniform",       # uniform in (0, 1] | ones (start at identity)
        "c": 0.01,
        "eta": 0.05,
        "iterations": 300,
        "samples": 20,
        "length": 2048,
        "seed": 0,
        "corpus_seed": 300,
    },
    "eval": {
        "lengths": [256, 512, 1024, 2048],
        "depths": [0.1, 0.3, 0.5, 0.7, 0.9],
        "n_per_cell": 20,
        "max_windows": 8,
        "corpus_seed": 200,
        "grid_seed": 7,
    },
    "normlab": {
        "d": 512,
        "m": 512,
        "t_max": 5000,
        "trials": 64,
        "lam_min": 0.5,
        "lam_max": 0.9,
        "sigma_b2": None,        # None -> 1 / (2 d)
        "trace_stride": 10,
        "lengths": [256, 512, 1024, 2048, 4096],
        "n_sequences": 2,
    },
    "compare": {
        "constant_a": 2.0,
        "constant_delta": 0.5,
    },
}


# --------------------------------------------------------------------------
# configuration plumbing

def _deep_merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown configuration key: {where}")
        if isinstance(base[key], dict) and not isinstance(val, dict):
            raise ConfigError(f"{where} must be a table of settings")
        if isinstance(base[key], dict):
            out[key] = _deep_merge(base[key], val, where)
        else:
            out[key] = val
    return out


def _parse_set(flag: str) -> dict:
    if "=" not in flag:
        raise ConfigError(f"--set needs key=value, got {flag!r}")
    key, raw = flag.split("=", 1)
    try:
        val = json.loads(raw)
    except json.JSONDecodeError:
        val = raw
    node: dict = {}
    cur = node
    parts = key.strip().split(".")
    for part in parts[:-1]:
        cur[part] = {}
        cur = cur[part]
    cur[parts[-1]] = val
    return node


def build_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if getattr(args, "config", None):
        try:
            with open(args.config) as f:
                file_cfg = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(
                f"{args.config}: invalid JSON at line {exc.lineno}, column {exc.colno}"
            ) from exc
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
        cfg = _deep_merge(cfg, file_cfg)
    for flag in getattr(args, "set", None) or []:
        cfg = _deep_merge(cfg, _parse_set(flag))
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "threads", None) is not None:
        cfg["threads"] = args.threads
    return cfg


def make_outdir(args, command: str, seed: int) -> Path:
    if getattr(args, "out", None):
        outdir = Path(args.out)
    else:
        root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
        stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S")
        outdir = root / f"{command}_{stamp}_{seed}"
    outdir.mkdir(parents=True, exist_ok=True)
    return outdir


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path: Path, header: list[str], rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def write_manifest(outdir: Path, command: str, cfg: dict, status: str,
                   wall: float, error: str | None = None) -> None:
    manifest = {
        "command": command,
        "config": cfg,
        "seed": cfg.get("seed"),
        "version": __version__,
        "status": status,
        "wall_time_s": round(wall, 3),
        "error": error,
    }
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def save_factors(path: Path, factors: ScalingFactors, cfg: dict) -> None:
    blob = {
        "format": FACTOR_FORMAT,
        "target": factors.target,
        "granularity": factors.granularity,
        "seed": cfg["calibration"]["seed"],
        "config": {k: cfg["calibration"][k]
                   for k in ("method", "c", "eta", "iterations", "samples", "length")},
        "layers": [factors.values[:, i].tolist() for i in range(factors.n_layers)],
    }
    path.write_text(json.dumps(blob, indent=2, sort_keys=True))


def load_factors(path) -> ScalingFactors:
    try:
        blob = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read factors file: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid factors JSON ({exc})") from exc
    if blob.get("format") != FACTOR_FORMAT:
        raise ConfigError(f"{path}: not a scaling-factors artifact")
    values = np.array(blob["layers"], dtype=float).T
    return ScalingFactors(values=values, target=blob["target"],
                          granularity=blob["granularity"])


# --------------------------------------------------------------------------
# shared pieces

def _model_config(cfg: dict) -> ToyModelConfig:
    m = cfg["model"]
    try:
        return ToyModelConfig(
            vocab_size=m["vocab_size"], d_m=m["d_m"], d_h=m["d_h"],
            n_layers=m["n_layers"], variant=m["variant"], heads=m["heads"],
            train_length=m["train_length"], gated=m["gated"], seed=cfg["seed"],
            a_init_range=tuple(m["a_init_range"]),
            train_dynamics=m["train_dynamics"],
        )
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from exc


def _corpus(cfg: dict, seed_key: str, n_tokens: int | None = None) -> np.ndarray:
    task = cfg["task"]
    if task["corpus_path"]:
        return load_text_corpus(task["corpus_path"]).astype(np.int64)
    n = n_tokens if n_tokens is not None else task["corpus_tokens"]
    return synthetic_corpus(n, seed=cfg[seed_key[0]][seed_key[1]]).astype(np.int64)


def _load_model(path) -> "ToyModel":
    return load_checkpoint(path)


def _calib_data(model, cfg: dict):
    cal = cfg["calibration"]
    length = int(cal["length"])
    n = int(cal["samples"])
    if cfg["task"]["kind"] == "passkey":
        batch_fn = passkey_batches(length, n, seed=cal["corpus_seed"])
        inputs, targets, mask = batch_fn(0)
        seqs = [np.concatenate([inputs[i], targets[i, -1:]]) for i in range(n)]
        masks = [np.concatenate([[False], mask[i]]) for i in range(n)]
        return seqs, masks
    if cfg["task"]["corpus_path"]:
        corpus = load_text_corpus(cfg["task"]["corpus_path"]).astype(np.int64)
    else:
        corpus = synthetic_corpus(n * (length + 1) + 1, seed=cal["corpus_seed"]).astype(np.int64)
    if corpus.shape[0] < n * (length + 1):
        raise ConfigError(
            f"calibration corpus has {corpus.shape[0]} tokens, "
            f"needs {n * (length + 1)}"
        )
    seqs = [corpus[i * (length + 1):(i + 1) * (length + 1)] for i in range(n)]
    return seqs, None


def _run_calibration(model, cfg: dict, target: str, outdir: Path | None,
                     tag: str = "") -> ScalingFactors:
    cal = cfg["calibration"]
    seqs, masks = _calib_data(model, cfg)
    ccfg = CalibrationConfig(
        calib_set=seqs, c=cal["c"], eta=cal["eta"],
        iterations=int(cal["iterations"]), seed=int(cal["seed"]), masks=masks,
    )
    d_s = 1
    if cal["granularity"] == "channel":
        d_s = model.cfg.d_h
    elif cal["granularity"] == "head":
        d_s = model.cfg.heads or 1
    if cal["init"] == "ones":
        s0 = ScalingFactors(values=np.ones((d_s, model.cfg.n_layers)),
                            target=target, granularity=cal["granularity"])
    elif cal["init"] == "uniform":
        s0 = init_factors(model.cfg.n_layers, d_s, seed=int(cal["seed"]),
                          target=target, granularity=cal["granularity"])
    else:
        raise ConfigError(f"calibration.init must be uniform or ones, got {cal['init']!r}")
    if cal["method"] == "grad":
        factors, trace = grad_calibrate(model, ccfg, s0)
    elif cal["method"] == "spsa":
        factors, trace = spsa_calibrate(model, ccfg, s0)
    else:
        raise ConfigError(f"calibration.method must be spsa or grad, got {cal['method']!r}")
    if outdir is not None:
        suffix = f"_{tag}" if tag else ""
        rows = [
            (k, trace[k], float(factors.values.min()), float(factors.values.max()))
            for k in range(len(trace))
        ]
        write_csv(outdir / f"calibration_trace{suffix}.csv",
                  ["iteration", "loss", "min_S", "max_S"], rows)
        save_factors(outdir / f"scaling_factors{suffix}.json", factors, cfg)
    return factors


def _batch_fn_for_task(model, cfg: dict):
    task = cfg["task"]
    tr = cfg["train"]
    length = model.cfg.train_length
    if task["kind"] == "text":
        corpus = _corpus(cfg, ("task", "corpus_seed"))
        return lm_batches(corpus, length, tr["batch_size"], seed=tr["data_seed"])
    if task["kind"] == "copy":
        vocab = min(model.cfg.vocab_size, 16)
        return copy_batches(length, task["pattern_len"], tr["batch_size"],
                            seed=tr["data_seed"], vocab=vocab)
    if task["kind"] == "passkey":
        if model.cfg.vocab_size < PASSKEY_VOCAB:
            raise ConfigError(
                f"passkey task needs vocab_size >= {PASSKEY_VOCAB}"
            )
        return passkey_batches(length, tr["batch_size"], seed=tr["data_seed"])
    raise ConfigError(f"task.kind must be text, copy or passkey, got {task['kind']!r}")


# --------------------------------------------------------------------------
# commands

def cmd_train(args, cfg: dict, outdir: Path) -> None:
    model = build_model(_model_config(cfg))
    batch_fn = _batch_fn_for_task(model, cfg)
    curve = train(model, batch_fn, steps=int(cfg["train"]["steps"]),
                  lr=float(cfg["train"]["lr"]))
    save_checkpoint(model, outdir / "checkpoint.ssmx")
    write_csv(outdir / "loss_curve.csv", ["step", "loss"],
              [(i, v) for i, v in enumerate(curve)])
    print(f"trained {len(curve)} steps, final loss {curve[-1]:.4f} -> {outdir}")


def cmd_spectrum(args, cfg: dict, outdir: Path) -> None:
    model = _load_model(args.checkpoint)
    report = model_spectrum(model)
    k = report.eigenvalues.shape[1]
    write_csv(
        outdir / "spectrum_heatmap.csv",
        ["layer"] + [f"r{i}" for i in range(k)],
        [(i, *report.eigenvalues[i]) for i in range(report.n_layers)],
    )
    write_csv(
        outdir / "spectrum_summary.csv",
        ["layer", "lam_max", "lam_min", "frac_above_099", "frac_below_001"],
        [(i, report.lam_max[i], report.lam_min[i],
          report.frac_above_099[i], report.frac_below_001[i])
         for i in range(report.n_layers)],
    )
    print(f"spectrum over {report.n_layers} layers -> {outdir}")


def cmd_normlab(args, cfg: dict, outdir: Path) -> None:
    nl = cfg["normlab"]
    if args.checkpoint:
        model = _load_model(args.checkpoint)
        lengths = nl["lengths"]
        corpus = _corpus(cfg, ("eval", "corpus_seed"),
                         n_tokens=max(lengths) * nl["n_sequences"] + 1)
        factors = load_factors(args.factors) if args.factors else None
        rows = track_model_state_norms(model, corpus, lengths,
                                       scales=resolve_scales(factors, model),
                                       n_sequences=nl["n_sequences"])
        write_csv(outdir / "state_norms.csv",
                  ["length", "layer", "max_norm", "min_norm"], rows)
        print(f"state norms over lengths {lengths} -> {outdir}")
        return
    sigma_b2 = nl["sigma_b2"]
    if sigma_b2 is None:
        sigma_b2 = 1.0 / (2.0 * nl["d"])
    law = (LambdaLaw("degenerate", nl["lam_min"], nl["lam_min"])
           if nl["lam_min"] == nl["lam_max"]
           else LambdaLaw("uniform", nl["lam_min"], nl["lam_max"]))
    try:
        spec = NormExperiment(d=nl["d"], m=nl["m"], t_max=nl["t_max"],
                              trials=nl["trials"], lambda_law=law,
                              sigma_b2=sigma_b2, seed=cfg["seed"])
    except ValueError as exc:
        raise ConfigError(f"normlab: {exc}") from exc
    result = simulate_state_norm(spec, workers=int(cfg["threads"]))
    stride = max(int(nl["trace_stride"]), 1)
    rows = [
        (t + 1, result.trace[t], result.trace_stderr[t], result.closed_form)
        for t in range(0, spec.t_max, stride)
    ]
    write_csv(outdir / "norm_trace.csv",
              ["t", "mc_mean", "mc_stderr", "closed_form"], rows)
    summary = {
        "mc_estimate": result.mc_estimate,
        "mc_stderr": result.mc_stderr,
        "closed_form": result.closed_form,
        "ratio": result.ratio,
        "e_bx2": result.e_bx2,
    }
    (outdir / "norm_result.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    print(f"MC/closed-form ratio {result.ratio:.4f} -> {outdir}")


def cmd_calibrate(args, cfg: dict, outdir: Path) -> None:
    model = _load_model(args.checkpoint)
    target = args.target or cfg["calibration"]["target"]
    if target not in ("a", "delta"):
        raise ConfigError(f"target must be a or delta, got {target!r}")
    factors = _run_calibration(model, cfg, target, outdir)
    print(f"calibrated {target}-scaling factors "
          f"(min {factors.values.min():.4f}, max {factors.values.max():.4f}) -> {outdir}")


def cmd_eval_ppl(args, cfg: dict, outdir: Path) -> None:
    model = _load_model(args.checkpoint)
    factors = load_factors(args.factors) if args.factors else None
    lengths = cfg["eval"]["lengths"]
    corpus = _corpus(cfg, ("eval", "corpus_seed"),
                     n_tokens=max(lengths) * cfg["eval"]["max_windows"] + 1)
    table = perplexity_by_length(model, corpus, lengths,
                                 scales=resolve_scales(factors, model),
                                 max_windows=cfg["eval"]["max_windows"])
    write_csv(outdir / "ppl_by_length.csv", ["length", "ppl"], table)
    print("ppl:", {length: round(p, 3) for length, p in table}, "->", outdir)


def cmd_eval_passkey(args, cfg: dict, outdir: Path) -> None:
    model = _load_model(args.checkpoint)
    factors = load_factors(args.factors) if args.factors else None
    ev = cfg["eval"]
    acc, solved = passkey_grid_eval(
        model, ev["lengths"], ev["depths"], n_per_cell=int(ev["n_per_cell"]),
        scales=resolve_scales(factors, model), seed=int(ev["grid_seed"]),
    )
    header = ["length"] + [f"d{d}" for d in ev["depths"]]
    write_csv(outdir / "passkey_accuracy.csv", header,
              [(length, *acc[i]) for i, length in enumerate(ev["lengths"])])
    write_csv(outdir / "passkey_solved.csv", header,
              [(length, *solved[i]) for i, length in enumerate(ev["lengths"])])
    print(f"passkey grid ({int(solved.sum())}/{solved.size} cells solved) -> {outdir}")


def cmd_compare(args, cfg: dict, outdir: Path) -> None:
    model = _load_model(args.checkpoint)
    lengths = cfg["eval"]["lengths"]
    corpus = _corpus(cfg, ("eval", "corpus_seed"),
                     n_tokens=max(lengths) * cfg["eval"]["max_windows"] + 1)

    def ppl_row(factors):
        table = perplexity_by_length(model, corpus, lengths,
                                     scales=resolve_scales(factors, model),
                                     max_windows=cfg["eval"]["max_windows"])
        return [p for _, p in table]

    strategies = [
        ("baseline", None),
        ("constant_a", constant_factors(model, cfg["compare"]["constant_a"], "a")),
        ("constant_delta",
         constant_factors(model, cfg["compare"]["constant_delta"], "delta")),
        ("calibrated_a", _run_calibration(model, cfg, "a", outdir, tag="a")),
        ("calibrated_delta", _run_calibration(model, cfg, "delta", outdir, tag="delta")),
    ]
    rows = [(name, *ppl_row(factors)) for name, factors in strategies]
    write_csv(outdir / "compare_report.csv",
              ["strategy"] + [f"ppl@{length}" for length in lengths], rows)
    for name, *ppls in rows:
        print(f"{name:>16}: " + "  ".join(f"{p:9.3f}" for p in ppls))
    print(f"-> {outdir}")


# --------------------------------------------------------------------------
# entry point

_COMMANDS = {
    "train": (cmd_train, False),
    "spectrum": (cmd_spectrum, True),
    "normlab": (cmd_normlab, False),
    "calibrate": (cmd_calibrate, True),
    "eval-ppl": (cmd_eval_ppl, True),
    "eval-passkey": (cmd_eval_passkey, True),
    "compare": (cmd_compare, True),
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ssmlab",
        description="Length-generalization lab for diagonal selective SSMs",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, needs_ckpt) in _COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config value (repeatable)")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--threads", type=int, help="worker cap for parallel sections")
        p.add_argument("--out", help="output directory (default: auto-named)")
        if needs_ckpt:
            p.add_argument("--checkpoint", required=True)
        if name == "normlab":
            p.add_argument("--checkpoint",
                           help="track a model's state norms instead of the MC suite")
        if name in ("eval-ppl", "eval-passkey", "normlab"):
            p.add_argument("--factors", help="scaling_factors.json to apply")
        if name == "calibrate":
            p.add_argument("--target", choices=["a", "delta"])
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = build_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    handler, _ = _COMMANDS[args.command]
    try:
        outdir = make_outdir(args, args.command.replace("-", "_"), cfg["seed"])
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    start = time.time()
    try:
        handler(args, cfg, outdir)
    except ConfigError as exc:
        write_manifest(outdir, args.command, cfg, "error", time.time() - start, str(exc))
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ScanOverflowError, TrainDivergedError, CalibrationDivergedError,
            IntegrationError, FloatingPointError) as exc:
        write_manifest(outdir, args.command, cfg, "error", time.time() - start, str(exc))
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, OSError) as exc:
        write_manifest(outdir, args.command, cfg, "error", time.time() - start, str(exc))
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        write_manifest(outdir, args.command, cfg, "error", time.time() - start, str(exc))
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    write_manifest(outdir, args.command, cfg, "ok", time.time() - start)
    return EXIT_OK


def console_main() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console_main()
