"""Command-line driver for suppression stats, training, sampling, sweeps, bench.

Configuration resolution is layered: built-in defaults, then a JSON config
file (--config), then explicit flags. Every run writes the merged result to
<out-dir>/resolved_config.json; rerunning a command from that file
reproduces every non-timing output byte for byte.

Exit codes are a stable contract: 0 success, 1 validation error (bad flags
or parameter domains), 2 I/O error (missing or unwritable files), 3 numeric
failure (divergence or a kernel equivalence violation).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .analysis import (
    SUPPRESSION_COLUMNS,
    mc_mean_mass,
    suppression_ratio,
    suppression_rows,
    write_csv,
)
from .attention import TacaConfig, TokenLayout
from .bench import BENCH_COLUMNS, RUN_COLUMNS, run_bench, simulate_run
from .data import default_concepts, synth_dataset
from .errors import DomainError, NumericError, ShapeError
from .flow import T_MAX, make_schedule
from .model import ToyModel
from .probe import alignment_probe
from .sampling import SAMPLE_LOG_COLUMNS, SamplerConfig, gamma_active_steps, sample
from .serialization import save_arrays
from .tensor_math import DEFAULT_SEED, make_rng
from .training import TRAIN_LOG_COLUMNS, TrainConfig, head_tail_means, run_training

SWEEP_COLUMNS = ("gamma0", "t_thresh", "mean_score", "std_err", "n_samples", "suppression_ratio")

_GLOBAL = {"seed": DEFAULT_SEED, "precision": "f64"}

COMMAND_DEFAULTS: dict[str, dict] = {
    "suppress": {
        **_GLOBAL,
        "n_txt": 8, "n_vis": 64, "heads": 4, "head_dim": 16,
        "gammas": [1.0], "mode": "iid", "trials": 1000, "tau": 1.0,
        "checkpoint": None, "block": 0,
    },
    "train": {
        **_GLOBAL,
        "pretrain_steps": 600, "steps": 200, "batch": 4,
        "pretrain_lr": 3e-3, "lr": 1e-4, "rank": 16, "alpha": 16.0,
        "gamma0": 1.2, "t_thresh": 970.0, "tau": 1.0,
        "cfg_dropout": 0.1, "pairs": 256,
    },
    "sample": {
        **_GLOBAL,
        "checkpoint": None, "concept": 0, "steps": 30, "shift": 3.0,
        "cfg_scale": 3.5, "gamma0": 1.2, "t_thresh": 970.0, "tau": 1.0,
        "baseline": False,
    },
    "sweep": {
        **_GLOBAL,
        "checkpoint": None,
        "gamma0_grid": [1.15, 1.2, 1.25],
        "t_thresh_grid": [970.0, 950.0, 930.0],
        "probe_samples": 20, "steps": 30, "shift": 3.0,
        "cfg_scale": 3.5, "tau": 1.0,
    },
    "bench": {
        **_GLOBAL,
        "n_txt": 16, "n_vis": 128, "heads": 8, "head_dim": 64,
        "reps": 20, "run_reps": 5, "steps": 30, "shift": 3.0,
        "gamma0": 1.2, "t_thresh": 970.0, "tau": 1.0,
        "parallel_heads": False,
    },
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tacalab",
        description="Temperature-adjusted cross-modal attention lab: "
        "suppression stats, toy training/sampling, sweeps, and kernel benchmarks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None, help="RNG seed (default 42)")
        p.add_argument("--out-dir", default=None, help="output directory (default ./out)")
        p.add_argument("--config", default=None, help="JSON config file; explicit flags win")
        p.add_argument("--precision", choices=("f32", "f64"), default=None,
                       help="kernel dtype for bench (default f64)")

    p = sub.add_parser("suppress", help="visual-to-text attention mass statistics")
    common(p)
    p.add_argument("--n-txt", type=int, default=None)
    p.add_argument("--n-vis", type=int, default=None)
    p.add_argument("--heads", type=int, default=None)
    p.add_argument("--head-dim", type=int, default=None)
    p.add_argument("--gammas", type=float, nargs="+", default=None,
                   help="gamma values to evaluate on the same draws")
    p.add_argument("--mode", choices=("iid", "nonneg"), default=None,
                   help="random logit model for the Monte-Carlo study")
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--checkpoint", default=None,
                   help="analyze a trained model's activations instead of random logits")
    p.add_argument("--block", type=int, default=None, help="which block to analyze (with --checkpoint)")

    p = sub.add_parser("train", help="pretrain, then adapter fine-tune with the temperature factor")
    common(p)
    p.add_argument("--pretrain-steps", type=int, default=None)
    p.add_argument("--steps", type=int, default=None, help="fine-tune steps")
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--pretrain-lr", type=float, default=None)
    p.add_argument("--lr", type=float, default=None, help="fine-tune learning rate")
    p.add_argument("--rank", type=int, default=None, help="adapter rank")
    p.add_argument("--alpha", type=float, default=None, help="adapter scale")
    p.add_argument("--gamma0", type=float, default=None)
    p.add_argument("--t-thresh", type=float, default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--cfg-dropout", type=float, default=None)
    p.add_argument("--pairs", type=int, default=None, help="synthetic dataset size")

    p = sub.add_parser("sample", help="generate from a checkpoint with the Euler sampler")
    common(p)
    p.add_argument("--checkpoint", default=None, help="model checkpoint (required)")
    p.add_argument("--concept", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--shift", type=float, default=None)
    p.add_argument("--cfg-scale", type=float, default=None)
    p.add_argument("--gamma0", type=float, default=None)
    p.add_argument("--t-thresh", type=float, default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--baseline", action="store_true", default=None,
                   help="force gamma0 = 1 (plain sampler)")

    p = sub.add_parser("sweep", help="alignment probe over a gamma0 x t_thresh grid")
    common(p)
    p.add_argument("--checkpoint", default=None, help="model checkpoint (required)")
    p.add_argument("--gamma0-grid", type=float, nargs="+", default=None)
    p.add_argument("--t-thresh-grid", type=float, nargs="+", default=None)
    p.add_argument("--probe-samples", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--shift", type=float, default=None)
    p.add_argument("--cfg-scale", type=float, default=None)
    p.add_argument("--tau", type=float, default=None)

    p = sub.add_parser("bench", help="attention kernel microbenchmarks")
    common(p)
    p.add_argument("--n-txt", type=int, default=None)
    p.add_argument("--n-vis", type=int, default=None)
    p.add_argument("--heads", type=int, default=None)
    p.add_argument("--head-dim", type=int, default=None)
    p.add_argument("--reps", type=int, default=None, help="timing repetitions per kernel")
    p.add_argument("--run-reps", type=int, default=None, help="timing repetitions for the run simulation")
    p.add_argument("--steps", type=int, default=None, help="steps in the simulated run")
    p.add_argument("--shift", type=float, default=None)
    p.add_argument("--gamma0", type=float, default=None)
    p.add_argument("--t-thresh", type=float, default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--parallel-heads", action="store_true", default=None,
                   help="leave the BLAS thread pool alone while timing")
    return parser


def load_config_file(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise OSError(f"failed reading config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise DomainError(f"config {path} must hold a JSON object")
    return doc


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """defaults <- config file <- explicit flags, with key validation."""
    defaults = COMMAND_DEFAULTS[command]
    merged = dict(defaults)
    if args.config:
        file_cfg = dict(load_config_file(args.config))
        file_command = file_cfg.pop("command", None)
        if file_command is not None and file_command != command:
            raise DomainError(
                f"config file is for command {file_command!r}, not {command!r}"
            )
        unknown = sorted(set(file_cfg) - set(defaults))
        if unknown:
            raise DomainError(f"unknown config keys for {command}: {unknown}")
        merged.update(file_cfg)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return merged


def write_resolved(cfg: dict, command: str, out_dir: Path) -> None:
    doc = {"command": command, **cfg}
    path = out_dir / "resolved_config.json"
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise OSError(f"failed writing {path}: {exc}") from exc


def _layout_from(cfg: dict) -> TokenLayout:
    return TokenLayout(
        n_txt=cfg["n_txt"], n_vis=cfg["n_vis"], heads=cfg["heads"], head_dim=cfg["head_dim"]
    )


def _dedupe(values, label: str) -> list:
    kept = []
    for v in values:
        if v in kept:
            print(f"warning: duplicate {label} value {v} dropped", file=sys.stderr)
        else:
            kept.append(v)
    return kept


def cmd_suppress(cfg: dict, out_dir: Path) -> None:
    gammas = [float(g) for g in cfg["gammas"]]
    if not gammas:
        raise DomainError("need at least one gamma value")
    rng = make_rng(cfg["seed"])
    rows = []
    if cfg["checkpoint"]:
        model = ToyModel.load(cfg["checkpoint"])
        concepts = default_concepts(n_txt=model.cfg.n_txt)
        x = rng.standard_normal((model.cfg.n_vis, model.cfg.d_patch))
        pairs = model.attention_inputs(concepts.prompt_indices(0), x, T_MAX)
        if not (0 <= cfg["block"] < len(pairs)):
            raise DomainError(f"block {cfg['block']} outside [0, {len(pairs)})")
        q, k = pairs[cfg["block"]]
        for gamma in gammas:
            report = suppression_ratio(q, k, model.layout, gamma=gamma, tau=cfg["tau"])
            rows.extend(suppression_rows(report))
    else:
        layout = _layout_from(cfg)
        mass = mc_mean_mass(layout, gammas, cfg["trials"], rng, cfg["mode"], cfg["tau"])
        for gi, gamma in enumerate(gammas):
            for h in range(layout.heads):
                m = float(mass[gi, h])
                rows.append(
                    {"head": h, "gamma": gamma, "n_txt": layout.n_txt,
                     "n_vis": layout.n_vis, "mean_mass": m, "ratio": m}
                )
    write_csv(out_dir / "suppression.csv", SUPPRESSION_COLUMNS, rows)
    print(f"wrote {out_dir / 'suppression.csv'} ({len(rows)} rows)")


def cmd_train(cfg: dict, out_dir: Path) -> None:
    train_cfg = TrainConfig(
        pretrain_steps=cfg["pretrain_steps"], finetune_steps=cfg["steps"],
        batch_size=cfg["batch"], pretrain_lr=cfg["pretrain_lr"], finetune_lr=cfg["lr"],
        lora_rank=cfg["rank"], lora_alpha=cfg["alpha"], gamma0=cfg["gamma0"],
        t_thresh=cfg["t_thresh"], tau=cfg["tau"], cfg_dropout=cfg["cfg_dropout"],
        n_pairs=cfg["pairs"], seed=cfg["seed"],
    )
    model, log = run_training(train_cfg)
    model.save(out_dir / "checkpoint.bin")
    write_csv(out_dir / "training_log.csv", TRAIN_LOG_COLUMNS, log)
    losses = [row["loss"] for row in log if row["phase"] == "taca"]
    first, last = head_tail_means(losses)
    print(f"fine-tune running loss: first {first:.6f} -> last {last:.6f}")
    print(f"wrote {out_dir / 'checkpoint.bin'} and {out_dir / 'training_log.csv'}")


def cmd_sample(cfg: dict, out_dir: Path) -> None:
    if not cfg["checkpoint"]:
        raise DomainError("--checkpoint is required for sampling")
    model = ToyModel.load(cfg["checkpoint"])
    concepts = default_concepts(n_txt=model.cfg.n_txt)
    gamma0 = 1.0 if cfg["baseline"] else float(cfg["gamma0"])
    sampler = SamplerConfig(
        steps=cfg["steps"], shift=cfg["shift"], cfg_scale=cfg["cfg_scale"],
        taca=TacaConfig(gamma0=gamma0, t_thresh=cfg["t_thresh"], tau=cfg["tau"]),
        seed=cfg["seed"],
    )
    x, rows = sample(
        model, concepts.prompt_indices(cfg["concept"]), sampler,
        null_prompt=concepts.null_prompt(),
    )
    active = gamma_active_steps(rows, gamma0)
    meta = {
        "format": "tacalab-sample", "version": 1,
        "concept": cfg["concept"], "cfg_scale": sampler.cfg_scale,
        "gamma0": gamma0, "t_thresh": cfg["t_thresh"], "tau": cfg["tau"],
        "steps": sampler.steps, "shift": sampler.shift, "seed": sampler.seed,
        "gamma_active_steps": active,
    }
    save_arrays(out_dir / "sample.bin", meta, {"x": x})
    write_csv(out_dir / "step_log.csv", SAMPLE_LOG_COLUMNS, rows)
    print(f"sampled concept {cfg['concept']}; gamma0={gamma0} active on steps {active}")
    print(f"wrote {out_dir / 'sample.bin'} and {out_dir / 'step_log.csv'}")


def cmd_sweep(cfg: dict, out_dir: Path) -> None:
    if not cfg["checkpoint"]:
        raise DomainError("--checkpoint is required for sweeps")
    gamma_grid = _dedupe([float(g) for g in cfg["gamma0_grid"]], "gamma0")
    thresh_grid = _dedupe([float(t) for t in cfg["t_thresh_grid"]], "t_thresh")
    if not gamma_grid or not thresh_grid:
        raise DomainError("sweep grid must not be empty")
    model = ToyModel.load(cfg["checkpoint"])
    concepts = default_concepts(n_txt=model.cfg.n_txt)
    rng = make_rng(cfg["seed"])
    dataset = synth_dataset(cfg["probe_samples"], rng, concepts, n_vis=model.cfg.n_vis)
    # suppression measured on first-block activations at the first sampler step
    x_noise = rng.standard_normal((model.cfg.n_vis, model.cfg.d_patch))
    q, k = model.attention_inputs(dataset[0].prompt, x_noise, T_MAX)[0]
    rows = []
    for t_thresh in thresh_grid:
        probe = alignment_probe(
            model, dataset, gamma_grid, concepts,
            steps=cfg["steps"], shift=cfg["shift"], cfg_scale=cfg["cfg_scale"],
            t_thresh=t_thresh, tau=cfg["tau"], base_seed=cfg["seed"],
        )
        for pr in probe:
            ratio = suppression_ratio(q, k, model.layout, gamma=pr.gamma0, tau=cfg["tau"]).ratio
            rows.append(
                {"gamma0": pr.gamma0, "t_thresh": t_thresh,
                 "mean_score": pr.mean_score, "std_err": pr.std_err,
                 "n_samples": pr.n_samples, "suppression_ratio": ratio}
            )
    write_csv(out_dir / "sweep.csv", SWEEP_COLUMNS, rows)
    print(f"wrote {out_dir / 'sweep.csv'} ({len(rows)} rows)")


def cmd_bench(cfg: dict, out_dir: Path) -> None:
    layout = _layout_from(cfg)
    dtype = np.float32 if cfg["precision"] == "f32" else np.float64
    single = not cfg["parallel_heads"]
    records = run_bench(
        layout, gamma=cfg["gamma0"], tau=cfg["tau"], dtype=dtype,
        reps=cfg["reps"], seed=cfg["seed"], single_thread=single,
    )
    write_csv(out_dir / "bench.csv", BENCH_COLUMNS, [r.row() for r in records])
    schedule = make_schedule(cfg["steps"], cfg["shift"])
    gamma_steps = schedule.n_gamma_active(cfg["t_thresh"])
    sim = simulate_run(
        layout, steps=cfg["steps"], gamma_steps=gamma_steps, gamma=cfg["gamma0"],
        tau=cfg["tau"], dtype=dtype, reps=cfg["run_reps"], seed=cfg["seed"],
        single_thread=single,
    )
    write_csv(out_dir / "bench_run.csv", RUN_COLUMNS, [sim])
    for rec in records:
        print(f"{rec.strategy:<10} median {rec.median_s * 1e3:8.3f} ms  x{rec.rel_factor:.2f}")
    print(
        f"simulated {sim['steps']}-step run with {sim['gamma_steps']} scaled steps: "
        f"x{sim['overhead_factor']:.3f} total attention cost"
    )
    print(f"wrote {out_dir / 'bench.csv'} and {out_dir / 'bench_run.csv'}")


COMMAND_HANDLERS = {
    "suppress": cmd_suppress,
    "train": cmd_train,
    "sample": cmd_sample,
    "sweep": cmd_sweep,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; fold that into the validation code
        return 0 if exc.code in (0, None) else 1
    try:
        cfg = resolve_config(args.command, args)
        out_dir = Path(args.out_dir) if args.out_dir else Path("out")
        out_dir.mkdir(parents=True, exist_ok=True)
        write_resolved(cfg, args.command, out_dir)
        COMMAND_HANDLERS[args.command](cfg, out_dir)
        return 0
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DomainError, ShapeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
