"""Command-line entry point.

Every subcommand writes CSV files into ``--out`` and prints the paths it
wrote.  Exit status is 0 on success, 2 when the configuration or a required
artifact is invalid, and 3 when training produces a non-finite loss.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import config as config_mod
from . import harness as H
from .csvio import write_csv
from .errors import DRRLError, InvalidSpec, MissingArtifact, TrainingDiverged
from .oracle import write_oracle_csv
from .policy import load_checkpoint, save_checkpoint

log = logging.getLogger("drrl")

CHECKPOINT = "policy.bin"

_COMMON = {
    "--config": dict(metavar="PATH", help="INI config file (defaults apply to missing keys)"),
    "--seed": dict(type=int, metavar="N", help="master seed, overrides run.seed"),
    "--out": dict(metavar="DIR", help="output directory (default: out)"),
    "--parallel": dict(type=int, metavar="N", help="worker processes for independent cells"),
    "--checkpoint": dict(metavar="PATH", help=f"policy checkpoint (default: OUT/{CHECKPOINT})"),
    "--print-effective-config": dict(action="store_true",
                                     help="print the fully resolved config and exit"),
}


def _add_common(p):
    for flag, kw in _COMMON.items():
        p.add_argument(flag, default=argparse.SUPPRESS, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drrl", description=__doc__.split("\n")[0])
    _add_common(parser)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    helps = {
        "train": "behavior cloning on oracle labels, then PPO",
        "eval": "run the baseline methods on the evaluation pool",
        "bench-flops": "FLOPs against sequence length for full rank and the policy",
        "ablate": "ablation variants of the full pipeline",
        "oracle-gen": "greedy oracle trajectories with per-candidate rewards",
        "perturb-grid": "rank-transition perturbation norms for all candidate pairs",
        "heatmap": "chosen rank per layer and segment",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        _add_common(p)
        if name == "perturb-grid":
            p.add_argument("--workload", type=int, default=0, help="eval workload index")
            p.add_argument("--segment", type=int, default=0, help="segment index")
        if name == "heatmap":
            p.add_argument("--method", default="dr_rl", choices=config_mod.METHODS)
    return parser


def _opt(args, name, default=None):
    return getattr(args, name, default)


def resolve_config(args) -> config_mod.ExperimentConfig:
    path = _opt(args, "config")
    cfg = config_mod.load(path) if path else config_mod.defaults()
    seed = _opt(args, "seed")
    if seed is not None:
        cfg = cfg.replace(run__seed=seed)
    return cfg


def _checkpoint_path(args, out: Path) -> Path:
    return Path(_opt(args, "checkpoint") or out / CHECKPOINT)


def _load_policy(args, out: Path, required: bool = True):
    path = _checkpoint_path(args, out)
    if not path.exists():
        if required:
            raise MissingArtifact(f"checkpoint not found: {path} (run `drrl train` first)")
        return None
    return load_checkpoint(path)


def cmd_train(cfg, args, out):
    tl = H.TrainLog()
    try:
        params = H.train_policy(cfg, log_out=tl)
    except TrainingDiverged as exc:
        if exc.last_good is not None:
            path = save_checkpoint(out / "policy.last_good.bin", exc.last_good)
            log.error("last finite parameters saved to %s", path)
        raise
    ck = save_checkpoint(_checkpoint_path(args, out), params, extra={"seed": cfg.run.seed})
    return [ck, H.emit_training_dynamics(tl, out / "training_dynamics.csv")]


def cmd_eval(cfg, args, out):
    methods = list(cfg.bench.methods)
    params = _load_policy(args, out) if "dr_rl" in methods else None
    recs = H.evaluate_methods(cfg, methods, params, _opt(args, "parallel", 1))
    rows = [H.summarize(m, r, cfg.workload.seq_len, cfg.run.seed) for m, r in recs.items()]
    header, traj = H.trajectory_rows(recs)
    return [H.write_bench_csv(out / "bench.csv", rows),
            write_csv(out / "trajectories.csv", header, traj)]


def cmd_bench_flops(cfg, args, out):
    rows, fits = H.flops_scaling_sweep(cfg.bench.flops_lengths, cfg, _load_policy(args, out))
    return list(H.write_flops_csv(out, rows, fits))


def cmd_ablate(cfg, args, out):
    params = _load_policy(args, out, required=False)
    rows = H.run_ablations(cfg, cfg.ablation.variants, params, _opt(args, "parallel", 1))
    return [H.write_bench_csv(out / "ablation.csv", rows)]


def cmd_oracle_gen(cfg, args, out):
    return [write_oracle_csv(out / "oracle.csv", H.oracle_trajectories(cfg))]


def cmd_perturb_grid(cfg, args, out):
    spec = H.workload_spec(cfg, "eval", args.workload)
    if not 0 <= args.segment < spec.num_segments:
        raise InvalidSpec(f"segment {args.segment} out of range")
    seg = H._segments(spec, 0, cfg.workload.layer_tau_scale)[args.segment]
    cands = H.candidates_of(cfg)
    sigma, _ = seg.spectrum(max(cands) + 1)
    return [H.write_grid_csv(out / "perturbation_grid.csv", H.perturbation_grid(sigma, cands),
                             cands)]


def cmd_heatmap(cfg, args, out):
    params = _load_policy(args, out) if args.method == "dr_rl" else None
    grid = H.rank_heatmap(cfg, params, args.method)
    return [H.emit_rank_heatmap(out / "rank_heatmap.csv", grid)]


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "bench-flops": cmd_bench_flops,
    "ablate": cmd_ablate,
    "oracle-gen": cmd_oracle_gen,
    "perturb-grid": cmd_perturb_grid,
    "heatmap": cmd_heatmap,
}


def main(argv=None) -> int:
    level = logging.getLevelName(os.environ.get("DRRL_LOG", "WARNING").upper())
    logging.basicConfig(level=level if isinstance(level, int) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        if _opt(args, "print_effective_config"):
            sys.stdout.write(cfg.render())
            return 0
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 2
        out = Path(_opt(args, "out", "out"))
        out.mkdir(parents=True, exist_ok=True)
        for path in COMMANDS[args.command](cfg, args, out):
            print(path)
        return 0
    except TrainingDiverged as exc:
        log.error("%s", exc)
        return 3
    except DRRLError as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
