"""Command-line entry point: ``scfusion <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, NumericError
from .harness import checkpoint
from .harness.ablation import run_ablation
from .harness.config import ExperimentConfig, load_config, save_config
from .harness.data import Domain, gen_dataset
from .harness.selfcheck import gradient_suite, invariant_suite
from .harness.training import run_step1, run_step2

EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out_dir"] = args.out
    if args.fusion is not None:
        changes["fusion_on"] = args.fusion == "on"
    if args.prefinetune is not None:
        changes["prefinetune_domain"] = args.prefinetune
    return cfg.replace(**changes) if changes else cfg


def cmd_gen_data(cfg: ExperimentConfig, args) -> int:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sets = {
        "task_a_train": (Domain.TASK_A, cfg.train_size, cfg.component_seed("train_data")),
        "task_a_val": (Domain.TASK_A, cfg.val_size, cfg.component_seed("val_data")),
        "task_b": (Domain.TASK_B, cfg.pretrain_size, cfg.component_seed("pretrain_data")),
        "mismatched": (Domain.MISMATCHED, cfg.pretrain_size, cfg.component_seed("pretrain_data")),
    }
    for name, (domain, size, seed) in sets.items():
        ds = gen_dataset(domain, size, seed)
        np.savez(out / f"{name}.npz", images=ds.images, labels=ds.labels)
        print(f"wrote {out / name}.npz ({len(ds)} images, domain {domain.value})")
    return 0


def cmd_step1(cfg: ExperimentConfig, args) -> int:
    out = Path(cfg.out_dir) / "step1"
    run_step1(cfg, out)
    save_config(cfg, Path(cfg.out_dir) / "config.json")
    print(f"step1 ({cfg.prefinetune_domain}) checkpoints in {out}")
    return 0


def cmd_step2(cfg: ExperimentConfig, args) -> int:
    ckpt_dir = Path(args.checkpoints) if args.checkpoints else Path(cfg.out_dir) / "step1"
    g_path, w_path = ckpt_dir / "global_encoder.ckpt", ckpt_dir / "windowed_encoder.ckpt"
    if cfg.prefinetune_on and g_path.exists() and w_path.exists():
        ckpts = (checkpoint.load(g_path), checkpoint.load(w_path))
        print(f"loaded step-1 checkpoints from {ckpt_dir}")
    else:
        ckpts = run_step1(cfg, Path(cfg.out_dir) / "step1" if cfg.prefinetune_on else None)
    report = run_step2(cfg, ckpts, Path(cfg.out_dir) / "step2")
    for epoch, loss, train_acc, val_acc in report.rows:
        print(f"epoch {epoch:3d}  loss {loss:.4f}  train_acc {train_acc:.4f}  val_acc {val_acc:.4f}")
    print("confusion (rows = true class):")
    print(report.confusion)
    return 0


def cmd_ablate(cfg: ExperimentConfig, args) -> int:
    result = run_ablation(cfg, cfg.out_dir)
    for (fusion_on, domain), med in result.medians().items():
        print(f"fusion={'on' if fusion_on else 'off':3s} prefinetune={domain:10s} median_val_acc={med:.4f}")
    print(f"summary: {Path(cfg.out_dir) / 'ablation_summary.csv'}")
    return 0


def cmd_gradcheck(cfg: ExperimentConfig, args) -> int:
    reports = gradient_suite(cfg.seed)
    for r in reports:
        print(r.line())
    failed = [r for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} gradient checks passed")
    return EXIT_NUMERIC if failed else 0


def cmd_selftest(cfg: ExperimentConfig, args) -> int:
    ok = True
    for name, passed in invariant_suite(cfg.seed):
        print(f"{'PASS' if passed else 'FAIL'}  {name}")
        ok &= passed
    reports = gradient_suite(cfg.seed)
    bad = [r for r in reports if not r.passed]
    print(f"{'PASS' if not bad else 'FAIL'}  gradient suite ({len(reports) - len(bad)}/{len(reports)})")
    return 0 if ok and not bad else EXIT_NUMERIC


COMMANDS = {
    "gen-data": cmd_gen_data,
    "step1": cmd_step1,
    "step2": cmd_step2,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "selftest": cmd_selftest,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scfusion", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="JSON experiment config")
    parser.add_argument("--seed", type=int, help="master seed")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--fusion", choices=("on", "off"))
    parser.add_argument("--prefinetune", choices=("none", "matched", "mismatched"))
    parser.add_argument("--checkpoints", help="step-1 checkpoint directory for step2")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = _config(args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
