"""Fusion on/off x pre-fine-tune {none, matched, mismatched} x seeds.

Step 1 does not depend on the fusion flag, so it runs once per
``(domain, seed)`` and both fusion arms reuse its checkpoints.  Jobs may run
in worker processes (``MSCFF_THREADS``); results are always assembled in
grid order, so the output files do not depend on scheduling.
"""

from __future__ import annotations

import os
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .config import PREFINETUNE_DOMAINS, ExperimentConfig
from .training import MetricsReport, _write_csv, run_step1, run_step2

FUSION_ARMS = (True, False)


def max_workers() -> int:
    raw = os.environ.get("MSCFF_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def run_name(fusion_on: bool, domain: str, seed: int) -> str:
    return f"fusion-{'on' if fusion_on else 'off'}_prefinetune-{domain}_seed-{seed}"


def _domain_seed_job(args) -> list[MetricsReport]:
    config, domain, seed, out_dir = args
    base = config.replace(prefinetune_domain=domain, seed=seed)
    step1_dir = None if out_dir is None else Path(out_dir) / "step1" / f"{domain}_seed-{seed}"
    ckpts = run_step1(base, step1_dir)
    reports = []
    for fusion_on in FUSION_ARMS:
        run_dir = None if out_dir is None else Path(out_dir) / "runs" / run_name(fusion_on, domain, seed)
        reports.append(run_step2(base.replace(fusion_on=fusion_on), ckpts, run_dir))
    return reports


@dataclass
class AblationResult:
    reports: list  # MetricsReport, ordered by (fusion, domain, seed)

    def medians(self) -> dict:
        """``{(fusion_on, domain): median final val accuracy}``."""
        groups: dict = {}
        for r in self.reports:
            groups.setdefault((r.fusion_on, r.prefinetune_domain), []).append(r.final_val_acc)
        return {k: statistics.median(v) for k, v in groups.items()}

    def median(self, fusion_on=None, domain=None) -> float:
        """Median over runs matching the given arm(s)."""
        accs = [
            r.final_val_acc for r in self.reports
            if (fusion_on is None or r.fusion_on == fusion_on)
            and (domain is None or r.prefinetune_domain == domain)
        ]
        return statistics.median(accs)


def run_ablation(config: ExperimentConfig, out_dir: str | Path | None = None, workers: int | None = None) -> AblationResult:
    jobs = [(config, d, s, out_dir) for d in PREFINETUNE_DOMAINS for s in config.ablation_seeds]
    workers = max_workers() if workers is None else workers
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_domain_seed_job, jobs))
    else:
        results = [_domain_seed_job(j) for j in jobs]

    by_key = {}
    for reports in results:
        for r in reports:
            by_key[(r.fusion_on, r.prefinetune_domain, r.seed)] = r
    ordered = [
        by_key[(f, d, s)]
        for f in FUSION_ARMS for d in PREFINETUNE_DOMAINS for s in config.ablation_seeds
    ]
    result = AblationResult(ordered)
    if out_dir is not None:
        write_summary(result, out_dir)
    return result


def write_summary(result: AblationResult, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(
        out / "ablation_summary.csv",
        ("fusion", "prefinetune_domain", "seed", "final_train_acc", "final_val_acc"),
        [
            ("on" if r.fusion_on else "off", r.prefinetune_domain, r.seed, r.rows[-1][2], r.final_val_acc)
            for r in result.reports
        ],
    )
    med = result.medians()
    _write_csv(
        out / "ablation_medians.csv",
        ("fusion", "prefinetune_domain", "median_val_acc"),
        [("on" if f else "off", d, med[(f, d)]) for f in FUSION_ARMS for d in PREFINETUNE_DOMAINS],
    )
