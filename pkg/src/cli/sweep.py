"""
Grid sweeps over noise ratio, log alpha and seed

Each (ratio, seed) pair gets a plain VAE baseline run plus one robust run per
log alpha. Runs share nothing, so --jobs > 1 spreads them over processes;
rows are always written in grid order.
"""

import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Any, Dict, List, Optional, Sequence

from src.cli.charts import BASELINE_TAG, FAILED_TAG, SWEEP_HEADER, write_sweep_chart
from src.cli.runner import CLEAN_RATIO, execute_run, parse_ratio
from src.core.trainer import TrainConfig
from src.utils.errors import RvaeError, SweepFailedError
from src.utils.logger import logger


SWEEP_FILE = 'sweep.csv'
FIGURE_FILE = 'figure.svg'
RUNS_DIR = 'runs'


@dataclass
class SweepJob:
    """One cell of the grid; log_alpha None means the plain VAE baseline"""
    ratio: str
    log_alpha: Optional[float]
    seed: int
    config: Dict[str, Any]
    train_images: str
    test_images: str
    run_dir: str

    @property
    def alpha_text(self) -> str:
        return BASELINE_TAG if self.log_alpha is None else f"{self.log_alpha:g}"


@dataclass
class SweepRow:
    ratio: str
    log_alpha: str
    seed: int
    test_ll: Optional[float]

    @property
    def failed(self) -> bool:
        return self.test_ll is None

    def as_csv(self) -> List[str]:
        value = FAILED_TAG if self.test_ll is None else repr(float(self.test_ll))
        return [self.ratio, self.log_alpha, str(self.seed), value]


def _ratio_tag(ratio: str) -> str:
    return ratio.replace(':', '-')


def plan_sweep(
    base: TrainConfig,
    ratios: Sequence[str],
    log_alphas: Sequence[float],
    seeds: Sequence[int],
    train_images: str,
    test_images: str,
    out_dir: str,
    baseline: bool = True
) -> List[SweepJob]:
    """
    Expand the grid into jobs, in output order

    Args:
        base: Configuration every run starts from
        ratios: 'R:S' strings or 'clean'
        log_alphas: Robust-run regularization values
        seeds: Training seeds
        train_images: Training IDX file
        test_images: Test IDX file
        out_dir: Sweep directory; runs go to out_dir/runs/<ratio>_<alpha>_seed<N>
        baseline: Include a plain VAE run per (ratio, seed)

    Returns:
        List of SweepJob
    """
    for ratio in ratios:
        parse_ratio(ratio)
    jobs = []
    alphas: List[Optional[float]] = ([None] if baseline else []) + [float(a) for a in log_alphas]
    for ratio in ratios:
        for log_alpha in alphas:
            for seed in seeds:
                if log_alpha is None:
                    cfg = replace(base, objective='elbo', seed=seed)
                else:
                    cfg = replace(base, objective='robust', log_alpha=log_alpha, seed=seed)
                job = SweepJob(
                    ratio=CLEAN_RATIO if parse_ratio(ratio) is None else str(parse_ratio(ratio)),
                    log_alpha=log_alpha,
                    seed=seed,
                    config=cfg.validate().to_dict(),
                    train_images=train_images,
                    test_images=test_images,
                    run_dir='',
                )
                job.run_dir = os.path.join(
                    out_dir, RUNS_DIR, f"{_ratio_tag(job.ratio)}_{job.alpha_text}_seed{seed}"
                )
                jobs.append(job)
    return jobs


def run_job(job: SweepJob) -> SweepRow:
    """Run one grid cell; failures become a row with no test_ll"""
    test_ll = None
    try:
        outcome = execute_run(
            TrainConfig.from_mapping(job.config), job.train_images, job.test_images,
            job.run_dir, ratio=job.ratio,
        )
        test_ll = outcome.test_ll
        if test_ll is not None and not math.isfinite(test_ll):
            logger.warning(f"Run {job.run_dir} finished with test_ll={test_ll}")
            test_ll = None
    except (RvaeError, ArithmeticError, OSError) as e:
        logger.warning(f"Run {job.run_dir} failed: {e}")
    return SweepRow(job.ratio, job.alpha_text, job.seed, test_ll)


def write_sweep_csv(rows: Sequence[SweepRow], path: str) -> str:
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(SWEEP_HEADER)
        for row in rows:
            writer.writerow(row.as_csv())
    return path


def run_sweep(jobs: Sequence[SweepJob], out_dir: str, n_jobs: int = 1) -> List[SweepRow]:
    """
    Run every job, then write sweep.csv and figure.svg into out_dir

    Args:
        jobs: Output of plan_sweep
        out_dir: Sweep directory
        n_jobs: Worker processes (1 runs serially in this process)

    Returns:
        Rows in job order

    Raises:
        SweepFailedError: after both files are written, if any run failed
    """
    os.makedirs(out_dir, exist_ok=True)
    logger.info(f"Sweep of {len(jobs)} runs into {out_dir} ({n_jobs} worker(s))")
    if n_jobs <= 1:
        rows = [run_job(job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=n_jobs) as executor:
            rows = list(executor.map(run_job, jobs))

    csv_path = write_sweep_csv(rows, os.path.join(out_dir, SWEEP_FILE))
    svg_path = write_sweep_chart(csv_path, os.path.join(out_dir, FIGURE_FILE))
    logger.info(f"Sweep results in {csv_path}, chart in {svg_path}")

    failed = [r for r in rows if r.failed]
    if failed:
        raise SweepFailedError(f"{len(failed)} of {len(rows)} sweep runs failed (see {csv_path})")
    return rows
