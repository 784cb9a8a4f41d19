# -*- coding: utf-8 -*-
"""
Scaling Studies Module
-----------------------------------
Horizon-scaling (behavior cloning vs interleaved rollouts at a fixed
effective-sample budget) and sample-scaling curves, log-log slope fits
and a seed bootstrap for comparing slopes.
"""

from __future__ import annotations

import logging
import math
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import statsmodels.api as sm

from mixlab.scripts.config_loader import ExperimentConfig
from mixlab.scripts.environments import TaskSampler
from mixlab.scripts.metrics import exact_resolution
from mixlab.scripts.policy import SoftmaxPolicy
from mixlab.scripts.rollout import parallel_map

logger = logging.getLogger(__name__)

STUDY_COLUMNS = [
    "study",
    "method",
    "horizon_or_budget",
    "seed",
    "failure_rate",
    "resolution_rate",
    "reverse_kl",
    "fitted_slope",
    "exact_failure_rate",
]
FAILURE_FLOOR = 1e-3
SLOPE_METRIC = "exact_failure_rate"


# ==========================================================
# CELDAS
# ==========================================================
def cell_batch_instances(config: ExperimentConfig, budget: int) -> int:
    """
    Instances per iteration so that a budget is spread over all iterations
    (about one example per turn of a teacher trajectory).
    """
    per_trajectory = config.env.length + 1
    iterations = max(1, config.train.schedule.iterations)
    return max(1, math.ceil(budget / (iterations * per_trajectory)))


def run_cell(config: ExperimentConfig, method: str, seed: int, T_max: Optional[int] = None,
             budget: Optional[int] = None) -> Dict[str, Any]:
    """Train one (method, horizon or budget, seed) cell and return its final metrics."""
    cell = config.with_overrides(T_max=T_max, method_kind=method, seed=seed)
    if budget is not None:
        spread = max(budget, 1)
        cell = cell.with_overrides(sample_budget=budget, batch_instances=cell_batch_instances(cell, spread))
    trainer = cell.build_trainer(workers=1)
    result = trainer.run_experiment(seed)
    final = result.state.last_evaluation
    heldout = TaskSampler(trainer.env, seed).heldout(cell.eval.heldout_instances)
    exact = exact_resolution(SoftmaxPolicy(result.params, trainer.env), trainer.env, heldout)
    trainer.env.clear_cache()
    logger.debug(f"Cell {method} T={trainer.env.T_max} budget={budget} seed={seed}: "
                 f"greedy {final['greedy_resolution_rate']:.3f}, exact {exact:.3f}")
    return {
        "method": method,
        "failure_rate": 1.0 - final["greedy_resolution_rate"],
        "resolution_rate": final["greedy_resolution_rate"],
        "reverse_kl": final["reverse_kl"],
        "exact_failure_rate": 1.0 - exact,
    }


# ==========================================================
# AJUSTE DE PENDIENTES
# ==========================================================
def fit_loglog_slope(horizons: Sequence[float], failures: Sequence[float],
                     floor: float = FAILURE_FLOOR) -> float:
    """
    OLS slope of log(failure) against log(horizon).

    Failures are floored so a zero failure rate stays finite. Fewer than two
    distinct horizons give NaN.
    """
    x = np.log(np.asarray(horizons, dtype=float))
    y = np.log(np.maximum(np.asarray(failures, dtype=float), floor))
    if len(np.unique(x)) < 2:
        return float("nan")
    model = sm.OLS(y, sm.add_constant(x)).fit()
    return float(model.params[1])


def _method_slope(df: pd.DataFrame, metric: str) -> float:
    means = df.groupby("horizon_or_budget")[metric].mean()
    return fit_loglog_slope(means.index.to_numpy(), means.to_numpy())


def bootstrap_slope_comparison(df: pd.DataFrame, method_a: str, method_b: str, n_boot: int = 1000,
                               seed: int = 0, metric: str = SLOPE_METRIC) -> float:
    """
    Fraction of seed-bootstrap resamples where method_a's slope exceeds method_b's.

    Seeds are resampled with replacement independently for each method;
    each resample keeps every horizon of a drawn seed.
    """
    rng = np.random.default_rng(seed)
    tables = {}
    for method in (method_a, method_b):
        sub = df[df["method"] == method]
        if sub.empty:
            raise ValueError(f"no study rows for method {method!r}")
        tables[method] = sub.pivot_table(index="seed", columns="horizon_or_budget", values=metric)
    horizons = {m: t.columns.to_numpy(dtype=float) for m, t in tables.items()}
    wins = 0
    for _ in range(n_boot):
        slopes = []
        for method in (method_a, method_b):
            table = tables[method].to_numpy()
            drawn = table[rng.integers(len(table), size=len(table))]
            slopes.append(fit_loglog_slope(horizons[method], np.nanmean(drawn, axis=0)))
        wins += int(slopes[0] > slopes[1])
    return wins / n_boot


# ==========================================================
# ESTUDIOS
# ==========================================================
def horizon_scaling_study(
    config: ExperimentConfig,
    methods: Optional[Sequence[str]] = None,
    horizons: Optional[Sequence[int]] = None,
    seeds: Optional[Sequence[int]] = None,
    budget: Optional[int] = None,
    workers: int = 1,
) -> pd.DataFrame:
    """
    Final failure rates per (method, horizon, seed) at a fixed sample budget.

    Configurations differ only in T_max. ``fitted_slope`` holds the
    per-method log-log slope of the mean exact failure rate.
    """
    study = config.study
    methods = list(methods or study.methods)
    horizons = list(horizons or study.horizons)
    seeds = list(seeds if seeds is not None else study.seeds)
    budget = study.budget if budget is None else budget
    cells: List[Tuple[str, int, int]] = [(m, T, s) for m in methods for T in horizons for s in seeds]
    logger.info(f"Horizon study: {len(cells)} cells ({len(methods)} methods x {len(horizons)} horizons "
                f"x {len(seeds)} seeds), budget {budget}")

    def run(cell: Tuple[str, int, int]) -> Dict[str, Any]:
        method, T, seed = cell
        row = run_cell(config, method, seed, T_max=T, budget=budget)
        row.update({"study": "horizon", "horizon_or_budget": T, "seed": seed})
        return row

    df = pd.DataFrame(parallel_map(run, cells, workers))
    df["fitted_slope"] = df["method"].map({m: _method_slope(g, SLOPE_METRIC) for m, g in df.groupby("method")})
    return df[STUDY_COLUMNS]


def sample_scaling_curve(
    config: ExperimentConfig,
    method: str,
    budgets: Optional[Sequence[int]] = None,
    seeds: Optional[Sequence[int]] = None,
    workers: int = 1,
) -> pd.DataFrame:
    """Final rates per (budget, seed) with collection truncated at each budget."""
    budgets = list(budgets if budgets is not None else config.study.budgets)
    if budgets != sorted(budgets):
        raise ValueError("budgets must be increasing")
    seeds = list(seeds if seeds is not None else config.study.seeds)
    cells = [(b, s) for b in budgets for s in seeds]
    logger.info(f"Sample-scaling curve for {method}: {len(cells)} cells")

    def run(cell: Tuple[int, int]) -> Dict[str, Any]:
        budget, seed = cell
        row = run_cell(config, method, seed, budget=budget)
        row.update({"study": "scaling", "horizon_or_budget": budget, "seed": seed, "fitted_slope": float("nan")})
        return row

    return pd.DataFrame(parallel_map(run, cells, workers))[STUDY_COLUMNS]


def summarize_study(df: pd.DataFrame) -> pd.DataFrame:
    """Mean, std and median per (study, method, horizon_or_budget)."""
    metrics = ["failure_rate", "resolution_rate", "reverse_kl", "exact_failure_rate"]
    summary = df.groupby(["study", "method", "horizon_or_budget"])[metrics].agg(["mean", "std", "median"])
    summary.columns = [f"{metric}_{stat}" for metric, stat in summary.columns]
    return summary.reset_index()
