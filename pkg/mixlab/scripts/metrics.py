# -*- coding: utf-8 -*-
"""
Evaluation Metrics Module
Greedy resolution rate, exact (dynamic-programming) resolution, reverse KL
on student-visited states and a simple failure taxonomy.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np
from scipy.special import rel_entr

from mixlab.scripts.core import ActionSeq, Context, TaskInstance, Trajectory, context_of
from mixlab.scripts.environments import Environment, exact_success_prob
from mixlab.scripts.policy import GREEDY, Policy, SamplingConfig
from mixlab.scripts.rollout import parallel_map, rollout_policy, substream

logger = logging.getLogger(__name__)

KL_ESTIMATORS = ("exact", "sampled")
KL_CONVENTION = "mean over (context, token position) pairs"
FAILURE_CATEGORIES = ("no_submission_budget", "no_submission_loop", "submitted_wrong", "resolved")
LOOP_REPEATS = 3
STATE_SAMPLING_STREAM = 3


@dataclass(frozen=True)
class EvalConfig:
    heldout_instances: int = 100
    kl_rollouts: int = 100
    kl_temperature: float = 0.7
    kl_estimator: str = "exact"
    kl_teacher_noise: float = 0.01

    def __post_init__(self) -> None:
        if self.kl_estimator not in KL_ESTIMATORS:
            raise ValueError(f"kl_estimator must be one of {KL_ESTIMATORS}, got {self.kl_estimator!r}")
        if self.heldout_instances < 1 or self.kl_rollouts < 0:
            raise ValueError("heldout_instances must be >= 1 and kl_rollouts >= 0")
        if not 0.0 <= self.kl_teacher_noise < 1.0:
            raise ValueError(f"kl_teacher_noise must be in [0, 1), got {self.kl_teacher_noise}")


@dataclass(frozen=True)
class EmpiricalStateDistribution:
    """Contexts (and the actions taken there) visited by rolling out one policy."""

    contexts: Tuple[Context, ...]
    actions: Tuple[ActionSeq, ...]
    policy_id: str
    temperature: float
    n_rollouts: int

    def __len__(self) -> int:
        return len(self.contexts)


@dataclass(frozen=True)
class KLReport:
    value: float
    finite_mean: float
    n_positions: int
    n_infinite: int
    estimator: str = "exact"
    convention: str = KL_CONVENTION


# ==========================================================
# TASA DE RESOLUCIÓN
# ==========================================================
def greedy_rollouts(
    policy: Policy, env: Environment, instances: Sequence[TaskInstance], workers: int = 1
) -> List[Trajectory]:
    return parallel_map(
        lambda instance: rollout_policy(policy, env, instance, GREEDY, substream(0, instance.id)),
        list(instances),
        workers,
    )


def resolution_rate(
    policy: Policy, env: Environment, instances: Sequence[TaskInstance], workers: int = 1
) -> float:
    """Fraction of instances whose greedy rollout verifies."""
    if not instances:
        raise ValueError("resolution_rate needs at least one instance")
    return float(np.mean([t.success for t in greedy_rollouts(policy, env, instances, workers)]))


def exact_resolution(
    policy: Policy, env: Environment, instances: Sequence[TaskInstance], workers: int = 1
) -> float:
    """Mean exact success probability of the stochastic policy (temperature 1)."""
    if not instances:
        raise ValueError("exact_resolution needs at least one instance")
    probs = parallel_map(lambda instance: exact_success_prob(policy, env, instance), list(instances), workers)
    return float(np.mean(probs))


# ==========================================================
# KL INVERSA EN ESTADOS DEL ESTUDIANTE
# ==========================================================
def sample_state_distribution(
    policy: Policy,
    env: Environment,
    instances: Sequence[TaskInstance],
    n_rollouts: int,
    temperature: float,
    seed: int,
    policy_id: str = "student",
    workers: int = 1,
) -> EmpiricalStateDistribution:
    """
    Roll out ``policy`` ``n_rollouts`` times (cycling through ``instances``)
    and record every visited context with the action taken there.
    """
    sampling = SamplingConfig(temperature=temperature)
    jobs = [(r, instances[r % len(instances)]) for r in range(n_rollouts)] if instances else []

    def run(job: Tuple[int, TaskInstance]) -> Trajectory:
        r, instance = job
        return rollout_policy(policy, env, instance, sampling,
                              substream(seed, instance.id, STATE_SAMPLING_STREAM, r))

    contexts: List[Context] = []
    actions: List[ActionSeq] = []
    for trajectory in parallel_map(run, jobs, workers):
        for t, turn in enumerate(trajectory.turns, start=1):
            contexts.append(context_of(trajectory, t))
            actions.append(turn.executed)
    return EmpiricalStateDistribution(tuple(contexts), tuple(actions), policy_id, temperature, n_rollouts)


def reverse_kl(
    student: Policy,
    teacher: Policy,
    state_dist: EmpiricalStateDistribution,
    estimator: str = "exact",
) -> KLReport:
    """
    Mean KL(pi_theta || pi_e) over (context, token position) pairs.

    The exact estimator sums over the whole vocabulary at every position of
    the visited action; the sampled one uses log p(a_j) - log q(a_j) of the
    visited token. Positions where the teacher has no mass on student
    support are infinite and counted in ``n_infinite``.
    """
    if estimator not in KL_ESTIMATORS:
        raise ValueError(f"estimator must be one of {KL_ESTIMATORS}, got {estimator!r}")
    values: List[float] = []
    for context, action in zip(state_dist.contexts, state_dist.actions):
        for j in range(len(action)):
            prefix = action.tokens[:j]
            p = student.token_dist(context, prefix)
            q = teacher.token_dist(context, prefix)
            if estimator == "exact":
                values.append(float(np.sum(rel_entr(p, q))))
            else:
                token = action.tokens[j]
                with np.errstate(divide="ignore"):
                    values.append(float(np.log(p[token]) - np.log(q[token])))

    if not values:
        return KLReport(0.0, float("nan"), 0, 0, estimator)
    values_arr = np.asarray(values)
    infinite = ~np.isfinite(values_arr)
    n_infinite = int(infinite.sum())
    finite_mean = float(values_arr[~infinite].mean()) if n_infinite < len(values_arr) else float("nan")
    if n_infinite:
        logger.warning(f"Reverse KL: {n_infinite}/{len(values_arr)} positions outside teacher support")
    value = float("inf") if n_infinite else float(values_arr.mean())
    return KLReport(value, finite_mean, len(values_arr), n_infinite, estimator)


# ==========================================================
# TAXONOMÍA DE FALLOS
# ==========================================================
def failure_taxonomy(trajectory: Trajectory, env: Environment) -> str:
    """Exactly one category in FAILURE_CATEGORIES per complete trajectory."""
    if trajectory.success == 1:
        return "resolved"
    if trajectory.submitted:
        return "submitted_wrong"
    seen = Counter(
        (env.summary_key(context_of(trajectory, t)), turn.executed.tokens)
        for t, turn in enumerate(trajectory.turns, start=1)
    )
    if seen and max(seen.values()) >= LOOP_REPEATS:
        return "no_submission_loop"
    return "no_submission_budget"


def taxonomy_counts(trajectories: Sequence[Trajectory], env: Environment) -> Dict[str, int]:
    counts = dict.fromkeys(FAILURE_CATEGORIES, 0)
    for trajectory in trajectories:
        counts[failure_taxonomy(trajectory, env)] += 1
    return counts


# ==========================================================
# EVALUACIÓN COMPLETA
# ==========================================================
def evaluate_policy(
    student: Policy,
    scoring_teacher: Policy,
    env: Environment,
    instances: Sequence[TaskInstance],
    config: EvalConfig,
    seed: int,
    workers: int = 1,
    include_exact: bool = False,
) -> Dict[str, Any]:
    """
    Greedy resolution, taxonomy and reverse KL on held-out instances.

    Returns:
        Flat record with greedy_resolution_rate, reverse_kl,
        reverse_kl_finite, kl_infinite_positions, kl_positions,
        the taxonomy counts and optionally exact_resolution_rate.
    """
    trajectories = greedy_rollouts(student, env, instances, workers)
    record: Dict[str, Any] = {
        "greedy_resolution_rate": float(np.mean([t.success for t in trajectories])),
    }
    state_dist = sample_state_distribution(
        student, env, instances, config.kl_rollouts, config.kl_temperature, seed, workers=workers
    )
    kl = reverse_kl(student, scoring_teacher, state_dist, config.kl_estimator)
    record.update({
        "reverse_kl": kl.value,
        "reverse_kl_finite": kl.finite_mean,
        "kl_positions": kl.n_positions,
        "kl_infinite_positions": kl.n_infinite,
    })
    record.update(taxonomy_counts(trajectories, env))
    if include_exact:
        record["exact_resolution_rate"] = exact_resolution(student, env, instances, workers)
    return record
