# -*- coding: utf-8 -*-
"""
Mixed-Policy Rollout Module
-----------------------------------
Indicator plans for the turn-level and trajectory-level mixtures, the
rollout loop that labels every visited state with a teacher action, and
batch collection over many task instances.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from mixlab.scripts.core import (
    LabeledTransition,
    TaskInstance,
    Trajectory,
    Turn,
    batch_of,
)
from mixlab.scripts.environments import Environment
from mixlab.scripts.policy import EXACT, Policy, SamplingConfig

logger = logging.getLogger(__name__)

REGIMES = ("turn", "traj", "teacher", "student")

# Substream tags under (seed, instance id, ...)
PLAN_STREAM = 0
TRAJECTORY_STREAM = 1
GROUP_STREAM = 2


class RolloutError(RuntimeError):
    """Environment failure while collecting a trajectory."""


def substream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for (seed, *keys); order of use elsewhere is irrelevant."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *(int(k) for k in keys)]))


# ==========================================================
# PLANES DE INDICADORES
# ==========================================================
@dataclass(frozen=True)
class IndicatorPlan:
    """b_1..b_{T_max}: 1 means the teacher executes that turn."""

    indicators: Tuple[int, ...]
    regime: str
    beta: Optional[float] = None
    kappa: Optional[int] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "indicators", tuple(int(b) for b in self.indicators))
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if any(b not in (0, 1) for b in self.indicators):
            raise ValueError("indicators must be 0 or 1")
        if self.regime == "traj":
            k = self.kappa if self.kappa is not None else 0
            expected = (0,) * k + (1,) * (len(self.indicators) - k)
            if self.indicators != expected:
                raise ValueError("trajectory-level plan must be 0^kappa followed by ones")

    def __len__(self) -> int:
        return len(self.indicators)

    @property
    def teacher_fraction(self) -> float:
        return sum(self.indicators) / len(self.indicators) if self.indicators else 0.0


def sample_turn_indicators(beta: float, T_max: int, rng: np.random.Generator) -> IndicatorPlan:
    """Each b_t ~ Bernoulli(beta), independently."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must be in [0, 1], got {beta}")
    indicators = (rng.random(T_max) < beta).astype(int)
    return IndicatorPlan(tuple(indicators), "turn", beta=float(beta))


def sample_prefix_indicators(rho: Sequence[float], rng: np.random.Generator) -> IndicatorPlan:
    """
    Draw kappa ~ rho over {0..T_max} and return 0^kappa 1^(T_max - kappa).

    Args:
        rho: Probabilities for kappa = 0..T_max (length T_max + 1).
        rng: Random generator.

    Raises:
        ValueError: If rho is not a probability vector.
    """
    rho = np.asarray(rho, dtype=float)
    if rho.ndim != 1 or len(rho) < 1 or (rho < 0).any() or not np.isclose(rho.sum(), 1.0, atol=1e-9):
        raise ValueError("rho must be a probability vector over {0..T_max}")
    T_max = len(rho) - 1
    kappa = int(rng.choice(len(rho), p=rho / rho.sum()))
    return IndicatorPlan((0,) * kappa + (1,) * (T_max - kappa), "traj", kappa=kappa)


def full_teacher_plan(T_max: int) -> IndicatorPlan:
    return IndicatorPlan((1,) * T_max, "teacher", beta=1.0)


def full_student_plan(T_max: int) -> IndicatorPlan:
    return IndicatorPlan((0,) * T_max, "student", beta=0.0)


@dataclass(frozen=True)
class RolloutRegime:
    """How plans are drawn for a batch: turn (beta), traj (rho), teacher or student."""

    kind: str
    beta: Optional[float] = None
    rho: Optional[Tuple[float, ...]] = None

    def __post_init__(self) -> None:
        if self.kind not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}, got {self.kind!r}")
        if self.kind == "turn" and self.beta is None:
            raise ValueError("turn regime requires beta")
        if self.kind == "traj" and self.rho is None:
            raise ValueError("traj regime requires rho")

    def plan(self, T_max: int, rng: np.random.Generator) -> IndicatorPlan:
        if self.kind == "turn":
            return sample_turn_indicators(self.beta, T_max, rng)
        if self.kind == "traj":
            if len(self.rho) != T_max + 1:
                raise ValueError(f"rho covers {len(self.rho) - 1} turns, horizon is {T_max}")
            return sample_prefix_indicators(self.rho, rng)
        if self.kind == "teacher":
            return full_teacher_plan(T_max)
        return full_student_plan(T_max)

    def describe(self) -> str:
        if self.kind == "turn":
            return f"beta={self.beta:.2f}"
        if self.kind == "traj":
            support = np.flatnonzero(np.asarray(self.rho) > 0)
            return f"rho=U{{{support.min()}..{support.max()}}}"
        return self.kind


# ==========================================================
# ROLLOUT (ALGORITMO 1)
# ==========================================================
def collect_trajectory(
    teacher: Policy,
    student: Policy,
    env: Environment,
    instance: TaskInstance,
    plan: IndicatorPlan,
    sampling: SamplingConfig,
    rng: np.random.Generator,
) -> Tuple[Trajectory, List[LabeledTransition]]:
    """
    Roll out one trajectory under a mixed teacher/student plan.

    The teacher is queried at every visited state before the executor is
    chosen; on teacher turns that same label is executed. Teacher labels are
    drawn from the teacher's exact distribution (temperature 1, no
    truncation); ``sampling`` applies to the student only.

    Raises:
        ValueError: If the plan length differs from the instance horizon.
        RolloutError: If the environment rejects an action; names the turn.
    """
    if len(plan) != instance.horizon_cap:
        raise ValueError(f"plan length {len(plan)} != horizon_cap {instance.horizon_cap}")
    state, context = env.reset(instance)
    turns: List[Turn] = []
    for t, indicator in enumerate(plan.indicators, start=1):
        label = teacher.sample_action(context, EXACT, rng)
        executed = label if indicator == 1 else student.sample_action(context, sampling, rng)
        try:
            observation, state = env.step(state, executed, rng)
        except Exception as e:
            raise RolloutError(f"instance {instance.id}, turn {t}: {e}") from e
        turns.append(Turn(indicator, executed, label, observation))
        if executed.is_finish:
            break
        context = context.extend(executed, observation)

    trajectory = Trajectory(instance, tuple(turns), 0)
    trajectory = replace(trajectory, success=env.verify(trajectory))
    return trajectory, batch_of(trajectory)


def rollout_policy(
    policy: Policy,
    env: Environment,
    instance: TaskInstance,
    sampling: SamplingConfig,
    rng: np.random.Generator,
) -> Trajectory:
    """Unlabeled rollout of a single policy (evaluation and state sampling)."""
    state, context = env.reset(instance)
    turns: List[Turn] = []
    for t in range(1, instance.horizon_cap + 1):
        action = policy.sample_action(context, sampling, rng)
        try:
            observation, state = env.step(state, action, rng)
        except Exception as e:
            raise RolloutError(f"instance {instance.id}, turn {t}: {e}") from e
        turns.append(Turn(0, action, None, observation))
        if action.is_finish:
            break
        context = context.extend(action, observation)
    trajectory = Trajectory(instance, tuple(turns), 0)
    return replace(trajectory, success=env.verify(trajectory))


def parallel_map(fn: Callable[[Any], Any], items: Sequence[Any], workers: int = 1) -> List[Any]:
    """Map in a thread pool; results come back in input order."""
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def collect_batch(
    teacher: Policy,
    student: Policy,
    env: Environment,
    instances: Sequence[TaskInstance],
    regime: RolloutRegime,
    sampling: SamplingConfig,
    seed: int,
    workers: int = 1,
) -> Tuple[List[Trajectory], List[LabeledTransition]]:
    """
    One trajectory per instance, each with its own plan and substreams keyed
    by (seed, instance id).

    Returns:
        Trajectories in input order and the concatenation of their batches.
    """
    if not instances:
        raise ValueError("collect_batch needs at least one instance")

    def run(instance: TaskInstance) -> Tuple[Trajectory, List[LabeledTransition]]:
        plan = regime.plan(instance.horizon_cap, substream(seed, instance.id, PLAN_STREAM))
        return collect_trajectory(
            teacher, student, env, instance, plan, sampling,
            substream(seed, instance.id, TRAJECTORY_STREAM),
        )

    results = parallel_map(run, list(instances), workers)
    trajectories = [trajectory for trajectory, _ in results]
    transitions = [item for _, batch in results for item in batch]
    logger.debug(f"Collected {len(trajectories)} trajectories ({regime.describe()})")
    return trajectories, transitions


def group_rollouts(
    teacher: Policy,
    student: Policy,
    env: Environment,
    instances: Sequence[TaskInstance],
    group_size: int,
    sampling: SamplingConfig,
    seed: int,
    workers: int = 1,
) -> List[List[Trajectory]]:
    """G independent all-student rollouts per instance (policy-gradient groups)."""
    if group_size < 2:
        raise ValueError(f"group_size must be >= 2, got {group_size}")

    def run(instance: TaskInstance) -> List[Trajectory]:
        plan = full_student_plan(instance.horizon_cap)
        return [
            collect_trajectory(
                teacher, student, env, instance, plan, sampling,
                substream(seed, instance.id, GROUP_STREAM, g),
            )[0]
            for g in range(group_size)
        ]

    return parallel_map(run, list(instances), workers)


def summarize_batch(trajectories: Sequence[Trajectory], iteration: int) -> Dict[str, Any]:
    """Per-batch summary record."""
    n_turns = sum(len(t) for t in trajectories)
    teacher_turns = sum(turn.indicator for t in trajectories for turn in t.turns)
    return {
        "iteration": iteration,
        "n_trajectories": len(trajectories),
        "n_transitions": n_turns,
        "teacher_turn_fraction": teacher_turns / n_turns if n_turns else 0.0,
        "success_rate": float(np.mean([t.success for t in trajectories])) if trajectories else 0.0,
    }
