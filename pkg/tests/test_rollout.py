# -*- coding: utf-8 -*-
"""Tests for indicator plans, mixed rollouts and batch collection."""

import numpy as np
import pytest

from mixlab.scripts.core import render_trajectory_lines
from mixlab.scripts.environments import TaskSampler, oracle_teacher
from mixlab.scripts.policy import GREEDY, PolicyParams, SamplingConfig, SoftmaxPolicy
from mixlab.scripts.rollout import (
    GROUP_STREAM,
    PLAN_STREAM,
    TRAJECTORY_STREAM,
    IndicatorPlan,
    RolloutRegime,
    collect_batch,
    collect_trajectory,
    full_student_plan,
    full_teacher_plan,
    group_rollouts,
    sample_prefix_indicators,
    sample_turn_indicators,
    substream,
    summarize_batch,
)
from tests.conftest import random_tabular

SAMPLING = SamplingConfig(temperature=0.7, top_p=0.9)


def _never_finish(env):
    params = PolicyParams.initial(env)
    params.default_row[0, env.finish_token] = -1000.0
    return SoftmaxPolicy(params, env)


# ==========================================================
# PLANES
# ==========================================================
def test_turn_indicator_extremes(rng):
    assert sample_turn_indicators(1.0, 10, rng).indicators == (1,) * 10
    assert sample_turn_indicators(0.0, 10, rng).indicators == (0,) * 10
    with pytest.raises(ValueError):
        sample_turn_indicators(1.2, 10, rng)


def test_turn_indicator_statistics():
    rng = np.random.default_rng(99)
    plans = np.array([sample_turn_indicators(0.6, 40, rng).indicators for _ in range(10_000)])
    assert abs(plans.mean() - 0.6) <= 0.01
    assert np.all(np.abs(plans.mean(axis=0) - 0.6) <= 0.03)
    centered = plans - plans.mean()
    lag1 = (centered[:, :-1] * centered[:, 1:]).mean() / centered.var()
    assert abs(lag1) <= 0.02


def test_prefix_indicators_structure(rng):
    one_hot = np.zeros(6)
    one_hot[3] = 1.0
    plan = sample_prefix_indicators(one_hot, rng)
    assert plan.indicators == (0, 0, 0, 1, 1) and plan.kappa == 3
    one_hot = np.zeros(6)
    one_hot[0] = 1.0
    assert sample_prefix_indicators(one_hot, rng).indicators == (1,) * 5
    one_hot = np.zeros(6)
    one_hot[5] = 1.0
    assert sample_prefix_indicators(one_hot, rng).indicators == (0,) * 5
    with pytest.raises(ValueError):
        sample_prefix_indicators([0.5, 0.6], rng)


def test_traj_plan_must_be_prefix():
    with pytest.raises(ValueError):
        IndicatorPlan((0, 1, 0), "traj", kappa=1)


def test_regime_descriptions():
    assert RolloutRegime("turn", beta=0.8).describe() == "beta=0.80"
    rho = (0.0, 0.0, 0.5, 0.5)
    assert RolloutRegime("traj", rho=rho).describe() == "rho=U{2..3}"
    assert RolloutRegime("teacher").describe() == "teacher"
    with pytest.raises(ValueError):
        RolloutRegime("turn")
    with pytest.raises(ValueError):
        RolloutRegime("traj", rho=rho).plan(5, np.random.default_rng(0))


# ==========================================================
# ROLLOUT
# ==========================================================
def test_all_teacher_rollout_succeeds(chain_env, chain_instance, rng):
    teacher = oracle_teacher(chain_env)
    student = SoftmaxPolicy(random_tabular(chain_env, rng), chain_env)
    trajectory, batch = collect_trajectory(
        teacher, student, chain_env, chain_instance, full_teacher_plan(chain_env.T_max), SAMPLING, rng
    )
    assert trajectory.success == 1
    assert len(trajectory) == chain_env.length + 1
    assert trajectory.teacher_fraction == 1.0
    assert len(batch) == len(trajectory)
    assert all(t.label == turn.executed for t, turn in zip(batch, trajectory.turns))


def test_executor_follows_plan(chain_env, chain_instance, rng):
    teacher = oracle_teacher(chain_env)
    student = _never_finish(chain_env)
    plan = sample_turn_indicators(0.5, chain_env.T_max, np.random.default_rng(5))
    trajectory, batch = collect_trajectory(teacher, student, chain_env, chain_instance, plan, SAMPLING, rng)
    for turn, indicator in zip(trajectory.turns, plan.indicators):
        assert turn.indicator == indicator
        assert turn.teacher_label is not None
        if indicator == 1:
            assert turn.executed == turn.teacher_label
    assert len(batch) == len(trajectory)


def test_student_that_never_finishes_hits_the_cap(chain_env, chain_instance, rng):
    teacher = oracle_teacher(chain_env)
    trajectory, _ = collect_trajectory(
        teacher, _never_finish(chain_env), chain_env, chain_instance,
        full_student_plan(chain_env.T_max), SAMPLING, rng,
    )
    assert len(trajectory) == chain_env.T_max
    assert not trajectory.submitted and trajectory.success == 0


def test_plan_length_must_match(chain_env, chain_instance, rng):
    teacher = oracle_teacher(chain_env)
    with pytest.raises(ValueError):
        collect_trajectory(teacher, teacher, chain_env, chain_instance, full_teacher_plan(3), SAMPLING, rng)


def test_rollouts_are_reproducible(chain_env, chain_instance):
    teacher = oracle_teacher(chain_env, 0.1)
    student = SoftmaxPolicy(random_tabular(chain_env, np.random.default_rng(1)), chain_env)
    plan = full_student_plan(chain_env.T_max)
    runs = [
        collect_trajectory(teacher, student, chain_env, chain_instance, plan, SAMPLING,
                           np.random.default_rng(42))[0]
        for _ in range(2)
    ]
    assert render_trajectory_lines(runs[:1], "x", 1) == render_trajectory_lines(runs[1:], "x", 1)


# ==========================================================
# LOTES
# ==========================================================
@pytest.fixture
def batch_setup(chain_env):
    teacher = oracle_teacher(chain_env, 0.05)
    student = SoftmaxPolicy(random_tabular(chain_env, np.random.default_rng(8)), chain_env)
    instances = TaskSampler(chain_env, 3).training_batch(1, 6)
    return teacher, student, instances


def test_batch_matches_single_rollouts(chain_env, batch_setup):
    teacher, student, instances = batch_setup
    regime = RolloutRegime("turn", beta=0.6)
    trajectories, transitions = collect_batch(teacher, student, chain_env, instances, regime, SAMPLING, seed=11)
    for instance, trajectory in zip(instances, trajectories):
        plan = regime.plan(instance.horizon_cap, substream(11, instance.id, PLAN_STREAM))
        single, _ = collect_trajectory(teacher, student, chain_env, instance, plan, SAMPLING,
                                       substream(11, instance.id, TRAJECTORY_STREAM))
        assert single == trajectory
    assert len(transitions) == sum(len(t) for t in trajectories)


def test_batch_independent_of_order_and_workers(chain_env, batch_setup):
    teacher, student, instances = batch_setup
    regime = RolloutRegime("turn", beta=0.6)
    forward, _ = collect_batch(teacher, student, chain_env, instances, regime, SAMPLING, seed=11)
    backward, _ = collect_batch(teacher, student, chain_env, instances[::-1], regime, SAMPLING, seed=11)
    threaded, _ = collect_batch(teacher, student, chain_env, instances, regime, SAMPLING, seed=11, workers=4)
    assert forward == backward[::-1]
    assert forward == threaded


def test_empty_batch_rejected(chain_env, batch_setup):
    teacher, student, _ = batch_setup
    with pytest.raises(ValueError):
        collect_batch(teacher, student, chain_env, [], RolloutRegime("teacher"), SAMPLING, seed=0)


def test_group_rollouts(chain_env, batch_setup):
    teacher, student, instances = batch_setup
    groups = group_rollouts(teacher, student, chain_env, instances[:2], 3, SAMPLING, seed=4)
    assert [len(g) for g in groups] == [3, 3]
    for group in groups:
        assert all(turn.indicator == 0 for t in group for turn in t.turns)
    first = collect_trajectory(teacher, student, chain_env, instances[0], full_student_plan(chain_env.T_max),
                               SAMPLING, substream(4, instances[0].id, GROUP_STREAM, 0))[0]
    assert groups[0][0] == first
    with pytest.raises(ValueError):
        group_rollouts(teacher, student, chain_env, instances, 1, SAMPLING, seed=4)


def test_summarize_batch(chain_env, batch_setup):
    teacher, student, instances = batch_setup
    trajectories, _ = collect_batch(teacher, student, chain_env, instances, RolloutRegime("teacher"),
                                    GREEDY, seed=0)
    summary = summarize_batch(trajectories, 2)
    assert summary["iteration"] == 2
    assert summary["n_trajectories"] == len(instances)
    assert summary["teacher_turn_fraction"] == 1.0
    assert summary["n_transitions"] == sum(len(t) for t in trajectories)
