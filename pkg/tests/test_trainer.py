# -*- coding: utf-8 -*-
"""Tests for schedules, filtering and the imitation training loop."""

import logging
from collections import Counter
from dataclasses import replace

import numpy as np
import pytest

from mixlab.scripts.core import ActionSeq, Observation, TaskInstance, Trajectory, Turn
from mixlab.scripts.environments import (
    ChainRepairEnv,
    ChainRepairSpec,
    SmoothedTeacher,
    TokenEditEnv,
    TokenEditSpec,
)
from mixlab.scripts.metrics import EvalConfig
from mixlab.scripts.objectives import MethodSpec, build_examples, unified_loss
from mixlab.scripts.policy import SoftmaxPolicy
from mixlab.scripts.results_saver import METRICS_FILE, TRAJECTORY_LOG, ResultsSaver
from mixlab.scripts.trainer import (
    REPORT_COLUMNS,
    ImitationTrainer,
    OptimizerConfig,
    Schedule,
    TrainConfig,
    TrajectoryFilter,
    beta_schedule,
    iteration_seed,
    rho_schedule,
    step_size_at,
)

FAST_EVAL = EvalConfig(heldout_instances=5, kl_rollouts=5)


def _trainer(kind="dagger_turn", T_max=6, iterations=2, batch=6, eval_config=FAST_EVAL, **train):
    env = ChainRepairEnv(ChainRepairSpec(T_max=T_max, K=2, D=1))
    schedule = train.pop("schedule", Schedule(iterations=iterations, epochs_per_batch=2,
                                              batch_instances=batch, group_size=3))
    config = TrainConfig(MethodSpec(kind), schedule=schedule,
                         optimizer=train.pop("optimizer", OptimizerConfig(step_size=2.0, minibatch_size=8)),
                         **train)
    return ImitationTrainer(env, config, eval_config)


# ==========================================================
# PROGRAMAS
# ==========================================================
def test_beta_schedule_closed_form():
    values = [beta_schedule(i) for i in range(1, 11)]
    expected = [max(0.6, 1 - 0.2 * (i - 1)) for i in range(1, 11)]
    np.testing.assert_allclose(values, expected, atol=1e-12)
    assert values[0] == 1.0 and values[2] == pytest.approx(0.6) and values[4] == 0.6
    with pytest.raises(ValueError):
        beta_schedule(0)


def test_rho_schedule_rising_floor():
    first = rho_schedule(1, 40)
    np.testing.assert_allclose(first, np.full(41, 1 / 41))
    fifth = rho_schedule(5, 40)
    assert np.flatnonzero(fifth).tolist() == list(range(32, 41))
    assert fifth.sum() == pytest.approx(1.0)
    means = [float(np.arange(41) @ rho_schedule(i, 40)) for i in range(1, 6)]
    assert means == sorted(means)


def test_rho_schedule_short_horizon_and_fixed_mode():
    short = rho_schedule(3, 10)
    assert len(short) == 11 and np.flatnonzero(short).tolist() == list(range(4, 11))
    fixed = rho_schedule(5, 40, Schedule(rho_shift_mode="fixed"))
    np.testing.assert_allclose(fixed, np.full(41, 1 / 41))


def test_cosine_step_size():
    optimizer = OptimizerConfig(step_size=1.0, lr_schedule="cosine", warmup_ratio=0.1)
    assert step_size_at(optimizer, 0, 100) == pytest.approx(0.1)
    assert step_size_at(optimizer, 10, 100) == pytest.approx(1.0)
    assert step_size_at(optimizer, 99, 100) == pytest.approx(0.1, abs=1e-3)
    assert step_size_at(OptimizerConfig(step_size=0.3), 50, 100) == 0.3


def test_iteration_seed_is_stable():
    assert iteration_seed(3, 2) == iteration_seed(3, 2)
    assert iteration_seed(3, 2) != iteration_seed(3, 3)


def test_train_config_invariants():
    with pytest.raises(ValueError):
        TrainConfig(MethodSpec("dagger_turn"), filter_mode="success_only")
    with pytest.raises(ValueError):
        TrainConfig(MethodSpec("pg_grpo"), filter_mode="valid_submission")
    assert TrainConfig(MethodSpec("sft")).resolved_filter_mode == "success_only"
    assert TrainConfig(MethodSpec("opd")).resolved_filter_mode == "valid_submission"


# ==========================================================
# FILTRO
# ==========================================================
def test_trajectory_filter_modes():
    instance = TaskInstance(0, 0, 2)
    finish = Turn(1, _action(3, True), _action(3, True), Observation("fin"))
    move = Turn(1, _action(0), _action(0), Observation("ok"))
    solved = Trajectory(instance, (move, finish), 1)
    wrong = Trajectory(instance, (finish,), 0)
    capped = Trajectory(instance, (move, move), 0)
    batch = [solved, wrong, capped]
    assert TrajectoryFilter("none").apply(batch) == batch
    assert TrajectoryFilter("valid_submission").apply(batch) == [solved, wrong]
    success = TrajectoryFilter("success_only")
    assert success.apply(batch) == [solved]
    assert success.get_filter_report() == {"n_collected": 3, "n_retained": 1, "n_dropped": 2}


def _action(token, finish=False):
    return ActionSeq((token,), is_finish=finish)


# ==========================================================
# ITERACIONES
# ==========================================================
def _examples_of(trainer, seed=0):
    state = trainer.initial_state(seed)
    student = SoftmaxPolicy(state.params.copy(), trainer.env)
    trajectories, groups, _ = trainer.collect(student, 1, seed)
    retained = trainer.filter.apply(trajectories)
    return build_examples(trainer.config.method, retained, groups, student=student, teacher=trainer.scoring_teacher)


def test_token_edit_baseline_kl_is_finite():
    env = TokenEditEnv(TokenEditSpec(T_max=6, V=9, M=3))
    trainer = ImitationTrainer(env, TrainConfig(MethodSpec("sft")), FAST_EVAL)
    assert isinstance(trainer.scoring_teacher, SmoothedTeacher)
    record = trainer.evaluate(trainer.initial_state(0).params, seed=0)
    assert record["kl_infinite_positions"] == 0 and record["kl_positions"] > 0
    assert np.isfinite(record["reverse_kl"]) and record["reverse_kl"] == pytest.approx(record["reverse_kl_finite"])


def test_dagger_with_beta_one_matches_sft():
    dagger = _trainer("dagger_turn")
    sft = _trainer("sft")
    as_items = lambda examples: Counter((e.context, e.action, e.weight) for e in examples)  # noqa: E731
    assert as_items(_examples_of(dagger)) == as_items(_examples_of(sft))


def test_success_filter_keeps_every_optimal_trajectory():
    trainer = _trainer("sft")
    state = trainer.initial_state(0)
    state, report, trajectories = trainer.run_iteration(state, seed=0)
    assert report.n_collected == report.n_retained == len(trajectories)
    assert not report.skipped


def test_zero_iterations_leave_params_unchanged():
    trainer = _trainer(iterations=0)
    result = trainer.run_experiment(seed=1)
    assert result.history == []
    assert result.params.table == {}
    np.testing.assert_array_equal(result.params.default_row, trainer.initial_state(1).params.default_row)


def test_degenerate_pg_groups_leave_params_unchanged():
    trainer = _trainer("pg_grpo")
    state = trainer.initial_state(0)
    state.params.default_row[0, trainer.env.finish_token] = -1000.0
    before = state.params.copy()
    state, report, _ = trainer.run_iteration(state, seed=0)
    assert report.batch_success_rate == 0.0
    assert state.params.table == {} or all(
        np.array_equal(v, before.default_row) for v in state.params.table.values()
    )
    np.testing.assert_array_equal(state.params.default_row, before.default_row)


def test_empty_batch_skips_update(caplog):
    trainer = _trainer("opd")
    state = trainer.initial_state(0)
    state.params.default_row[0, trainer.env.finish_token] = -1000.0
    before = state.params.copy()
    with caplog.at_level(logging.WARNING):
        state, report, trajectories = trainer.run_iteration(state, seed=0)
    assert report.skipped and report.n_retained == 0 and report.n_collected == len(trajectories)
    assert state.params.table == before.table == {}
    assert "Empty training batch" in caplog.text


def test_fresh_and_aggregate_agree_on_first_iteration():
    fresh = _trainer(iterations=1)
    aggregated = _trainer(iterations=1, data_mode="aggregate")
    a = fresh.run_experiment(seed=2)
    b = aggregated.run_experiment(seed=2)
    assert a.state.dataset.transitions == b.state.dataset.transitions
    assert set(a.params.table) == set(b.params.table)
    for key in a.params.table:
        np.testing.assert_array_equal(a.params.table[key], b.params.table[key])


def test_aggregate_keeps_earlier_iterations():
    trainer = _trainer(iterations=2, data_mode="aggregate")
    result = trainer.run_experiment(seed=2)
    dataset = result.state.dataset
    assert set(dataset.provenance) == {r.iteration for r in result.history if not r.skipped}
    assert 1 in dataset.provenance
    assert len(dataset) == sum(r.n_examples for r in result.history)


def test_small_step_does_not_increase_loss():
    trainer = _trainer("sft", schedule=Schedule(iterations=1, epochs_per_batch=1, batch_instances=4),
                       optimizer=OptimizerConfig(step_size=1e-3, minibatch_size=10_000))
    state = trainer.initial_state(0)
    examples = _examples_of(trainer)
    policy = SoftmaxPolicy(state.params, trainer.env)
    before, _ = unified_loss(policy, examples, trainer.config.method)
    params, _, _ = trainer.optimize(state, examples, seed=0)
    after, _ = unified_loss(SoftmaxPolicy(params, trainer.env), examples, trainer.config.method)
    assert after >= before


def test_momentum_optimizer_keeps_velocity():
    trainer = _trainer(optimizer=OptimizerConfig(kind="momentum", step_size=0.5, minibatch_size=8))
    state = trainer.initial_state(0)
    state, report, _ = trainer.run_iteration(state, seed=0)
    assert state.velocity is not None and state.velocity.max_abs() > 0


def test_sample_budget_caps_examples():
    trainer = _trainer(iterations=3, sample_budget=10)
    result = trainer.run_experiment(seed=0)
    assert result.state.effective_samples == 10
    assert result.history[0].n_examples == 10
    assert all(r.skipped for r in result.history[1:])
    assert result.history[-1].beta_or_rho_summary == "budget_exhausted"


def test_zero_budget_returns_baseline():
    trainer = _trainer(iterations=2, sample_budget=0)
    result = trainer.run_experiment(seed=0)
    assert all(r.skipped for r in result.history)
    assert result.state.last_evaluation == result.baseline.evaluation


def test_traj_and_student_regimes():
    aggrevate = _trainer("aggrevate_traj")
    assert aggrevate.regime_for(1).describe() == "rho=U{0..6}"
    assert aggrevate.regime_for(2).describe() == "rho=U{3..6}"
    assert _trainer("opd").regime_for(1).kind == "student"
    assert _trainer("dagger_turn").regime_for(3).beta == pytest.approx(0.6)


def test_run_experiment_is_deterministic(tmp_path):
    outputs = []
    for name in ("a", "b"):
        trainer = _trainer(iterations=2)
        saver = ResultsSaver(str(tmp_path / name), "hash", "exp")
        result = trainer.run_experiment(seed=5, saver=saver)
        outputs.append(result)
        assert (tmp_path / name / "checkpoint_final.csv").exists()
        assert (tmp_path / name / "checkpoint_iter2.csv").exists()
    for filename in (METRICS_FILE, TRAJECTORY_LOG, "checkpoint_final.csv"):
        assert (tmp_path / "a" / filename).read_bytes() == (tmp_path / "b" / filename).read_bytes()
    records = outputs[0].records()
    assert [r["iteration"] for r in records] == [0, 1, 2]
    assert list(records[0])[: len(REPORT_COLUMNS)] == REPORT_COLUMNS


def test_workers_do_not_change_results():
    single = _trainer(iterations=1).run_experiment(seed=9)
    env = ChainRepairEnv(ChainRepairSpec(T_max=6, K=2, D=1))
    threaded = ImitationTrainer(env, _trainer(iterations=1).config, FAST_EVAL, workers=3).run_experiment(seed=9)
    assert all(
        _same_record(a, b) for a, b in zip(single.records(), threaded.records())
    )


def _same_record(a, b):
    return all(
        (isinstance(a[k], float) and np.isnan(a[k]) and np.isnan(b[k])) or a[k] == b[k] for k in a
    )


def test_dagger_improves_on_baseline():
    for seed in (0, 1):
        trainer = _trainer(T_max=8, iterations=3, batch=16)
        result = trainer.run_experiment(seed=seed)
        baseline = result.baseline.evaluation["greedy_resolution_rate"]
        final = result.state.last_evaluation["greedy_resolution_rate"]
        assert final > baseline


@pytest.mark.slow
def test_dagger_improves_on_default_schedule():
    env = ChainRepairEnv(ChainRepairSpec(T_max=20, K=4, D=2))
    config = TrainConfig(MethodSpec("dagger_turn"))
    for seed in range(20):
        result = ImitationTrainer(env, config, EvalConfig(kl_rollouts=20)).run_experiment(seed=seed)
        assert result.state.last_evaluation["greedy_resolution_rate"] > \
            result.baseline.evaluation["greedy_resolution_rate"]


def test_replace_filter_mode_on_method_change():
    config = TrainConfig(MethodSpec("sft"))
    switched = replace(config, method=MethodSpec("pg_grpo"), filter_mode=None)
    assert switched.resolved_filter_mode == "none"
