# -*- coding: utf-8 -*-
"""Tests for the synthetic environments, the task sampler and the exact oracle."""

import gc
import math
import weakref
from dataclasses import replace

import numpy as np
import pytest

from mixlab.scripts.core import (
    ActionSeq,
    Observation,
    TaskInstance,
    Trajectory,
    TrajectoryError,
    Turn,
    context_of,
)
from mixlab.scripts.environments import (
    HELDOUT_ID_BASE,
    ChainRepairEnv,
    ChainRepairSpec,
    MalformedActionError,
    StateSpaceTooLargeError,
    TaskSampler,
    TokenEditEnv,
    TokenEditSpec,
    UnknownInstanceError,
    build_environment,
    exact_success_prob,
    oracle_teacher,
)
from mixlab.scripts.policy import GREEDY, Policy, PolicyParams, SamplingConfig, SoftmaxPolicy
from mixlab.scripts.rollout import rollout_policy


class NoFinishUniform(Policy):
    """Uniform over every token except finish."""

    def token_dist(self, context, prefix=()):
        probs = np.ones(self.env.vocab_size)
        probs[self.env.finish_token] = 0.0
        return probs / probs.sum()


def _play(env, instance, tokens_per_turn):
    state, _ = env.reset(instance)
    turns = []
    for tokens in tokens_per_turn:
        action = env.make_action(tokens)
        obs, state = env.step(state, action)
        turns.append(Turn(0, action, None, obs))
        if action.is_finish:
            break
    return Trajectory(instance, tuple(turns), 0), state


# ==========================================================
# CHAIN REPAIR
# ==========================================================
def test_chain_transitions(chain_env, chain_instance):
    state, context = chain_env.reset(chain_instance)
    assert context.history == () and state.position == 0
    moves = chain_env.correct_moves(chain_instance.seed_prompt)
    wrong = (moves[0] + 1) % chain_env.K

    obs, on = chain_env.step(state, chain_env.make_action([moves[0]]))
    assert obs.payload == "ok" and on.position == 1 and on.depth == 0

    obs, off = chain_env.step(state, chain_env.make_action([wrong]))
    assert obs.payload == "err" and off.depth == 1 and off.position == 0
    _, deeper = chain_env.step(off, chain_env.make_action([wrong]))
    _, capped = chain_env.step(deeper, chain_env.make_action([moves[0]]))
    assert deeper.depth == 2 and capped.depth == chain_env.D

    obs, back = chain_env.step(off, chain_env.make_action([chain_env.recovery_token]))
    assert obs.payload == "rec" and back == state


def test_chain_reset_is_deterministic(chain_env, chain_instance):
    assert chain_env.reset(chain_instance) == chain_env.reset(chain_instance)


def test_chain_length_must_fit():
    with pytest.raises(ValueError):
        ChainRepairSpec(T_max=5, chain_length=5)
    assert ChainRepairSpec(T_max=20).length == 10


def test_chain_verify(chain_env, chain_instance):
    moves = chain_env.correct_moves(chain_instance.seed_prompt)
    finish = [chain_env.finish_token]
    solved, _ = _play(chain_env, chain_instance, [[m] for m in moves] + [finish])
    assert chain_env.verify(solved) == 1

    early, _ = _play(chain_env, chain_instance, [[moves[0]], finish])
    assert chain_env.verify(early) == 0

    wrong = (moves[0] + 1) % chain_env.K
    repaired, _ = _play(
        chain_env, chain_instance,
        [[wrong], [chain_env.recovery_token]] + [[m] for m in moves] + [finish],
    )
    assert len(repaired) == len(moves) + 3 and chain_env.verify(repaired) == 1


def test_chain_derailment_needs_recovery():
    env = ChainRepairEnv(ChainRepairSpec(T_max=5, K=2, D=2))
    non_recovery = [t for t in range(env.vocab_size) if t != env.recovery_token]
    for prompt in range(env.spec.n_prompts):
        moves = env.correct_moves(prompt)
        state = env.initial_state(prompt)
        derailed = []
        for move in moves:
            for token in range(env.K):
                if token != move:
                    derailed.append(env.step(state, env.make_action([token]))[1])
            state = env.step(state, env.make_action([move]))[1]
        derailed += [env.step(s, env.make_action([0]))[1] for s in list(derailed)]
        assert {s.depth for s in derailed} == {1, 2}

        for start in derailed:
            # Every sequence of non-recovery actions up to the horizon
            frontier = {start}
            for _ in range(env.T_max):
                following = set()
                for s in frontier:
                    for token in non_recovery:
                        _, reached = env.step(s, env.make_action([token]))
                        assert not env.goal_reached(reached)
                        assert reached.depth >= start.depth
                        if not reached.finished:
                            following.add(reached)
                frontier = following

            back = start
            for _ in range(start.depth):
                back = env.step(back, env.make_action([env.recovery_token]))[1]
            assert back.depth == 0 and back.position == start.position


@pytest.mark.parametrize("env_name", ["chain_env", "edit_env"])
def test_verify_ignores_observation_payloads(env_name, request):
    env = request.getfixturevalue(env_name)
    rng = np.random.default_rng(17)
    student = SoftmaxPolicy(PolicyParams.initial(env), env)
    teacher = oracle_teacher(env, 0.3)
    by_final_state = {}
    for i, instance in enumerate(TaskSampler(env, 2).heldout(30)):
        policy = teacher if i % 2 else student
        trajectory = rollout_policy(policy, env, instance, GREEDY if i % 3 == 0 else SamplingConfig(), rng)
        verdict = env.verify(trajectory)
        payloads = [turn.observation.payload for turn in trajectory.turns]
        for _ in range(3):
            shuffled = rng.permutation(payloads + list(env.observation_alphabet))[: len(payloads)]
            turns = tuple(replace(turn, observation=Observation(str(p)))
                          for turn, p in zip(trajectory.turns, shuffled))
            assert env.verify(replace(trajectory, turns=turns)) == verdict
        final = env.state_of(context_of(trajectory, len(trajectory) + 1))
        by_final_state.setdefault((instance.seed_prompt, final), set()).add(verdict)
    assert all(len(verdicts) == 1 for verdicts in by_final_state.values())


def test_verify_without_finish_is_zero(chain_env, chain_instance):
    moves = chain_env.correct_moves(chain_instance.seed_prompt)
    tokens = [[m] for m in moves] + [[chain_env.recovery_token]] * (chain_env.T_max - len(moves))
    trajectory, _ = _play(chain_env, chain_instance, tokens)
    assert not trajectory.submitted
    assert chain_env.verify(trajectory) == 0


def test_step_after_finish_raises(chain_env, chain_instance):
    state, _ = chain_env.reset(chain_instance)
    _, done = chain_env.step(state, chain_env.make_action([chain_env.finish_token]))
    with pytest.raises(TrajectoryError):
        chain_env.step(done, chain_env.make_action([0]))


def test_malformed_actions(chain_env, chain_instance):
    state, _ = chain_env.reset(chain_instance)
    with pytest.raises(MalformedActionError):
        chain_env.step(state, ActionSeq(()))
    with pytest.raises(MalformedActionError):
        chain_env.step(state, ActionSeq((chain_env.vocab_size,)))
    with pytest.raises(MalformedActionError):
        chain_env.step(state, ActionSeq((0, 0)))


def test_unknown_instance(chain_env):
    with pytest.raises(UnknownInstanceError):
        chain_env.reset(TaskInstance(0, seed_prompt=99, horizon_cap=chain_env.T_max))
    with pytest.raises(UnknownInstanceError):
        chain_env.reset(TaskInstance(0, seed_prompt=0, horizon_cap=chain_env.T_max + 1))


def test_chain_summary_keys(chain_env, chain_instance):
    moves = chain_env.correct_moves(chain_instance.seed_prompt)
    trajectory, _ = _play(chain_env, chain_instance, [[moves[0]], [(moves[1] + 1) % chain_env.K],
                                                      [chain_env.finish_token]])
    keys = [chain_env.summary_key(context_of(trajectory, t)) for t in (1, 2, 3)]
    assert keys == [("on", chain_instance.seed_prompt, 0), ("on", chain_instance.seed_prompt, 1), ("off", 1)]


def test_replay_cache_belongs_to_one_environment():
    first = ChainRepairEnv(ChainRepairSpec(T_max=10))
    second = ChainRepairEnv(ChainRepairSpec(T_max=10))
    instance = TaskSampler(first, 0).instance(0)
    moves = first.correct_moves(instance.seed_prompt)
    trajectory, final = _play(first, instance, [[m] for m in moves] + [[first.finish_token]])
    assert first.state_of(context_of(trajectory, len(trajectory) + 1)) == final
    assert first._replay.cache_info().currsize == len(trajectory) + 1
    assert second._replay.cache_info().currsize == 0

    first.clear_cache()
    assert first._replay.cache_info().currsize == 0
    assert first.state_of(context_of(trajectory, len(trajectory) + 1)) == final

    dropped = weakref.ref(first)
    del first
    gc.collect()
    assert dropped() is None


def test_recovery_prior_rows():
    plain = ChainRepairEnv(ChainRepairSpec(T_max=10))
    visible = ChainRepairEnv(ChainRepairSpec(T_max=10, recovery_visible_to_student=True))
    assert plain.prior_rows() == {}
    rows = visible.prior_rows()
    assert set(rows) == {("off", 1), ("off", 2)}
    assert np.argmax(rows[("off", 1)][0]) == visible.recovery_token


# ==========================================================
# TOKEN EDIT
# ==========================================================
def test_token_edit_distinct_programs():
    env = TokenEditEnv(TokenEditSpec(T_max=8, V=16, M=2, n_prompts=10))
    programs = {env.target_program(p) for p in range(10)}
    assert len(programs) == 10


def test_token_edit_solves_with_optimal_actions(edit_env, edit_instance):
    teacher = oracle_teacher(edit_env)
    trajectory = rollout_policy(teacher, edit_env, edit_instance, GREEDY, np.random.default_rng(0))
    assert trajectory.success == 1
    assert len(trajectory) == edit_env.length + 1
    assert all(turn.executed.tokens[-1] == edit_env.EOA for turn in trajectory.turns)


def test_token_edit_dirty_and_revert(edit_env, edit_instance):
    state, _ = edit_env.reset(edit_instance)
    verb, arg = edit_env.target_program(edit_instance.seed_prompt)[0]
    wrong_arg = 3 + edit_env.n_verbs + ((arg - 3 - edit_env.n_verbs + 1) % edit_env.n_args)
    obs, dirty = edit_env.step(state, edit_env.make_action([verb, wrong_arg, 0]))
    assert obs.payload == "dirty" and dirty.dirty
    obs, still = edit_env.step(dirty, edit_env.make_action([verb, arg, 0]))
    assert obs.payload == "dirty" and still == dirty
    obs, clean = edit_env.step(dirty, edit_env.make_action([edit_env.REVERT, 0]))
    assert obs.payload == "clean" and clean == state
    obs, ok = edit_env.step(state, edit_env.make_action([verb, arg]))
    assert obs.payload == "ok" and ok.cursor == 1


def test_token_edit_spec_bounds():
    with pytest.raises(ValueError):
        TokenEditSpec(T_max=4, V=4)
    with pytest.raises(ValueError):
        TokenEditSpec(T_max=4, M=1)


def test_build_environment():
    assert isinstance(build_environment(ChainRepairSpec(T_max=6)), ChainRepairEnv)
    assert isinstance(build_environment(TokenEditSpec(T_max=6)), TokenEditEnv)
    with pytest.raises(ValueError):
        build_environment(object())


# ==========================================================
# MUESTREADOR Y PROFESOR
# ==========================================================
def test_task_sampler_is_reproducible(chain_env):
    a = TaskSampler(chain_env, seed=5)
    b = TaskSampler(chain_env, seed=5)
    assert a.training_batch(2, 8) == b.training_batch(2, 8)
    assert [i.id for i in a.training_batch(2, 8)] == list(range(8, 16))
    heldout = a.heldout(4)
    assert heldout[0].id == HELDOUT_ID_BASE
    assert all(0 <= i.seed_prompt < chain_env.spec.n_prompts for i in heldout)


def test_noisy_teacher_distribution(chain_env, chain_instance):
    teacher = oracle_teacher(chain_env, 0.1)
    _, context = chain_env.reset(chain_instance)
    dist = dict(teacher.action_distribution(context))
    best = chain_env.optimal_action(chain_env.state_of(context))
    assert dist[best] == pytest.approx(0.9)
    assert sum(dist.values()) == pytest.approx(1.0)
    assert len(dist) == chain_env.vocab_size
    assert teacher.logprob(context, best) == pytest.approx(math.log(0.9))


def test_teacher_token_dist_for_impossible_prefix(edit_env, edit_instance):
    teacher = oracle_teacher(edit_env)
    _, context = edit_env.reset(edit_instance)
    assert teacher.token_dist(context, (edit_env.REVERT,)).sum() == 0.0


# ==========================================================
# ORÁCULO EXACTO
# ==========================================================
def test_exact_teacher_success(chain_env, chain_instance, edit_env, edit_instance):
    assert exact_success_prob(oracle_teacher(chain_env), chain_env, chain_instance) == 1.0
    assert exact_success_prob(oracle_teacher(edit_env), edit_env, edit_instance) == 1.0


def test_exact_zero_without_finish(chain_env, chain_instance):
    assert exact_success_prob(NoFinishUniform(chain_env), chain_env, chain_instance) == 0.0


def _uniform(env):
    return SoftmaxPolicy(PolicyParams.initial(env), env)


def test_exact_uniform_matches_monte_carlo(tiny_chain_env):
    env = tiny_chain_env
    instance = TaskSampler(env, 0).instance(0)
    exact = exact_success_prob(_uniform(env), env, instance)

    # Vectorized simulation of the uniform policy, independent of the DP
    n = 1_000_000
    rng = np.random.default_rng(7)
    moves = np.array(env.correct_moves(instance.seed_prompt))
    tokens = rng.integers(env.vocab_size, size=(n, env.T_max))
    position = np.zeros(n, dtype=int)
    depth = np.zeros(n, dtype=int)
    alive = np.ones(n, dtype=bool)
    success = np.zeros(n, dtype=bool)
    for t in range(env.T_max):
        tok = tokens[:, t]
        finish = alive & (tok == env.finish_token)
        success |= finish & (position == env.length) & (depth == 0)
        alive &= ~finish
        on = alive & (depth == 0)
        target = moves[np.minimum(position, env.length - 1)]
        advance = on & (position < env.length) & (tok == target)
        position = np.where(advance, position + 1, position)
        depth = np.where(on & ~advance, 1, depth)
        off = alive & ~on
        recover = off & (tok == env.recovery_token)
        depth = np.where(recover, depth - 1, np.where(off, np.minimum(env.D, depth + 1), depth))
    estimate = success.mean()
    se = math.sqrt(exact * (1 - exact) / n)
    assert exact > 0
    assert abs(estimate - exact) <= 3 * se


def test_exact_state_and_context_merging_agree():
    env = ChainRepairEnv(ChainRepairSpec(T_max=5, K=4, D=2))
    instance = TaskSampler(env, 0).instance(0)
    rng = np.random.default_rng(3)
    summary = PolicyParams.initial(env, "tabular", "summary")
    summary.default_row = rng.standard_normal(summary.row_shape)
    history = summary.copy()
    history.key_mode = "history"
    a = SoftmaxPolicy(summary, env)
    b = SoftmaxPolicy(history, env)
    assert a.markov and not b.markov
    assert exact_success_prob(a, env, instance) == pytest.approx(exact_success_prob(b, env, instance), abs=1e-12)


def test_exact_node_budget(chain_env, chain_instance):
    params = PolicyParams.initial(chain_env, "tabular", "history")
    with pytest.raises(StateSpaceTooLargeError):
        exact_success_prob(SoftmaxPolicy(params, chain_env), chain_env, chain_instance, max_nodes=1000)


def test_incomplete_trajectory_cannot_be_verified(chain_env, chain_instance):
    turn = Turn(0, chain_env.make_action([0]), None, Observation("ok"))
    with pytest.raises(TrajectoryError):
        chain_env.verify(Trajectory(chain_instance, (turn,), 0))
