# -*- coding: utf-8 -*-
"""
Synthetic Environments Module
-----------------------------------
Environment contract (reset / step / verify), the task sampler, the
oracle teacher and an exact dynamic-programming success oracle.

Two long-horizon environments are provided. In both of them a single
early mistake moves the agent into states that expert demonstrations
never visit:

* ChainRepair: walk a chain of positions; a wrong move derails the agent
  and only a recovery action brings it back.
* TokenEdit: emit a program of (verb, argument) pairs as multi-token
  actions; a wrong pair dirties the buffer until a revert is issued.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Dict, Hashable, List, Optional, Sequence, Tuple, Union

import numpy as np

from mixlab.scripts.core import (
    ActionSeq,
    Context,
    Observation,
    TaskInstance,
    Trajectory,
    TrajectoryError,
)
from mixlab.scripts.policy import Policy

logger = logging.getLogger(__name__)

# Salt shared by every generator derived inside this module
ENV_SALT = 20_240_611
HELDOUT_ID_BASE = 1_000_000_000
MAX_DP_NODES = 10 ** 6
REPLAY_CACHE_SIZE = 200_000
PROMPT_CACHE_SIZE = 4096


# ==========================================================
# ERRORES
# ==========================================================
class UnknownInstanceError(KeyError):
    """Instance inconsistent with the environment spec."""


class MalformedActionError(ValueError):
    """Empty token list or token outside the vocabulary."""


class StateSpaceTooLargeError(ValueError):
    """Exact dynamic programming would exceed the node budget."""


# ==========================================================
# ESPECIFICACIONES Y ESTADOS
# ==========================================================
@dataclass(frozen=True)
class ChainRepairSpec:
    T_max: int
    K: int = 4
    D: int = 2
    n_prompts: int = 8
    chain_length: Optional[int] = None
    recovery_visible_to_student: bool = False
    teacher_noise: float = 0.0

    def __post_init__(self) -> None:
        if self.K < 2:
            raise ValueError(f"K must be >= 2, got {self.K}")
        if self.D < 1 or self.T_max < 1 or self.n_prompts < 1:
            raise ValueError("D, T_max and n_prompts must be positive")
        if self.length + 1 > self.T_max:
            raise ValueError(
                f"chain of length {self.length} plus finish does not fit in T_max={self.T_max}"
            )

    @property
    def length(self) -> int:
        if self.chain_length is not None:
            return self.chain_length
        return max(1, -(-self.T_max // 2))


@dataclass(frozen=True)
class TokenEditSpec:
    T_max: int
    V: int = 16
    M: int = 2
    n_prompts: int = 8
    program_length: Optional[int] = None
    teacher_noise: float = 0.0

    def __post_init__(self) -> None:
        if self.M < 2:
            raise ValueError(f"M must be >= 2, got {self.M}")
        if self.V < max(self.M, 5):
            raise ValueError(f"V must be >= max(M, 5), got V={self.V}, M={self.M}")
        if self.length > self.T_max:
            raise ValueError(f"program length {self.length} exceeds T_max={self.T_max}")
        if self.n_prompts < 1:
            raise ValueError("n_prompts must be positive")

    @property
    def length(self) -> int:
        if self.program_length is not None:
            return self.program_length
        return max(1, self.T_max // 2)


EnvSpec = Union[ChainRepairSpec, TokenEditSpec]


@dataclass(frozen=True)
class ChainState:
    prompt: int
    position: int = 0
    depth: int = 0
    finished: bool = False


@dataclass(frozen=True)
class EditState:
    prompt: int
    cursor: int = 0
    dirty: bool = False
    finished: bool = False


EnvState = Union[ChainState, EditState]


# ==========================================================
# CLASE BASE
# ==========================================================
class Environment:
    """
    Deterministic multi-turn environment over a token vocabulary.

    Subclasses define the vocabulary layout, the transition function and
    the goal test. Every state is a pure function of (prompt, executed
    actions), so ``state_of`` can rebuild it from any Context.
    """

    kind: str = ""
    vocab_size: int
    max_action_len: int
    eoa_token: Optional[int]
    finish_token: int
    observation_alphabet: Tuple[str, ...]

    def __init__(self, spec: EnvSpec) -> None:
        self.spec = spec
        # Per-instance caches: dropping the environment releases them
        self._replay = lru_cache(maxsize=REPLAY_CACHE_SIZE)(self._replay_uncached)

    @property
    def T_max(self) -> int:
        return self.spec.T_max

    # ----------------------------------------------------------
    # CONTRATO
    # ----------------------------------------------------------
    def initial_state(self, prompt: int) -> EnvState:
        raise NotImplementedError

    def _transition(self, state: EnvState, tokens: Tuple[int, ...]) -> Tuple[str, EnvState]:
        raise NotImplementedError

    def goal_reached(self, state: EnvState) -> bool:
        raise NotImplementedError

    def optimal_action(self, state: EnvState) -> ActionSeq:
        raise NotImplementedError

    def action_space(self) -> List[ActionSeq]:
        raise NotImplementedError

    def summary_key(self, context: Context) -> Hashable:
        return self.key_of_state(self.state_of(context))

    def key_of_state(self, state: EnvState) -> Hashable:
        raise NotImplementedError

    def prior_rows(self) -> Dict[Hashable, np.ndarray]:
        """Initial tabular rows for the student (empty unless an ablation asks)."""
        return {}

    # ----------------------------------------------------------
    # OPERACIONES PÚBLICAS
    # ----------------------------------------------------------
    def make_action(self, tokens: Sequence[int]) -> ActionSeq:
        tokens = tuple(int(t) for t in tokens)
        return ActionSeq(tokens, is_finish=bool(tokens) and tokens[0] == self.finish_token)

    def reset(self, instance: TaskInstance) -> Tuple[EnvState, Context]:
        """
        Fresh state and empty context for an instance.

        Raises:
            UnknownInstanceError: If the instance does not belong to this spec.
        """
        if instance.horizon_cap != self.T_max or not 0 <= instance.seed_prompt < self.spec.n_prompts:
            raise UnknownInstanceError(
                f"instance {instance.id} (prompt={instance.seed_prompt}, "
                f"horizon={instance.horizon_cap}) does not match {self.kind} spec"
            )
        return self.initial_state(instance.seed_prompt), Context(instance)

    def validate_action(self, action: ActionSeq) -> None:
        if not action.tokens:
            raise MalformedActionError("empty token list")
        if len(action.tokens) > self.max_action_len:
            raise MalformedActionError(
                f"action of {len(action.tokens)} tokens exceeds M={self.max_action_len}"
            )
        bad = [t for t in action.tokens if not 0 <= t < self.vocab_size]
        if bad:
            raise MalformedActionError(f"tokens {bad} outside vocabulary of size {self.vocab_size}")

    def step(
        self,
        state: EnvState,
        action: ActionSeq,
        rng: Optional[np.random.Generator] = None,
    ) -> Tuple[Observation, EnvState]:
        """Execute one action. ``rng`` is accepted for the contract but unused."""
        self.validate_action(action)
        if state.finished:
            raise TrajectoryError("step called after the finish action")
        if action.is_finish:
            return Observation("fin"), replace(state, finished=True)
        payload, new_state = self._transition(state, action.tokens)
        return Observation(payload), new_state

    def state_of(self, context: Context) -> EnvState:
        return self._replay(context.instance.seed_prompt, tuple(a for a, _ in context.history))

    def clear_cache(self) -> None:
        """Drop every replayed state."""
        self._replay.cache_clear()

    def _replay_uncached(self, prompt: int, actions: Tuple[ActionSeq, ...]) -> EnvState:
        if not actions:
            return self.initial_state(prompt)
        previous = self._replay(prompt, actions[:-1])
        return self.step(previous, actions[-1])[1]

    def verify(self, trajectory: Trajectory) -> int:
        """
        Terminal success signal: 1 iff the goal holds and finish was emitted.

        Raises:
            TrajectoryError: If the trajectory is incomplete.
        """
        if not trajectory.is_complete:
            raise TrajectoryError("cannot verify an incomplete trajectory")
        if not trajectory.submitted:
            return 0
        state = self.state_of(Context(trajectory.instance, tuple(
            (turn.executed, turn.observation) for turn in trajectory.turns[:-1]
        )))
        return int(self.goal_reached(state))


# ==========================================================
# CHAIN REPAIR
# ==========================================================
class ChainRepairEnv(Environment):
    """
    Tokens ``0..K-1`` are moves, ``K`` is the recovery action and ``K+1``
    is finish. Actions are single tokens (M = 1).
    """

    kind = "chain_repair"

    def __init__(self, spec: ChainRepairSpec) -> None:
        super().__init__(spec)
        self.K = spec.K
        self.D = spec.D
        self.length = spec.length
        self.recovery_token = spec.K
        self.finish_token = spec.K + 1
        self.vocab_size = spec.K + 2
        self.max_action_len = 1
        self.eoa_token = None
        self.observation_alphabet = ("ok", "err", "rec", "fin")
        self.correct_moves = lru_cache(maxsize=PROMPT_CACHE_SIZE)(self._correct_moves)

    def _correct_moves(self, prompt: int) -> Tuple[int, ...]:
        rng = np.random.default_rng(np.random.SeedSequence([ENV_SALT, 1, prompt]))
        return tuple(int(m) for m in rng.integers(self.K, size=self.length))

    def initial_state(self, prompt: int) -> ChainState:
        return ChainState(prompt=prompt)

    def _transition(self, state: ChainState, tokens: Tuple[int, ...]) -> Tuple[str, ChainState]:
        token = tokens[0]
        if state.depth == 0:
            moves = self.correct_moves(state.prompt)
            if state.position < self.length and token == moves[state.position]:
                return "ok", replace(state, position=state.position + 1)
            return "err", replace(state, depth=1)
        if token == self.recovery_token:
            return "rec", replace(state, depth=state.depth - 1)
        return "err", replace(state, depth=min(self.D, state.depth + 1))

    def goal_reached(self, state: ChainState) -> bool:
        return state.position == self.length and state.depth == 0

    def optimal_action(self, state: ChainState) -> ActionSeq:
        if state.depth > 0:
            return self.make_action([self.recovery_token])
        if state.position < self.length:
            return self.make_action([self.correct_moves(state.prompt)[state.position]])
        return self.make_action([self.finish_token])

    def action_space(self) -> List[ActionSeq]:
        return [self.make_action([t]) for t in range(self.vocab_size)]

    def key_of_state(self, state: ChainState) -> Hashable:
        # Off the chain only the derailment depth is visible
        if state.depth > 0:
            return ("off", state.depth)
        return ("on", state.prompt, state.position)

    def prior_rows(self) -> Dict[Hashable, np.ndarray]:
        if not self.spec.recovery_visible_to_student:
            return {}
        rows = {}
        for depth in range(1, self.D + 1):
            row = np.zeros((self.max_action_len, self.vocab_size))
            row[0, self.recovery_token] = 3.0
            rows[("off", depth)] = row
        return rows


# ==========================================================
# TOKEN EDIT
# ==========================================================
class TokenEditEnv(Environment):
    """
    Token layout: ``0`` end-of-action, ``1`` finish, ``2`` revert, then the
    verb tokens, then the argument tokens. A pair action is
    ``(verb, arg)`` followed by end-of-action when M > 2.
    """

    kind = "token_edit"
    EOA = 0
    FINISH = 1
    REVERT = 2

    def __init__(self, spec: TokenEditSpec) -> None:
        super().__init__(spec)
        self.vocab_size = spec.V
        self.max_action_len = spec.M
        self.eoa_token = self.EOA
        self.finish_token = self.FINISH
        self.n_verbs = (spec.V - 3) // 2
        self.n_args = spec.V - 3 - self.n_verbs
        self.n_pairs = self.n_verbs * self.n_args
        self.length = spec.length
        self.observation_alphabet = ("ok", "dirty", "clean", "fin")
        self.target_program = lru_cache(maxsize=PROMPT_CACHE_SIZE)(self._target_program)

    def pair_tokens(self, index: int) -> Tuple[int, int]:
        verb, arg = divmod(index, self.n_args)
        return 3 + verb, 3 + self.n_verbs + arg

    def _terminated(self, tokens: Sequence[int]) -> Tuple[int, ...]:
        tokens = tuple(tokens)
        if len(tokens) < self.max_action_len:
            tokens = tokens + (self.EOA,)
        return tokens

    def _target_program(self, prompt: int) -> Tuple[Tuple[int, int], ...]:
        """
        Seeding rule: digit k of the prompt in base ``n_pairs`` plus a fixed
        offset r_k (shared by all prompts) selects pair k, so distinct
        prompts below n_pairs**L give distinct programs.
        """
        offsets = np.random.default_rng(np.random.SeedSequence([ENV_SALT, 2])).integers(
            self.n_pairs, size=self.length
        )
        program = []
        value = prompt
        for k in range(self.length):
            value, digit = divmod(value, self.n_pairs)
            program.append(self.pair_tokens(int((digit + offsets[k]) % self.n_pairs)))
        return tuple(program)

    def initial_state(self, prompt: int) -> EditState:
        return EditState(prompt=prompt)

    def _transition(self, state: EditState, tokens: Tuple[int, ...]) -> Tuple[str, EditState]:
        if tokens[0] == self.REVERT:
            return "clean", replace(state, dirty=False)
        if state.dirty:
            return "dirty", state
        content = tokens[:-1] if tokens[-1] == self.EOA else tokens
        program = self.target_program(state.prompt)
        if state.cursor < self.length and content == program[state.cursor]:
            return "ok", replace(state, cursor=state.cursor + 1)
        return "dirty", replace(state, dirty=True)

    def goal_reached(self, state: EditState) -> bool:
        return state.cursor == self.length and not state.dirty

    def optimal_action(self, state: EditState) -> ActionSeq:
        if state.dirty:
            return self.make_action(self._terminated([self.REVERT]))
        if state.cursor < self.length:
            return self.make_action(self._terminated(self.target_program(state.prompt)[state.cursor]))
        return self.make_action(self._terminated([self.FINISH]))

    def action_space(self) -> List[ActionSeq]:
        actions = [self.make_action(self._terminated(self.pair_tokens(i))) for i in range(self.n_pairs)]
        actions.append(self.make_action(self._terminated([self.FINISH])))
        actions.append(self.make_action(self._terminated([self.REVERT])))
        return actions

    def key_of_state(self, state: EditState) -> Hashable:
        if state.dirty:
            return ("dirty",)
        return ("clean", state.prompt, state.cursor)


def build_environment(spec: EnvSpec) -> Environment:
    if isinstance(spec, ChainRepairSpec):
        return ChainRepairEnv(spec)
    if isinstance(spec, TokenEditSpec):
        return TokenEditEnv(spec)
    raise ValueError(f"Unsupported environment spec: {type(spec).__name__}")


# ==========================================================
# MUESTREADOR DE TAREAS
# ==========================================================
class TaskSampler:
    """Reproducible task distribution q: the prompt of an id depends only on (seed, id)."""

    def __init__(self, env: Environment, seed: int) -> None:
        self.env = env
        self.seed = int(seed)

    def instance(self, instance_id: int) -> TaskInstance:
        rng = np.random.default_rng(np.random.SeedSequence([ENV_SALT, 3, self.seed, int(instance_id)]))
        prompt = int(rng.integers(self.env.spec.n_prompts))
        return TaskInstance(id=int(instance_id), seed_prompt=prompt, horizon_cap=self.env.T_max)

    def sample(self, ids: Sequence[int]) -> List[TaskInstance]:
        return [self.instance(i) for i in ids]

    def training_batch(self, iteration: int, batch_size: int) -> List[TaskInstance]:
        start = (iteration - 1) * batch_size
        return self.sample(range(start, start + batch_size))

    def heldout(self, n: int) -> List[TaskInstance]:
        return self.sample(range(HELDOUT_ID_BASE, HELDOUT_ID_BASE + n))


# ==========================================================
# PROFESOR ORÁCULO
# ==========================================================
class OracleTeacher(Policy):
    """
    Plays the environment-optimal action with probability 1 - noise and a
    uniformly random other well-formed action otherwise.
    """

    markov = True

    def __init__(self, env: Environment, noise: float = 0.0) -> None:
        if not 0.0 <= noise < 1.0:
            raise ValueError(f"teacher noise must be in [0, 1), got {noise}")
        super().__init__(env)
        self.noise = float(noise)
        self._space = env.action_space()
        self._cache: Dict[Hashable, List[Tuple[ActionSeq, float]]] = {}

    def _distribution_for_state(self, state: EnvState) -> List[Tuple[ActionSeq, float]]:
        key = self.env.key_of_state(state)
        if key not in self._cache:
            best = self.env.optimal_action(state)
            if self.noise == 0.0:
                self._cache[key] = [(best, 1.0)]
            else:
                others = [a for a in self._space if a != best]
                share = self.noise / len(others)
                self._cache[key] = [(best, 1.0 - self.noise)] + [(a, share) for a in others]
        return self._cache[key]

    def action_distribution(self, context: Context) -> List[Tuple[ActionSeq, float]]:
        return list(self._distribution_for_state(self.env.state_of(context)))

    def token_dist(self, context: Context, prefix: Sequence[int] = ()) -> np.ndarray:
        prefix = tuple(prefix)
        mass = np.zeros(self.env.vocab_size)
        for action, p in self.action_distribution(context):
            tokens = action.tokens
            if len(tokens) > len(prefix) and tokens[: len(prefix)] == prefix:
                mass[tokens[len(prefix)]] += p
        total = mass.sum()
        # Prefijos que el profesor nunca emite: distribución nula
        return mass / total if total > 0 else mass


def oracle_teacher(env: Environment, label_noise: float = 0.0) -> OracleTeacher:
    return OracleTeacher(env, label_noise)


class SmoothedTeacher(Policy):
    """
    Token-level mixture ``(1 - epsilon) * q + epsilon / V`` of a teacher's
    next-token distribution with the uniform one over the whole vocabulary.

    Every token the student can emit, malformed actions included, keeps
    positive mass. Prefixes the base teacher never emits score as uniform.
    """

    def __init__(self, base: Policy, epsilon: float) -> None:
        if not 0.0 < epsilon < 1.0:
            raise ValueError(f"smoothing must be in (0, 1), got {epsilon}")
        super().__init__(base.env)
        self.base = base
        self.epsilon = float(epsilon)
        self.markov = base.markov
        self._uniform = np.full(self.env.vocab_size, 1.0 / self.env.vocab_size)

    def token_dist(self, context: Context, prefix: Sequence[int] = ()) -> np.ndarray:
        q = self.base.token_dist(context, prefix)
        if q.sum() <= 0:
            return self._uniform.copy()
        return (1.0 - self.epsilon) * q + self.epsilon * self._uniform


def scoring_teacher(env: Environment, label_noise: float = 0.0, smoothing: float = 0.0) -> Policy:
    """Teacher used for reverse KL and log-ratio weights: the oracle, smoothed over all V tokens."""
    teacher = oracle_teacher(env, label_noise)
    return SmoothedTeacher(teacher, smoothing) if smoothing > 0 else teacher


# ==========================================================
# ORÁCULO EXACTO (PROGRAMACIÓN DINÁMICA)
# ==========================================================
def exact_success_prob(
    policy: Policy,
    env: Environment,
    instance: TaskInstance,
    max_nodes: int = MAX_DP_NODES,
) -> float:
    """
    Exact success probability by forward dynamic programming.

    Nodes are merged by (turn, env state) when the policy is Markov in the
    environment summary, and by (turn, context) otherwise.

    Raises:
        StateSpaceTooLargeError: If more than ``max_nodes`` nodes are expanded.
    """
    state, context = env.reset(instance)
    frontier: Dict[Hashable, Tuple[float, Context, EnvState]] = {state: (1.0, context, state)}
    success = 0.0
    expanded = 0
    for _ in range(instance.horizon_cap):
        next_frontier: Dict[Hashable, Tuple[float, Context, EnvState]] = {}
        for prob, ctx, st in frontier.values():
            expanded += 1
            if expanded > max_nodes:
                raise StateSpaceTooLargeError(
                    f"more than {max_nodes} nodes for instance {instance.id}"
                )
            for action, p in policy.action_distribution(ctx):
                if p <= 0.0:
                    continue
                obs, new_state = env.step(st, action)
                if action.is_finish:
                    if env.goal_reached(new_state):
                        success += prob * p
                    continue
                new_ctx = ctx.extend(action, obs)
                key = new_state if policy.markov else new_ctx
                if key in next_frontier:
                    old_prob, rep_ctx, rep_state = next_frontier[key]
                    next_frontier[key] = (old_prob + prob * p, rep_ctx, rep_state)
                else:
                    next_frontier[key] = (prob * p, new_ctx, new_state)
        frontier = next_frontier
        if not frontier:
            break
    return float(success)
