# -*- coding: utf-8 -*-
"""
Training Objectives Module
-----------------------------------
Weighted log-likelihood over (context, action, weight) examples. Every
post-training method handled here is one choice of where the contexts
come from, who supplies the actions and how they are weighted:

    sft             teacher rollouts,  teacher labels,  w = 1
    pg_grpo         student rollouts,  student actions, w = group-normalized reward
    opd             student rollouts,  student actions, w = log pi_e - log pi_theta
    dagger_turn     turn-level mix,    teacher labels,  w = 1
    aggrevate_traj  prefix mix,        teacher labels,  w = 1

Also contains token-level cross-entropy and shared-prefix packing with
loss masks.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import log_softmax, softmax

from mixlab.scripts.core import (
    ActionSeq,
    Context,
    LabeledTransition,
    Observation,
    TaskInstance,
    Trajectory,
    batch_of,
    context_of,
)
from mixlab.scripts.policy import Policy, PolicyParams, SoftmaxPolicy

logger = logging.getLogger(__name__)

METHOD_KINDS = ("sft", "pg_grpo", "opd", "dagger_turn", "aggrevate_traj")
TEACHER_LABELED = ("sft", "dagger_turn", "aggrevate_traj")
REGULARIZERS = ("none", "kl_to_reference")
OPD_WEIGHTINGS = ("sequence", "token")

# Floor for teacher log-probabilities of actions the teacher never emits
LOGPROB_FLOOR = -30.0
OBSERVATION_SLOT = -1


class PackingError(ValueError):
    """Transitions in one packing group disagree on their task instance."""


class MissingReferenceError(ValueError):
    """KL regularizer requested without reference parameters."""


# ==========================================================
# TIPOS
# ==========================================================
@dataclass(frozen=True)
class MethodSpec:
    kind: str
    regularizer_weight: float = 0.0
    regularizer: str = "none"
    opd_weighting: str = "sequence"

    def __post_init__(self) -> None:
        if self.kind not in METHOD_KINDS:
            raise ValueError(f"method kind must be one of {METHOD_KINDS}, got {self.kind!r}")
        if self.regularizer not in REGULARIZERS:
            raise ValueError(f"regularizer must be one of {REGULARIZERS}, got {self.regularizer!r}")
        if self.opd_weighting not in OPD_WEIGHTINGS:
            raise ValueError(f"opd_weighting must be one of {OPD_WEIGHTINGS}, got {self.opd_weighting!r}")
        if not self.regularizer_weight >= 0:
            raise ValueError(f"regularizer weight must be >= 0, got {self.regularizer_weight}")
        if self.regularizer_weight == 0 and self.regularizer != "none":
            raise ValueError("regularizer must be 'none' when lambda = 0")
        if self.regularizer_weight > 0 and self.regularizer == "none":
            raise ValueError("lambda > 0 needs a regularizer")

    @property
    def teacher_labeled(self) -> bool:
        return self.kind in TEACHER_LABELED


@dataclass(frozen=True)
class WeightedExample:
    """
    (context, action, weight) with the weight frozen at construction.

    ``token_weights`` optionally replaces ``weight`` per token position.
    """

    context: Context
    action: ActionSeq
    weight: float
    token_weights: Optional[Tuple[float, ...]] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "weight", float(self.weight))
        if not math.isfinite(self.weight):
            raise ValueError(f"example weight must be finite, got {self.weight}")
        if self.token_weights is not None:
            weights = tuple(float(w) for w in self.token_weights)
            if len(weights) != len(self.action) or not all(math.isfinite(w) for w in weights):
                raise ValueError("token weights must be finite, one per action token")
            object.__setattr__(self, "token_weights", weights)

    def position_weight(self, j: int) -> float:
        return self.token_weights[j] if self.token_weights is not None else self.weight


# ==========================================================
# ENTROPÍA CRUZADA
# ==========================================================
def ce_loss(policy: SoftmaxPolicy, transition: LabeledTransition) -> Tuple[float, PolicyParams]:
    """Token-level cross-entropy against the teacher label, and its gradient."""
    loss = -policy.logprob(transition.context, transition.label)
    grad = policy.grad_logprob(transition.context, transition.label, scale=-1.0)
    return loss, grad


# ==========================================================
# EMPAQUETADO CON PREFIJO COMPARTIDO
# ==========================================================
@dataclass(frozen=True)
class PackedSpan:
    start: int
    end: int
    is_finish: bool
    source: int = -1


@dataclass(frozen=True)
class PackedSequence:
    """
    One token stream for a chain of transitions where each context extends
    the previous one by a single executed turn.

    Stream layout: the prompt id, then every root history action followed by
    an observation slot, then each label span. When the executed action of a
    chained turn differs from its label, the executed tokens follow the
    label unmasked. ``loss_mask`` is True exactly on label tokens.
    """

    instance: TaskInstance
    tokens: Tuple[int, ...]
    loss_mask: Tuple[bool, ...]
    turns: Tuple[PackedSpan, ...]
    observations: Tuple[Observation, ...]
    segments: Tuple[PackedSpan, ...]
    root_length: int

    @property
    def n_masked(self) -> int:
        return sum(self.loss_mask)

    def unpack(self) -> List[LabeledTransition]:
        """Rebuild every (context, label) pair held by this sequence."""

        def action_at(span: PackedSpan) -> ActionSeq:
            return ActionSeq(self.tokens[span.start:span.end], is_finish=span.is_finish)

        history = tuple(
            (action_at(span), observation) for span, observation in zip(self.turns, self.observations)
        )
        return [
            LabeledTransition(Context(self.instance, history[: self.root_length + k]), action_at(segment))
            for k, segment in enumerate(self.segments)
        ]


def _extends_by_one_turn(previous: LabeledTransition, current: LabeledTransition) -> bool:
    prev_hist, hist = previous.context.history, current.context.history
    return len(hist) == len(prev_hist) + 1 and hist[:-1] == prev_hist


def _build_packed(chain: List[Tuple[int, LabeledTransition]]) -> PackedSequence:
    first = chain[0][1]
    tokens: List[int] = [first.context.instance.seed_prompt]
    mask: List[bool] = [False]
    turns: List[PackedSpan] = []
    observations: List[Observation] = []
    segments: List[PackedSpan] = []

    def emit(action: ActionSeq, masked: bool, source: int = -1) -> PackedSpan:
        start = len(tokens)
        tokens.extend(action.tokens)
        mask.extend([masked] * len(action.tokens))
        return PackedSpan(start, len(tokens), action.is_finish, source)

    for action, observation in first.context.history:
        turns.append(emit(action, False))
        observations.append(observation)
        tokens.append(OBSERVATION_SLOT)
        mask.append(False)
    for k, (index, transition) in enumerate(chain):
        span = emit(transition.label, True, index)
        segments.append(span)
        if k + 1 < len(chain):
            executed, observation = chain[k + 1][1].context.history[-1]
            # Student turns: the executed action differs from the label
            turns.append(span if executed == transition.label else emit(executed, False))
            observations.append(observation)
            tokens.append(OBSERVATION_SLOT)
            mask.append(False)
    return PackedSequence(
        first.context.instance, tuple(tokens), tuple(mask), tuple(turns),
        tuple(observations), tuple(segments), len(first.context.history),
    )


def pack_shared_prefix(transitions: Sequence[LabeledTransition]) -> List[PackedSequence]:
    """
    Pack transitions into chains sharing their context prefix.

    Transitions are grouped by instance id in first-appearance order; inside
    a group a transition joins the current chain when its context is the
    previous context extended by one turn.

    Raises:
        PackingError: If one instance id carries different task instances.
    """
    groups: Dict[int, List[Tuple[int, LabeledTransition]]] = {}
    for index, transition in enumerate(transitions):
        instance = transition.context.instance
        group = groups.setdefault(instance.id, [])
        if group and group[0][1].context.instance != instance:
            raise PackingError(f"inconsistent task instances under id {instance.id}")
        group.append((index, transition))

    packed: List[PackedSequence] = []
    for group in groups.values():
        chain: List[Tuple[int, LabeledTransition]] = []
        for item in group:
            if chain and _extends_by_one_turn(chain[-1][1], item[1]):
                chain.append(item)
                continue
            if chain:
                packed.append(_build_packed(chain))
            chain = [item]
        if chain:
            packed.append(_build_packed(chain))
    return packed


def packed_loss(policy: SoftmaxPolicy, packs: Sequence[PackedSequence]) -> Tuple[float, PolicyParams]:
    """
    Summed masked cross-entropy over packed sequences, and its gradient.

    Walks each token stream once. Contexts are rebuilt from the turn spans
    and observations of the stream, and only positions whose ``loss_mask``
    is set contribute.
    """
    total = 0.0
    grad = policy.params.zeros_like()
    for pack in packs:
        history = [
            (ActionSeq(pack.tokens[span.start:span.end], is_finish=span.is_finish), observation)
            for span, observation in zip(pack.turns, pack.observations)
        ]
        for k, segment in enumerate(pack.segments):
            context = Context(pack.instance, tuple(history[: pack.root_length + k]))
            for position in range(segment.start, segment.end):
                if not pack.loss_mask[position]:
                    continue
                prefix = pack.tokens[segment.start:position]
                token = pack.tokens[position]
                logits = policy.logits(context, prefix)
                total -= float(log_softmax(logits)[token])
                # d(-log p)/dlogits = probs - onehot
                dlogits = softmax(logits)
                dlogits[token] -= 1.0
                policy.add_logit_grad(grad, context, prefix, dlogits)
    return total, grad


# ==========================================================
# PESOS POR MÉTODO
# ==========================================================
def weight_sft(example: Optional[object] = None) -> float:
    return 1.0


def _teacher_logprob(teacher: Policy, context: Context, action: ActionSeq) -> float:
    value = teacher.logprob(context, action)
    if value < LOGPROB_FLOOR:
        logger.debug(f"Teacher log-probability {value} floored at {LOGPROB_FLOOR}")
        return LOGPROB_FLOOR
    return value


def weight_opd(student: Policy, teacher: Policy, context: Context, action: ActionSeq) -> float:
    """w = log pi_e(a|s) - log pi_theta(a|s), summed over the action's tokens."""
    return _teacher_logprob(teacher, context, action) - student.logprob(context, action)


def weight_opd_tokens(
    student: Policy, teacher: Policy, context: Context, action: ActionSeq
) -> Tuple[float, ...]:
    """Per-token log ratios; they sum to ``weight_opd``."""
    weights = []
    with np.errstate(divide="ignore"):
        for j, token in enumerate(action.tokens):
            prefix = action.tokens[:j]
            teacher_lp = max(float(np.log(teacher.token_dist(context, prefix)[token])), LOGPROB_FLOOR)
            student_lp = float(np.log(student.token_dist(context, prefix)[token]))
            weights.append(teacher_lp - student_lp)
    return tuple(weights)


def weight_pg_group(rewards: Sequence[float]) -> np.ndarray:
    """
    Group-normalized advantages (r - mean) / std with the population std.

    A group with identical rewards gets all-zero advantages.

    Raises:
        ValueError: If the group has fewer than two members.
    """
    rewards = np.asarray(rewards, dtype=float)
    if rewards.size < 2:
        raise ValueError(f"group size must be >= 2, got {rewards.size}")
    std = rewards.std()
    if std == 0:
        return np.zeros_like(rewards)
    return (rewards - rewards.mean()) / std


# ==========================================================
# OBJETIVO UNIFICADO
# ==========================================================
def _kl_position(
    policy: SoftmaxPolicy, reference: Policy, context: Context, prefix: Sequence[int]
) -> Tuple[float, np.ndarray]:
    """KL(pi_theta || pi_ref) at one position and its gradient w.r.t. the logits."""
    log_p = log_softmax(policy.logits(context, prefix))
    p = np.exp(log_p)
    with np.errstate(divide="ignore"):
        log_q = np.log(reference.token_dist(context, prefix))
    diff = np.where(p > 0, log_p - log_q, 0.0)
    kl = float(np.sum(p * diff))
    return kl, p * (diff - kl)


def unified_loss(
    policy: SoftmaxPolicy,
    examples: Sequence[WeightedExample],
    method: MethodSpec,
    reference: Optional[Policy] = None,
) -> Tuple[float, PolicyParams]:
    """
    Objective (1/N) sum_k w_k log pi(a_k|s_k) - lambda * Omega and its gradient.

    Weights are constants. Omega (kl_to_reference) is the mean over example
    contexts of the exact KL to the reference summed over the example's
    token positions. Examples are reduced in order.

    Args:
        policy: Policy whose parameters are differentiated.
        examples: Weighted examples.
        method: Method spec supplying lambda and the regularizer.
        reference: Reference policy for the KL regularizer.

    Returns:
        (objective, gradient of the objective).

    Raises:
        MissingReferenceError: If the regularizer needs a reference and none is given.
    """
    use_kl = method.regularizer == "kl_to_reference" and method.regularizer_weight > 0
    if use_kl and reference is None:
        raise MissingReferenceError("kl_to_reference regularizer requires reference parameters")
    grad = policy.params.zeros_like()
    n = len(examples)
    if n == 0:
        return 0.0, grad

    objective = 0.0
    penalty = 0.0
    for example in examples:
        context, tokens = example.context, example.action.tokens
        for j, token in enumerate(tokens):
            prefix = tokens[:j]
            logits = policy.logits(context, prefix)
            log_p = log_softmax(logits)
            w = example.position_weight(j)
            objective += w * float(log_p[token])
            if w != 0.0:
                dlogits = -softmax(logits)
                dlogits[token] += 1.0
                policy.add_logit_grad(grad, context, prefix, (w / n) * dlogits)
            if use_kl:
                kl, dkl = _kl_position(policy, reference, context, prefix)
                penalty += kl
                policy.add_logit_grad(grad, context, prefix, (-method.regularizer_weight / n) * dkl)
    value = objective / n
    if use_kl:
        value -= method.regularizer_weight * penalty / n
    return value, grad


def kl_penalty(policy: SoftmaxPolicy, reference: Policy, examples: Sequence[WeightedExample]) -> float:
    """Omega alone: mean over examples of the summed per-position KL."""
    if not examples:
        return 0.0
    total = 0.0
    for example in examples:
        for j in range(len(example.action)):
            total += _kl_position(policy, reference, example.context, example.action.tokens[:j])[0]
    return total / len(examples)


# ==========================================================
# CONSTRUCCIÓN DE EJEMPLOS
# ==========================================================
def examples_from_transitions(transitions: Sequence[LabeledTransition]) -> List[WeightedExample]:
    return [WeightedExample(t.context, t.label, weight_sft(t)) for t in transitions]


def build_examples(
    method: MethodSpec,
    trajectories: Sequence[Trajectory] = (),
    groups: Sequence[Sequence[Trajectory]] = (),
    student: Optional[Policy] = None,
    teacher: Optional[Policy] = None,
) -> List[WeightedExample]:
    """
    Turn collected rollouts into weighted examples for ``method``.

    Args:
        method: Method spec.
        trajectories: Retained trajectories (all methods except pg_grpo).
        groups: Rollout groups (pg_grpo).
        student: Collection-time student (opd weights).
        teacher: Scoring teacher (opd weights).

    Returns:
        Examples in trajectory / turn order.
    """
    if method.teacher_labeled:
        return [e for trajectory in trajectories for e in examples_from_transitions(batch_of(trajectory))]

    if method.kind == "pg_grpo":
        examples = []
        for group in groups:
            advantages = weight_pg_group([t.success for t in group])
            for trajectory, advantage in zip(group, advantages):
                for t, turn in enumerate(trajectory.turns, start=1):
                    examples.append(WeightedExample(context_of(trajectory, t), turn.executed, float(advantage)))
        return examples

    if student is None or teacher is None:
        raise ValueError("opd examples need both the student and the teacher")
    examples = []
    for trajectory in trajectories:
        for t, turn in enumerate(trajectory.turns, start=1):
            context = context_of(trajectory, t)
            if method.opd_weighting == "token":
                token_weights = weight_opd_tokens(student, teacher, context, turn.executed)
                examples.append(WeightedExample(context, turn.executed, sum(token_weights), token_weights))
            else:
                examples.append(WeightedExample(context, turn.executed, weight_opd(student, teacher, context, turn.executed)))
    return examples
