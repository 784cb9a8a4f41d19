# -*- coding: utf-8 -*-
"""
Core Domain Types Module
Tasks, contexts, actions, trajectories, labeled transitions and datasets
shared by every stage of the rollout / training pipeline.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

logger = logging.getLogger(__name__)


# ==========================================================
# ERRORES DEL DOMINIO
# ==========================================================
class TrajectoryError(ValueError):
    """Malformed trajectory or turn (missing labels, broken invariants)."""


class ContextIndexError(TrajectoryError, IndexError):
    """Turn index outside the range accepted by ``context_of``."""


# ==========================================================
# TIPOS BÁSICOS
# ==========================================================
@dataclass(frozen=True)
class TaskInstance:
    """One multi-turn task drawn from the task distribution."""

    id: int
    seed_prompt: int
    horizon_cap: int

    def __post_init__(self) -> None:
        if self.horizon_cap < 1:
            raise ValueError(f"horizon_cap must be >= 1, got {self.horizon_cap}")


@dataclass(frozen=True)
class ActionSeq:
    """A multi-token action. ``is_finish`` is set by the environment."""

    tokens: Tuple[int, ...]
    is_finish: bool = False

    def __post_init__(self) -> None:
        # Normalizar listas a tuplas para que la igualdad sea estructural
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class Observation:
    payload: str


HistoryPair = Tuple[ActionSeq, Observation]


@dataclass(frozen=True)
class Context:
    """
    Observable interaction history s_t = (x, a_{1:t-1}, o_{1:t-1}).

    The history tuple shares its ActionSeq / Observation objects with the
    trajectory it was cut from; equality and hashing are structural.
    """

    instance: TaskInstance
    history: Tuple[HistoryPair, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "history", tuple(self.history))
        if len(self.history) > self.instance.horizon_cap:
            raise TrajectoryError(
                f"history length {len(self.history)} exceeds horizon_cap "
                f"{self.instance.horizon_cap}"
            )

    @property
    def turn(self) -> int:
        """1-based index of the turn about to be played."""
        return len(self.history) + 1

    def extend(self, action: ActionSeq, observation: Observation) -> "Context":
        return Context(self.instance, self.history + ((action, observation),))

    def extends(self, other: "Context") -> bool:
        """True when ``other`` is a (non-strict) prefix of this context."""
        n = len(other.history)
        return (
            self.instance == other.instance
            and len(self.history) >= n
            and self.history[:n] == other.history
        )


@dataclass(frozen=True)
class Turn:
    """One executed turn (Algorithm 1 record)."""

    indicator: int
    executed: ActionSeq
    teacher_label: Optional[ActionSeq]
    observation: Observation

    def __post_init__(self) -> None:
        if self.indicator not in (0, 1):
            raise TrajectoryError(f"indicator must be 0 or 1, got {self.indicator}")
        if self.indicator == 1 and self.executed != self.teacher_label:
            raise TrajectoryError("teacher-executed turn must reuse the teacher label")


@dataclass(frozen=True)
class Trajectory:
    instance: TaskInstance
    turns: Tuple[Turn, ...]
    success: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "turns", tuple(self.turns))
        if not self.turns:
            raise TrajectoryError("a trajectory has at least one turn")
        if len(self.turns) > self.instance.horizon_cap:
            raise TrajectoryError(
                f"trajectory of {len(self.turns)} turns exceeds horizon_cap "
                f"{self.instance.horizon_cap}"
            )
        if self.success not in (0, 1):
            raise TrajectoryError(f"success must be 0 or 1, got {self.success}")
        if not self.is_complete:
            raise TrajectoryError(
                "trajectory must end with a finish action or reach horizon_cap"
            )

    @property
    def is_complete(self) -> bool:
        return self.submitted or len(self.turns) == self.instance.horizon_cap

    @property
    def submitted(self) -> bool:
        """True when the last executed action is the finish action."""
        return self.turns[-1].executed.is_finish

    @property
    def teacher_fraction(self) -> float:
        return sum(t.indicator for t in self.turns) / len(self.turns)

    def __len__(self) -> int:
        return len(self.turns)


@dataclass(frozen=True)
class LabeledTransition:
    """(context, teacher label) pair: the unit of supervised training."""

    context: Context
    label: ActionSeq


@dataclass(frozen=True)
class Dataset:
    """
    Ordered collection of training items with the iteration that produced
    each one. Items are LabeledTransition objects, or WeightedExample
    objects for the weighted methods.
    """

    transitions: Tuple[Any, ...] = ()
    provenance: Tuple[int, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "transitions", tuple(self.transitions))
        object.__setattr__(self, "provenance", tuple(int(p) for p in self.provenance))
        if len(self.transitions) != len(self.provenance):
            raise ValueError(
                f"provenance length {len(self.provenance)} != "
                f"transitions length {len(self.transitions)}"
            )

    def __len__(self) -> int:
        return len(self.transitions)

    def from_iteration(self, iteration: int) -> List[Any]:
        return [t for t, p in zip(self.transitions, self.provenance) if p == iteration]


# ==========================================================
# OPERACIONES
# ==========================================================
def context_of(trajectory: Trajectory, t: int) -> Context:
    """
    Rebuild the context seen before turn ``t`` (1-based).

    Args:
        trajectory: Source trajectory.
        t: Turn index, 1 <= t <= len(trajectory) + 1.

    Returns:
        Context holding turns 1..t-1.

    Raises:
        ContextIndexError: If ``t`` is out of range.
    """
    if not 1 <= t <= len(trajectory.turns) + 1:
        raise ContextIndexError(
            f"turn index {t} outside 1..{len(trajectory.turns) + 1}"
        )
    history = tuple((turn.executed, turn.observation) for turn in trajectory.turns[: t - 1])
    return Context(trajectory.instance, history)


def batch_of(trajectory: Trajectory) -> List[LabeledTransition]:
    """
    Extract {(s_t, ã_t)} for every visited state of a trajectory.

    Raises:
        TrajectoryError: If any turn lacks a teacher label.
    """
    batch: List[LabeledTransition] = []
    context = Context(trajectory.instance)
    for index, turn in enumerate(trajectory.turns, start=1):
        if turn.teacher_label is None:
            raise TrajectoryError(f"missing teacher label at turn {index}")
        batch.append(LabeledTransition(context, turn.teacher_label))
        context = context.extend(turn.executed, turn.observation)
    return batch


def aggregate(existing: Dataset, fresh: Sequence[Any], iteration: int) -> Dataset:
    """D_{i+1} = D_i ∪ fresh, existing items first."""
    fresh = tuple(fresh)
    merged = Dataset(
        existing.transitions + fresh,
        existing.provenance + (int(iteration),) * len(fresh),
    )
    logger.debug(f"Aggregated {len(fresh)} items at iteration {iteration}: {len(merged)} total")
    return merged


# ==========================================================
# SERIALIZACIÓN DE TRAYECTORIAS
# ==========================================================
TRAJECTORY_FIELDS: Tuple[str, ...] = (
    "experiment_id",
    "instance_id",
    "iteration",
    "turn_index",
    "indicator",
    "executed_tokens",
    "teacher_tokens",
    "observation",
    "success_flag_on_last_turn",
)


def _render_tokens(action: Optional[ActionSeq]) -> str:
    return "" if action is None else ",".join(str(t) for t in action.tokens)


def trajectory_records(
    trajectory: Trajectory, experiment_id: str, iteration: int
) -> List[Dict[str, Any]]:
    """One record per turn with the fixed field order of the trajectory log."""
    records = []
    last = len(trajectory.turns)
    for index, turn in enumerate(trajectory.turns, start=1):
        values = (
            experiment_id,
            trajectory.instance.id,
            iteration,
            index,
            turn.indicator,
            _render_tokens(turn.executed),
            _render_tokens(turn.teacher_label),
            turn.observation.payload,
            trajectory.success if index == last else None,
        )
        records.append(dict(zip(TRAJECTORY_FIELDS, values)))
    return records


def render_trajectory_lines(
    trajectories: Iterable[Trajectory], experiment_id: str, iteration: int
) -> List[str]:
    lines = []
    for trajectory in trajectories:
        for record in trajectory_records(trajectory, experiment_id, iteration):
            lines.append(json.dumps(record, separators=(",", ":")))
    return lines


def parse_trajectory_records(
    lines: Iterable[str],
    instances: Dict[int, TaskInstance],
    finish_token: int,
) -> List[Tuple[int, Trajectory]]:
    """
    Inverse of ``trajectory_records`` for logs written by this package.

    Args:
        lines: JSON lines (header / blank lines are skipped).
        instances: Task instances by id, used to restore prompt and horizon.
        finish_token: The environment's finish token (restores ``is_finish``).

    Returns:
        List of (iteration, trajectory) in log order.
    """

    def parse_tokens(text: str) -> Optional[ActionSeq]:
        if not text:
            return None
        tokens = tuple(int(t) for t in text.split(","))
        return ActionSeq(tokens, is_finish=tokens[0] == finish_token)

    grouped: List[Tuple[Tuple[int, int], List[Dict[str, Any]]]] = []
    for line in lines:
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        record = json.loads(line)
        key = (record["iteration"], record["instance_id"])
        if record["turn_index"] == 1 or not grouped or grouped[-1][0] != key:
            grouped.append((key, []))
        grouped[-1][1].append(record)

    parsed = []
    for (iteration, instance_id), records in grouped:
        if instance_id not in instances:
            raise TrajectoryError(f"unknown instance {instance_id} in trajectory log")
        turns = tuple(
            Turn(
                indicator=int(r["indicator"]),
                executed=parse_tokens(r["executed_tokens"]),
                teacher_label=parse_tokens(r["teacher_tokens"]),
                observation=Observation(r["observation"]),
            )
            for r in records
        )
        success = records[-1]["success_flag_on_last_turn"]
        parsed.append((iteration, Trajectory(instances[instance_id], turns, int(success or 0))))
    return parsed
