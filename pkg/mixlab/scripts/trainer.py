# -*- coding: utf-8 -*-
"""
Imitation Trainer Module
-----------------------------------
Outer loop shared by every method: schedules, collection, trajectory
filtering, example construction, dataset aggregation or replacement,
mini-batch gradient ascent on the unified objective and evaluation.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from mixlab.scripts.core import Dataset, LabeledTransition, Trajectory, aggregate
from mixlab.scripts.environments import Environment, TaskSampler, oracle_teacher, scoring_teacher
from mixlab.scripts.metrics import FAILURE_CATEGORIES, EvalConfig, evaluate_policy
from mixlab.scripts.objectives import (
    MethodSpec,
    WeightedExample,
    build_examples,
    pack_shared_prefix,
    packed_loss,
    unified_loss,
)
from mixlab.scripts.policy import PolicyConfig, PolicyParams, SamplingConfig, SoftmaxPolicy
from mixlab.scripts.rollout import (
    RolloutRegime,
    collect_batch,
    group_rollouts,
    substream,
    summarize_batch,
)

logger = logging.getLogger(__name__)

DATA_MODES = ("fresh_batch", "aggregate")
FILTER_MODES = ("none", "valid_submission", "success_only")
OPTIMIZERS = ("sgd", "momentum")
LR_SCHEDULES = ("constant", "cosine")
RHO_SHIFT_MODES = ("rising_floor", "fixed")

INIT_STREAM = 7
OPTIMIZER_STREAM = 11
EVAL_STREAM = 13

REPORT_COLUMNS = [
    "iteration",
    "method",
    "beta_or_rho_summary",
    "n_collected",
    "n_retained",
    "n_examples",
    "effective_samples",
    "mean_loss",
    "greedy_resolution_rate",
    "reverse_kl",
    "skipped",
    "batch_success_rate",
    "teacher_turn_fraction",
    *FAILURE_CATEGORIES,
]


# ==========================================================
# CONFIGURACIÓN
# ==========================================================
@dataclass(frozen=True)
class Schedule:
    beta_init: float = 1.0
    beta_step: float = 0.2
    beta_floor: float = 0.6
    rho_kappa_max: int = 40
    rho_shift_mode: str = "rising_floor"
    iterations: int = 5
    epochs_per_batch: int = 3
    batch_instances: int = 512
    group_size: int = 8

    def __post_init__(self) -> None:
        if not 0.0 <= self.beta_floor <= self.beta_init <= 1.0:
            raise ValueError("schedule needs 0 <= beta_floor <= beta_init <= 1")
        if self.beta_step < 0:
            raise ValueError(f"beta_step must be >= 0, got {self.beta_step}")
        if self.rho_shift_mode not in RHO_SHIFT_MODES:
            raise ValueError(f"rho_shift_mode must be one of {RHO_SHIFT_MODES}, got {self.rho_shift_mode!r}")
        if self.rho_kappa_max < 0 or self.iterations < 0:
            raise ValueError("rho_kappa_max and iterations must be >= 0")
        if self.epochs_per_batch < 1 or self.batch_instances < 1:
            raise ValueError("epochs_per_batch and batch_instances must be >= 1")
        if self.group_size < 2:
            raise ValueError(f"group_size must be >= 2, got {self.group_size}")


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "sgd"
    step_size: float = 0.5
    momentum: float = 0.9
    minibatch_size: int = 16
    lr_schedule: str = "constant"
    warmup_ratio: float = 0.1
    min_step_size: Optional[float] = None

    def __post_init__(self) -> None:
        if self.kind not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.kind!r}")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {LR_SCHEDULES}, got {self.lr_schedule!r}")
        if self.step_size <= 0 or self.minibatch_size < 1:
            raise ValueError("step_size must be positive and minibatch_size >= 1")
        if not 0.0 <= self.momentum < 1.0 or not 0.0 <= self.warmup_ratio < 1.0:
            raise ValueError("momentum and warmup_ratio must be in [0, 1)")

    @property
    def floor_step_size(self) -> float:
        return self.min_step_size if self.min_step_size is not None else self.step_size / 10


def default_filter_mode(kind: str) -> str:
    if kind == "sft":
        return "success_only"
    if kind == "pg_grpo":
        return "none"
    return "valid_submission"


@dataclass(frozen=True)
class TrainConfig:
    method: MethodSpec
    schedule: Schedule = field(default_factory=Schedule)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    sampling: SamplingConfig = field(default_factory=lambda: SamplingConfig(temperature=0.7, top_p=0.9))
    data_mode: str = "fresh_batch"
    filter_mode: Optional[str] = None
    sample_budget: Optional[int] = None
    pack_sequences: bool = True

    def __post_init__(self) -> None:
        if self.data_mode not in DATA_MODES:
            raise ValueError(f"data_mode must be one of {DATA_MODES}, got {self.data_mode!r}")
        mode = self.resolved_filter_mode
        if mode not in FILTER_MODES:
            raise ValueError(f"filter_mode must be one of {FILTER_MODES}, got {mode!r}")
        if mode == "success_only" and self.method.kind != "sft":
            raise ValueError("filter_mode success_only is only valid for sft")
        if self.method.kind == "pg_grpo" and mode != "none":
            raise ValueError("pg_grpo rewards already carry the verifier; filter_mode must be none")
        if self.sample_budget is not None and self.sample_budget < 0:
            raise ValueError(f"sample_budget must be >= 0, got {self.sample_budget}")

    @property
    def resolved_filter_mode(self) -> str:
        return self.filter_mode if self.filter_mode is not None else default_filter_mode(self.method.kind)


# ==========================================================
# PROGRAMAS DE MEZCLA
# ==========================================================
def beta_schedule(i: int, schedule: Schedule = Schedule()) -> float:
    """beta_i = max(beta_floor, beta_init - beta_step * (i - 1))."""
    if i < 1:
        raise ValueError(f"iteration must be >= 1, got {i}")
    return max(schedule.beta_floor, schedule.beta_init - schedule.beta_step * (i - 1))


def rho_schedule(i: int, T_max: int, schedule: Schedule = Schedule()) -> np.ndarray:
    """
    Uniform distribution over {kappa_min(i), ..., K} padded to {0..T_max}.

    K = min(rho_kappa_max, T_max) and kappa_min(i) = floor(K (i - 1) / I)
    under the rising-floor mode (0 under the fixed mode).
    """
    if i < 1:
        raise ValueError(f"iteration must be >= 1, got {i}")
    K = min(schedule.rho_kappa_max, T_max)
    if schedule.rho_shift_mode == "rising_floor":
        kappa_min = min(K, (K * (i - 1)) // max(schedule.iterations, 1))
    else:
        kappa_min = 0
    rho = np.zeros(T_max + 1)
    rho[kappa_min:K + 1] = 1.0 / (K + 1 - kappa_min)
    return rho


def step_size_at(optimizer: OptimizerConfig, step: int, total_steps: int) -> float:
    """Constant, or linear warmup followed by cosine decay to the floor."""
    if optimizer.lr_schedule == "constant":
        return optimizer.step_size
    warmup = math.ceil(optimizer.warmup_ratio * total_steps)
    if step < warmup:
        return optimizer.step_size * (step + 1) / warmup
    progress = (step - warmup) / max(1, total_steps - warmup)
    low = optimizer.floor_step_size
    return low + 0.5 * (optimizer.step_size - low) * (1.0 + math.cos(math.pi * progress))


def iteration_seed(seed: int, iteration: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(iteration)]).generate_state(1)[0])


# ==========================================================
# FILTRADO DE TRAYECTORIAS
# ==========================================================
class TrajectoryFilter:
    """Drops trajectories according to a filter mode and keeps a report."""

    def __init__(self, mode: str) -> None:
        if mode not in FILTER_MODES:
            raise ValueError(f"filter_mode must be one of {FILTER_MODES}, got {mode!r}")
        self.mode = mode
        self.filter_report: Dict[str, int] = {}

    def _keep(self, trajectory: Trajectory) -> bool:
        if self.mode == "valid_submission":
            return trajectory.submitted
        if self.mode == "success_only":
            return trajectory.success == 1
        return True

    def apply(self, trajectories: Sequence[Trajectory]) -> List[Trajectory]:
        retained = [t for t in trajectories if self._keep(t)]
        self.filter_report = {
            "n_collected": len(trajectories),
            "n_retained": len(retained),
            "n_dropped": len(trajectories) - len(retained),
        }
        if self.filter_report["n_dropped"]:
            logger.debug(f"Filter '{self.mode}' dropped {self.filter_report['n_dropped']} trajectories")
        return retained

    def get_filter_report(self) -> Dict[str, int]:
        return dict(self.filter_report)


# ==========================================================
# ESTADO E INFORMES
# ==========================================================
@dataclass
class TrainerState:
    params: PolicyParams
    reference: PolicyParams
    dataset: Dataset = field(default_factory=Dataset)
    iteration: int = 0
    velocity: Optional[PolicyParams] = None
    effective_samples: int = 0
    last_evaluation: Dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class IterationReport:
    iteration: int
    method: str
    beta_or_rho_summary: str
    n_collected: int
    n_retained: int
    n_examples: int
    effective_samples: int
    mean_loss: float
    skipped: bool
    batch_success_rate: float
    teacher_turn_fraction: float
    evaluation: Dict[str, Any]

    def as_record(self) -> Dict[str, Any]:
        record = {
            "iteration": self.iteration,
            "method": self.method,
            "beta_or_rho_summary": self.beta_or_rho_summary,
            "n_collected": self.n_collected,
            "n_retained": self.n_retained,
            "n_examples": self.n_examples,
            "effective_samples": self.effective_samples,
            "mean_loss": self.mean_loss,
            "skipped": self.skipped,
            "batch_success_rate": self.batch_success_rate,
            "teacher_turn_fraction": self.teacher_turn_fraction,
        }
        record.update(self.evaluation)
        ordered = {c: record.get(c, float("nan")) for c in REPORT_COLUMNS}
        ordered.update({k: v for k, v in record.items() if k not in ordered})
        return ordered


@dataclass
class ExperimentResult:
    baseline: IterationReport
    history: List[IterationReport]
    state: TrainerState

    @property
    def params(self) -> PolicyParams:
        return self.state.params

    def records(self) -> List[Dict[str, Any]]:
        return [self.baseline.as_record()] + [r.as_record() for r in self.history]


# ==========================================================
# ENTRENADOR
# ==========================================================
class ImitationTrainer:
    """
    Runs one experiment: I iterations of collect / filter / build / update /
    evaluate for a single method on a single environment.
    """

    def __init__(
        self,
        env: Environment,
        config: TrainConfig,
        eval_config: EvalConfig = EvalConfig(),
        policy_config: PolicyConfig = PolicyConfig(),
        workers: int = 1,
        include_exact: bool = False,
    ) -> None:
        self.env = env
        self.config = config
        self.eval_config = eval_config
        self.policy_config = policy_config
        self.workers = max(1, int(workers))
        self.include_exact = include_exact
        self.teacher = oracle_teacher(env, env.spec.teacher_noise)
        # Scoring teacher keeps mass on every token so KL and log-ratio weights stay finite
        self.scoring_teacher = scoring_teacher(env, env.spec.teacher_noise, eval_config.kl_teacher_noise)
        self.filter = TrajectoryFilter(config.resolved_filter_mode)

    # ----------------------------------------------------------
    # AUXILIARES
    # ----------------------------------------------------------
    def initial_state(self, seed: int) -> TrainerState:
        params = self.policy_config.initial_params(self.env, substream(seed, INIT_STREAM))
        return TrainerState(params=params, reference=params.copy())

    def evaluate(self, params: PolicyParams, seed: int) -> Dict[str, Any]:
        instances = TaskSampler(self.env, seed).heldout(self.eval_config.heldout_instances)
        student = SoftmaxPolicy(params, self.env)
        return evaluate_policy(
            student, self.scoring_teacher, self.env, instances, self.eval_config,
            seed=int(substream(seed, EVAL_STREAM).integers(2 ** 31)),
            workers=self.workers, include_exact=self.include_exact,
        )

    def regime_for(self, iteration: int) -> RolloutRegime:
        kind = self.config.method.kind
        schedule = self.config.schedule
        if kind == "sft":
            return RolloutRegime("teacher")
        if kind == "dagger_turn":
            return RolloutRegime("turn", beta=beta_schedule(iteration, schedule))
        if kind == "aggrevate_traj":
            return RolloutRegime("traj", rho=tuple(rho_schedule(iteration, self.env.T_max, schedule)))
        return RolloutRegime("student")

    def collect(
        self, student: SoftmaxPolicy, iteration: int, seed: int
    ) -> Tuple[List[Trajectory], List[List[Trajectory]], str]:
        """Rollouts for one iteration: (trajectories, pg groups, regime summary)."""
        schedule = self.config.schedule
        instances = TaskSampler(self.env, seed).training_batch(iteration, schedule.batch_instances)
        batch_seed = iteration_seed(seed, iteration)
        if self.config.method.kind == "pg_grpo":
            groups = group_rollouts(
                self.teacher, student, self.env, instances, schedule.group_size,
                self.config.sampling, batch_seed, self.workers,
            )
            return [t for g in groups for t in g], groups, f"student x{schedule.group_size}"
        regime = self.regime_for(iteration)
        trajectories, _ = collect_batch(
            self.teacher, student, self.env, instances, regime,
            self.config.sampling, batch_seed, self.workers,
        )
        return trajectories, [], regime.describe()

    def optimize(
        self,
        state: TrainerState,
        examples: Sequence[Any],
        seed: int,
    ) -> Tuple[PolicyParams, Optional[PolicyParams], float]:
        """
        Epochs of shuffled mini-batch gradient ascent on the unified objective.

        Returns:
            (new params, new velocity, mean loss over the final epoch).
        """
        config = self.config
        method = config.method
        optimizer = config.optimizer
        params = state.params.copy()
        velocity = state.velocity.copy() if state.velocity is not None else None
        policy = SoftmaxPolicy(params, self.env)
        reference = SoftmaxPolicy(state.reference, self.env) if method.regularizer_weight > 0 else None
        use_packing = config.pack_sequences and method.teacher_labeled and reference is None

        n = len(examples)
        size = optimizer.minibatch_size
        per_epoch = math.ceil(n / size)
        total_steps = config.schedule.epochs_per_batch * per_epoch
        rng = substream(seed, OPTIMIZER_STREAM)
        step = 0
        losses: List[float] = []
        for epoch in range(config.schedule.epochs_per_batch):
            order = rng.permutation(n)
            losses = []
            for b in range(per_epoch):
                batch = [examples[k] for k in order[b * size:(b + 1) * size]]
                if use_packing:
                    batch.sort(key=lambda e: (e.context.instance.id, len(e.context.history)))
                    packs = pack_shared_prefix([LabeledTransition(e.context, e.action) for e in batch])
                    loss_sum, grad = packed_loss(policy, packs)
                    objective = -loss_sum / len(batch)
                    grad.scale(-1.0 / len(batch))
                else:
                    objective, grad = unified_loss(policy, batch, method, reference)
                lr = step_size_at(optimizer, step, total_steps)
                if optimizer.kind == "momentum":
                    velocity = velocity if velocity is not None else params.zeros_like()
                    velocity.scale(optimizer.momentum).axpy(1.0, grad)
                    params.axpy(lr, velocity)
                else:
                    params.axpy(lr, grad)
                losses.append(-objective)
                step += 1
        return params, velocity, float(np.mean(losses)) if losses else float("nan")

    def _skip(self, state: TrainerState, iteration: int, summary: str, n_collected: int = 0,
              n_retained: int = 0, batch: Optional[Dict[str, Any]] = None) -> Tuple[TrainerState, IterationReport]:
        batch = batch or {"success_rate": float("nan"), "teacher_turn_fraction": float("nan")}
        report = IterationReport(
            iteration, self.config.method.kind, summary, n_collected, n_retained, 0,
            state.effective_samples, float("nan"), True,
            batch["success_rate"], batch["teacher_turn_fraction"], dict(state.last_evaluation),
        )
        state.iteration = iteration
        return state, report

    # ----------------------------------------------------------
    # OPERACIONES PÚBLICAS
    # ----------------------------------------------------------
    def run_iteration(
        self, state: TrainerState, seed: int
    ) -> Tuple[TrainerState, IterationReport, List[Trajectory]]:
        """
        One collect / filter / build / update / evaluate round.

        An empty post-filter batch or an exhausted sample budget skips the
        update and leaves the parameters unchanged.

        Returns:
            (updated state, iteration report, collected trajectories).
        """
        config = self.config
        i = state.iteration + 1
        budget = config.sample_budget
        logger.info(f"[ITER {i}/{config.schedule.iterations}] Collecting rollouts ({config.method.kind})...")

        if budget is not None and state.effective_samples >= budget:
            logger.info(f"[ITER {i}] Sample budget {budget} exhausted, skipping")
            return (*self._skip(state, i, "budget_exhausted"), [])

        # Política congelada durante la recolección
        student = SoftmaxPolicy(state.params.copy(), self.env)
        trajectories, groups, summary = self.collect(student, i, seed)
        batch = summarize_batch(trajectories, i)
        retained = self.filter.apply(trajectories)
        report = self.filter.get_filter_report()
        logger.info(
            f"[ITER {i}] {summary}: {report['n_collected']} collected, {report['n_retained']} retained, "
            f"batch success {batch['success_rate']:.3f}"
        )

        examples: List[WeightedExample] = build_examples(
            config.method, retained, groups, student=student, teacher=self.scoring_teacher
        )
        if budget is not None:
            examples = examples[: budget - state.effective_samples]

        if not examples:
            logger.warning(f"[ITER {i}] Empty training batch after filtering; parameters unchanged")
            return (*self._skip(state, i, summary, report["n_collected"], report["n_retained"], batch), trajectories)

        if config.data_mode == "aggregate":
            dataset = aggregate(state.dataset, examples, i)
        else:
            dataset = Dataset(examples, (i,) * len(examples))

        params, velocity, mean_loss = self.optimize(state, dataset.transitions, iteration_seed(seed, i))
        effective = state.effective_samples + len(examples)
        evaluation = self.evaluate(params, seed)
        logger.info(
            f"[ITER {i}] loss {mean_loss:.4f} | greedy resolution {evaluation['greedy_resolution_rate']:.3f} "
            f"| reverse KL {evaluation['reverse_kl']:.4f}"
        )

        new_state = TrainerState(
            params=params, reference=state.reference, dataset=dataset, iteration=i,
            velocity=velocity, effective_samples=effective, last_evaluation=evaluation,
        )
        iteration_report = IterationReport(
            i, config.method.kind, summary, report["n_collected"], report["n_retained"],
            len(examples), effective, mean_loss, False,
            batch["success_rate"], batch["teacher_turn_fraction"], evaluation,
        )
        return new_state, iteration_report, trajectories

    def run_experiment(self, seed: int, saver: Optional[Any] = None) -> ExperimentResult:
        """
        Baseline evaluation followed by ``schedule.iterations`` iterations.

        Args:
            seed: Experiment seed; the only source of randomness.
            saver: Optional results saver receiving trajectories, checkpoints
                and the metrics table after every iteration.

        Returns:
            ExperimentResult with the baseline, the history and the final state.
        """
        state = self.initial_state(seed)
        state.last_evaluation = self.evaluate(state.params, seed)
        baseline = IterationReport(
            0, self.config.method.kind, "baseline", 0, 0, 0, 0, float("nan"), False,
            float("nan"), float("nan"), dict(state.last_evaluation),
        )
        logger.info(f"Baseline greedy resolution: {baseline.evaluation['greedy_resolution_rate']:.3f}")
        history: List[IterationReport] = []
        for _ in range(self.config.schedule.iterations):
            state, report, trajectories = self.run_iteration(state, seed)
            history.append(report)
            if saver is not None:
                saver.save_trajectories(trajectories, report.iteration)
                saver.save_checkpoint(state.params, f"checkpoint_iter{report.iteration}.csv")
                saver.save_metrics([baseline.as_record()] + [r.as_record() for r in history])
        result = ExperimentResult(baseline, history, state)
        if saver is not None:
            saver.save_metrics(result.records())
            saver.save_checkpoint(state.params, "checkpoint_final.csv")
        return result
