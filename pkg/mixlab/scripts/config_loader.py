# -*- coding: utf-8 -*-
"""
Experiment Config Loader Module
-----------------------------------
Módulo encargado de leer el documento INI de un experimento, validar
cada clave una sola vez y producir un ExperimentConfig inmutable.

Errors carry the dotted key and the line where it appears, rendered as
``path:LINE: section.key: message``.
"""

from __future__ import annotations

import configparser
import hashlib
import logging
import os
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

from mixlab.scripts.environments import (
    ChainRepairSpec,
    EnvSpec,
    Environment,
    TokenEditSpec,
    build_environment,
)
from mixlab.scripts.metrics import KL_ESTIMATORS, EvalConfig
from mixlab.scripts.objectives import METHOD_KINDS, OPD_WEIGHTINGS, REGULARIZERS, MethodSpec
from mixlab.scripts.policy import KEY_MODES, POLICY_MODES, PolicyConfig, SamplingConfig
from mixlab.scripts.trainer import (
    DATA_MODES,
    FILTER_MODES,
    LR_SCHEDULES,
    OPTIMIZERS,
    RHO_SHIFT_MODES,
    ImitationTrainer,
    OptimizerConfig,
    Schedule,
    TrainConfig,
)

logger = logging.getLogger(__name__)

ENV_KINDS = ("chain_repair", "token_edit")
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")
KNOWN_KEYS: Dict[str, Tuple[str, ...]] = {
    "experiment": ("id", "seed", "output_dir"),
    "env": ("kind", "t_max", "k", "d", "v", "m", "teacher_noise", "n_prompts",
            "chain_length", "program_length", "recovery_visible_to_student"),
    "policy": ("mode", "key_mode", "n_features", "init_scale"),
    "method": ("kind", "lambda", "regularizer", "opd_weighting"),
    "schedule": ("beta_init", "beta_step", "beta_floor", "rho_kappa_max", "rho_shift_mode",
                 "iterations", "epochs_per_batch", "batch_instances", "group_size"),
    "optimizer": ("kind", "step_size", "momentum", "minibatch_size", "lr_schedule", "warmup_ratio",
                  "min_step_size", "data_mode", "filter_mode", "sample_budget", "pack_sequences"),
    "sampling": ("temperature", "top_p"),
    "eval": ("heldout_instances", "kl_rollouts", "kl_temperature", "kl_estimator", "kl_teacher_noise"),
    "study": ("methods", "horizons", "budgets", "seeds", "budget"),
    "logging": ("level", "log_file"),
    "performance": ("n_workers",),
}


class ConfigError(ValueError):
    """Invalid experiment config; names the dotted key and its line."""

    def __init__(self, message: str, key: Optional[str] = None,
                 path: Optional[Path] = None, line: Optional[int] = None) -> None:
        self.message = message
        self.key = key
        self.path = path
        self.line = line
        super().__init__(self.render())

    def render(self) -> str:
        location = str(self.path) if self.path is not None else "<config>"
        if self.line is not None:
            location = f"{location}:{self.line}"
        return f"{location}: {self.key}: {self.message}" if self.key else f"{location}: {self.message}"


# ==========================================================
# CONFIGURACIONES
# ==========================================================
@dataclass(frozen=True)
class StudyConfig:
    methods: Tuple[str, ...] = ("sft", "dagger_turn")
    horizons: Tuple[int, ...] = (5, 10, 20, 40)
    budgets: Tuple[int, ...] = (0, 100, 400, 1600)
    seeds: Tuple[int, ...] = tuple(range(20))
    budget: int = 2000


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything an experiment needs; the seed is the only randomness."""

    experiment_id: str
    seed: int
    output_dir: Path
    env: EnvSpec
    policy: PolicyConfig
    train: TrainConfig
    eval: EvalConfig = field(default_factory=EvalConfig)
    study: StudyConfig = field(default_factory=StudyConfig)
    log_level: str = "INFO"
    log_file: Optional[str] = None
    n_workers: int = 1
    config_hash: str = ""
    source: Optional[Path] = None

    def build_environment(self) -> Environment:
        return build_environment(self.env)

    def build_trainer(self, workers: Optional[int] = None) -> ImitationTrainer:
        return ImitationTrainer(
            self.build_environment(), self.train, self.eval, self.policy,
            workers=self.n_workers if workers is None else workers,
        )

    def with_overrides(
        self,
        T_max: Optional[int] = None,
        method_kind: Optional[str] = None,
        sample_budget: Optional[int] = None,
        batch_instances: Optional[int] = None,
        seed: Optional[int] = None,
    ) -> "ExperimentConfig":
        """Copy with one study cell's values substituted."""
        env = self.env if T_max is None else replace(self.env, T_max=T_max)
        train = self.train
        if method_kind is not None and method_kind != train.method.kind:
            train = replace(train, method=replace(train.method, kind=method_kind), filter_mode=None)
        if sample_budget is not None:
            train = replace(train, sample_budget=sample_budget)
        if batch_instances is not None:
            train = replace(train, schedule=replace(train.schedule, batch_instances=batch_instances))
        return replace(self, env=env, train=train, seed=self.seed if seed is None else seed)


# ==========================================================
# CLASE PRINCIPAL
# ==========================================================
class ExperimentConfigLoader:
    """
    Lee y valida el documento de configuración de un experimento.

    Every value is read through a typed getter that knows the dotted key
    and can point at the offending line.
    """

    def __init__(self, config_path: str) -> None:
        """
        Args:
            config_path (str): Ruta al archivo INI.
        """
        self.path = Path(config_path)
        self.parser = configparser.ConfigParser(interpolation=None)
        self.raw_lines: List[str] = []

    # ----------------------------------------------------------
    # LECTURA
    # ----------------------------------------------------------
    def _read(self) -> None:
        try:
            text = self.path.read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config: {e}", path=self.path) from e
        self.raw_lines = text.splitlines()
        try:
            self.parser.read_string(text, source=str(self.path))
        except configparser.DuplicateOptionError as e:
            raise ConfigError("duplicate key", f"{e.section}.{e.option}", self.path, e.lineno) from e
        except configparser.DuplicateSectionError as e:
            raise ConfigError("duplicate section", e.section, self.path, e.lineno) from e
        except configparser.ParsingError as e:
            line = e.errors[0][0] if e.errors else None
            raise ConfigError("cannot parse line", None, self.path, line) from e
        except configparser.Error as e:
            raise ConfigError(str(e), path=self.path) from e

    def _line_of(self, section: str, key: Optional[str] = None) -> Optional[int]:
        current = None
        for number, raw in enumerate(self.raw_lines, start=1):
            stripped = raw.strip()
            header = re.match(r"^\[([^\]]+)\]", stripped)
            if header:
                current = header.group(1).strip().lower()
                if key is None and current == section:
                    return number
                continue
            if current == section and key is not None and re.match(
                rf"^{re.escape(key)}\s*[=:]", stripped, flags=re.IGNORECASE
            ):
                return number
        return None

    def _error(self, section: str, key: str, message: str) -> ConfigError:
        return ConfigError(message, f"{section}.{key}", self.path, self._line_of(section, key))

    def _raw(self, section: str, key: str) -> Optional[str]:
        if not self.parser.has_section(section) or not self.parser.has_option(section, key):
            return None
        value = self.parser.get(section, key).strip()
        return value if value != "" else None

    def _get(self, section: str, key: str, convert: Callable[[str], Any], default: Any = None,
             required: bool = False, check: Optional[Callable[[Any], bool]] = None,
             expected: str = "") -> Any:
        raw = self._raw(section, key)
        if raw is None:
            if required:
                raise ConfigError("missing required key", f"{section}.{key}", self.path,
                                  self._line_of(section))
            return default
        try:
            value = convert(raw)
        except (TypeError, ValueError) as e:
            raise self._error(section, key, f"invalid value {raw!r} ({e})") from e
        if check is not None and not check(value):
            raise self._error(section, key, f"value {raw!r} out of range{': ' + expected if expected else ''}")
        return value

    def _choice(self, section: str, key: str, choices: Sequence[str], default: Optional[str] = None,
                required: bool = False) -> Optional[str]:
        value = self._get(section, key, lambda s: s.strip().lower(), default, required)
        if value is not None and value not in choices:
            raise self._error(section, key, f"unknown value {value!r}; expected one of {', '.join(choices)}")
        return value

    @staticmethod
    def _bool(raw: str) -> bool:
        lowered = raw.strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ValueError("expected a boolean")

    @staticmethod
    def _int_list(raw: str) -> Tuple[int, ...]:
        values: List[int] = []
        for part in raw.split(","):
            part = part.strip()
            if not part:
                continue
            bounds = re.fullmatch(r"(\d+)\s*-\s*(\d+)", part)
            if bounds:
                values.extend(range(int(bounds.group(1)), int(bounds.group(2)) + 1))
            else:
                values.append(int(part))
        if not values:
            raise ValueError("empty list")
        return tuple(values)

    def _warn_unknown(self) -> None:
        for section in self.parser.sections():
            known = KNOWN_KEYS.get(section)
            if known is None:
                logger.warning(f"{self.path}:{self._line_of(section)}: unknown section [{section}] ignored")
                continue
            for key in self.parser.options(section):
                if key not in known:
                    logger.warning(f"{self.path}:{self._line_of(section, key)}: unknown key {section}.{key} ignored")

    def config_hash(self, seed_override: Optional[int] = None) -> str:
        """SHA-256 (16 hex digits) of the canonical sorted key/value rendering."""
        lines = [
            f"{section}.{key}={self.parser.get(section, key).strip()}"
            for section in sorted(self.parser.sections())
            for key in sorted(self.parser.options(section))
        ]
        if seed_override is not None:
            lines.append(f"override.seed={seed_override}")
        return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()[:16]

    # ----------------------------------------------------------
    # SECCIONES
    # ----------------------------------------------------------
    def _env_spec(self) -> EnvSpec:
        positive = lambda v: v >= 1  # noqa: E731
        kind = self._choice("env", "kind", ENV_KINDS, required=True)
        T_max = self._get("env", "T_max", int, required=True, check=positive, expected=">= 1")
        noise = self._get("env", "teacher_noise", float, 0.0, check=lambda v: 0.0 <= v < 1.0, expected="[0, 1)")
        n_prompts = self._get("env", "n_prompts", int, 8, check=positive, expected=">= 1")
        try:
            if kind == "chain_repair":
                return ChainRepairSpec(
                    T_max=T_max,
                    K=self._get("env", "K", int, 4, check=lambda v: v >= 2, expected=">= 2"),
                    D=self._get("env", "D", int, 2, check=positive, expected=">= 1"),
                    n_prompts=n_prompts,
                    chain_length=self._get("env", "chain_length", int, None, check=positive, expected=">= 1"),
                    recovery_visible_to_student=self._get("env", "recovery_visible_to_student", self._bool, False),
                    teacher_noise=noise,
                )
            return TokenEditSpec(
                T_max=T_max,
                V=self._get("env", "V", int, 16, check=lambda v: v >= 5, expected=">= 5"),
                M=self._get("env", "M", int, 2, check=lambda v: v >= 2, expected=">= 2"),
                n_prompts=n_prompts,
                program_length=self._get("env", "program_length", int, None, check=positive, expected=">= 1"),
                teacher_noise=noise,
            )
        except ValueError as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(str(e), "env", self.path, self._line_of("env")) from e

    def _policy(self) -> PolicyConfig:
        return PolicyConfig(
            mode=self._choice("policy", "mode", POLICY_MODES, "tabular"),
            key_mode=self._choice("policy", "key_mode", KEY_MODES, "summary"),
            n_features=self._get("policy", "n_features", int, 64, check=lambda v: v >= 1, expected=">= 1"),
            init_scale=self._get("policy", "init_scale", float, 0.0, check=lambda v: v >= 0, expected=">= 0"),
        )

    def _method(self) -> MethodSpec:
        kind = self._choice("method", "kind", METHOD_KINDS, required=True)
        weight = self._get("method", "lambda", float, 0.0, check=lambda v: v >= 0, expected=">= 0")
        regularizer = self._choice("method", "regularizer", REGULARIZERS,
                                   "kl_to_reference" if weight > 0 else "none")
        weighting = self._choice("method", "opd_weighting", OPD_WEIGHTINGS, "sequence")
        try:
            return MethodSpec(kind, weight, regularizer, weighting)
        except ValueError as e:
            raise self._error("method", "regularizer", str(e)) from e

    def _schedule(self) -> Schedule:
        unit = lambda v: 0.0 <= v <= 1.0  # noqa: E731
        values = dict(
            beta_init=self._get("schedule", "beta_init", float, 1.0, check=unit, expected="[0, 1]"),
            beta_step=self._get("schedule", "beta_step", float, 0.2, check=lambda v: v >= 0, expected=">= 0"),
            beta_floor=self._get("schedule", "beta_floor", float, 0.6, check=unit, expected="[0, 1]"),
            rho_kappa_max=self._get("schedule", "rho_kappa_max", int, 40, check=lambda v: v >= 0, expected=">= 0"),
            rho_shift_mode=self._choice("schedule", "rho_shift_mode", RHO_SHIFT_MODES, "rising_floor"),
            iterations=self._get("schedule", "iterations", int, 5, check=lambda v: v >= 0, expected=">= 0"),
            epochs_per_batch=self._get("schedule", "epochs_per_batch", int, 3, check=lambda v: v >= 1, expected=">= 1"),
            batch_instances=self._get("schedule", "batch_instances", int, 512, check=lambda v: v >= 1, expected=">= 1"),
            group_size=self._get("schedule", "group_size", int, 8, check=lambda v: v >= 2, expected=">= 2"),
        )
        try:
            return Schedule(**values)
        except ValueError as e:
            raise self._error("schedule", "beta_floor", str(e)) from e

    def _optimizer(self, policy_mode: str) -> OptimizerConfig:
        default_step = 0.5 if policy_mode == "tabular" else 0.05
        positive = lambda v: v > 0  # noqa: E731
        return OptimizerConfig(
            kind=self._choice("optimizer", "kind", OPTIMIZERS, "sgd"),
            step_size=self._get("optimizer", "step_size", float, default_step, check=positive, expected="> 0"),
            momentum=self._get("optimizer", "momentum", float, 0.9, check=lambda v: 0 <= v < 1, expected="[0, 1)"),
            minibatch_size=self._get("optimizer", "minibatch_size", int, 16, check=lambda v: v >= 1, expected=">= 1"),
            lr_schedule=self._choice("optimizer", "lr_schedule", LR_SCHEDULES, "constant"),
            warmup_ratio=self._get("optimizer", "warmup_ratio", float, 0.1, check=lambda v: 0 <= v < 1, expected="[0, 1)"),
            min_step_size=self._get("optimizer", "min_step_size", float, None, check=lambda v: v >= 0, expected=">= 0"),
        )

    def _train(self, method: MethodSpec, policy: PolicyConfig) -> TrainConfig:
        sampling = SamplingConfig(
            temperature=self._get("sampling", "temperature", float, 0.7, check=lambda v: v > 0, expected="> 0"),
            top_p=self._get("sampling", "top_p", float, 0.9, check=lambda v: 0 < v <= 1, expected="(0, 1]"),
        )
        filter_mode = self._choice("optimizer", "filter_mode", FILTER_MODES, None)
        try:
            return TrainConfig(
                method=method,
                schedule=self._schedule(),
                optimizer=self._optimizer(policy.mode),
                sampling=sampling,
                data_mode=self._choice("optimizer", "data_mode", DATA_MODES, "fresh_batch"),
                filter_mode=filter_mode,
                sample_budget=self._get("optimizer", "sample_budget", int, None, check=lambda v: v >= 0, expected=">= 0"),
                pack_sequences=self._get("optimizer", "pack_sequences", self._bool, True),
            )
        except ValueError as e:
            if isinstance(e, ConfigError):
                raise
            raise self._error("optimizer", "filter_mode", str(e)) from e

    def _eval(self) -> EvalConfig:
        return EvalConfig(
            heldout_instances=self._get("eval", "heldout_instances", int, 100, check=lambda v: v >= 1, expected=">= 1"),
            kl_rollouts=self._get("eval", "kl_rollouts", int, 100, check=lambda v: v >= 0, expected=">= 0"),
            kl_temperature=self._get("eval", "kl_temperature", float, 0.7, check=lambda v: v > 0, expected="> 0"),
            kl_estimator=self._choice("eval", "kl_estimator", KL_ESTIMATORS, "exact"),
            kl_teacher_noise=self._get("eval", "kl_teacher_noise", float, 0.01,
                                       check=lambda v: 0 <= v < 1, expected="[0, 1)"),
        )

    def _study(self) -> StudyConfig:
        defaults = StudyConfig()
        methods_raw = self._get("study", "methods", lambda s: tuple(m.strip().lower() for m in s.split(",") if m.strip()),
                                defaults.methods)
        unknown = [m for m in methods_raw if m not in METHOD_KINDS]
        if unknown:
            raise self._error("study", "methods", f"unknown method(s) {', '.join(unknown)}")
        budgets = self._get("study", "budgets", self._int_list, defaults.budgets)
        if list(budgets) != sorted(budgets):
            raise self._error("study", "budgets", "budgets must be increasing")
        return StudyConfig(
            methods=methods_raw,
            horizons=self._get("study", "horizons", self._int_list, defaults.horizons,
                               check=lambda v: min(v) >= 1, expected="horizons >= 1"),
            budgets=budgets,
            seeds=self._get("study", "seeds", self._int_list, defaults.seeds),
            budget=self._get("study", "budget", int, defaults.budget, check=lambda v: v >= 0, expected=">= 0"),
        )

    # ----------------------------------------------------------
    # OPERACIÓN PÚBLICA
    # ----------------------------------------------------------
    def load(self, seed_override: Optional[int] = None, workers_override: Optional[int] = None,
             output_override: Optional[str] = None) -> ExperimentConfig:
        """
        Lee, valida y congela la configuración.

        Args:
            seed_override: Replaces experiment.seed (--seed).
            workers_override: Replaces performance.n_workers (--workers).
            output_override: Replaces experiment.output_dir (--out).

        Returns:
            ExperimentConfig listo para el entrenador.

        Raises:
            ConfigError: Invalid, missing or out-of-range values.
        """
        self._read()
        self._warn_unknown()
        env = self._env_spec()
        policy = self._policy()
        method = self._method()
        train = self._train(method, policy)
        seed = self._get("experiment", "seed", int, required=seed_override is None,
                         check=lambda v: v >= 0, expected=">= 0")
        seed = seed_override if seed_override is not None else seed
        workers = workers_override if workers_override is not None else self._get(
            "performance", "n_workers", int, 1, check=lambda v: v >= 0, expected=">= 0")
        if workers == 0:
            workers = os.cpu_count() or 1

        config = ExperimentConfig(
            experiment_id=self._get("experiment", "id", str, self.path.stem),
            seed=seed,
            output_dir=Path(output_override or self._get("experiment", "output_dir", str, "outputs")),
            env=env,
            policy=policy,
            train=train,
            eval=self._eval(),
            study=self._study(),
            log_level=self._choice("logging", "level", [l.lower() for l in LOG_LEVELS], "info").upper(),
            log_file=self._get("logging", "log_file", str, None),
            n_workers=workers,
            config_hash=self.config_hash(seed_override),
            source=self.path,
        )
        logger.info(
            f"Config loaded: {config.experiment_id} | env={env.__class__.__name__}(T_max={env.T_max}) "
            f"| method={method.kind} | seed={seed} | hash={config.config_hash}"
        )
        return config


def load_config(config_path: str, **overrides: Any) -> ExperimentConfig:
    return ExperimentConfigLoader(config_path).load(**overrides)
