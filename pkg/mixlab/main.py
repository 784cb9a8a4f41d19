# -*- coding: utf-8 -*-
"""
mixlab command line

    python -m mixlab.main train  --config config.ini [--seed N] [--workers W] [--out DIR]
    python -m mixlab.main study  {horizon,scaling} --config config.ini
    python -m mixlab.main eval   CHECKPOINT --config config.ini
    python -m mixlab.main replay TRAJECTORY_LOG --config config.ini

Exit codes: 0 success, 2 invalid config or checkpoint, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import pandas as pd

from mixlab import __version__
from mixlab.scripts.config_loader import ConfigError, ExperimentConfig, ExperimentConfigLoader
from mixlab.scripts.core import TaskInstance, Trajectory, parse_trajectory_records
from mixlab.scripts.environments import TaskSampler, scoring_teacher
from mixlab.scripts.metrics import KL_CONVENTION, evaluate_policy
from mixlab.scripts.policy import CheckpointError, SoftmaxPolicy, load_checkpoint
from mixlab.scripts.results_saver import ResultsSaver
from mixlab.scripts.studies import (
    bootstrap_slope_comparison,
    horizon_scaling_study,
    sample_scaling_curve,
    summarize_study,
)

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s | %(levelname)-8s | %(name)s | %(message)s"
LOG_DATEFMT = "%Y-%m-%d %H:%M:%S"


def setup_logging(level: str = "INFO", log_file: Optional[str] = None) -> None:
    """Configure the root logger once per run (stderr plus an optional file)."""
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if log_file:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file, encoding="utf-8"))
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO), format=LOG_FORMAT,
                        datefmt=LOG_DATEFMT, handlers=handlers, force=True)


def _saver(config: ExperimentConfig) -> ResultsSaver:
    return ResultsSaver(str(config.output_dir), config.config_hash, config.experiment_id)


# ==========================================================
# SUBCOMANDOS
# ==========================================================
def cmd_train(config: ExperimentConfig) -> int:
    logger.info(f"[TRAIN] {config.experiment_id}: {config.train.method.kind} on {config.env.__class__.__name__}")
    trainer = config.build_trainer()
    result = trainer.run_experiment(config.seed, _saver(config))
    final = result.state.last_evaluation
    print(f"baseline_resolution_rate={result.baseline.evaluation['greedy_resolution_rate']:.4f} "
          f"final_resolution_rate={final['greedy_resolution_rate']:.4f} reverse_kl={final['reverse_kl']:.4f}")
    return 0


def cmd_study(kind: str, config: ExperimentConfig) -> int:
    saver = _saver(config)
    if kind == "horizon":
        df = horizon_scaling_study(config, workers=config.n_workers)
        saver.save_table(df, "horizon_study.csv")
        methods = list(dict.fromkeys(df["method"]))
        if "sft" in methods and "dagger_turn" in methods:
            fraction = bootstrap_slope_comparison(df, "sft", "dagger_turn", seed=config.seed)
            saver.save_record({"method_a": "sft", "method_b": "dagger_turn", "fraction_a_steeper": fraction},
                              "horizon_study_bootstrap.csv")
            logger.info(f"[STUDY] sft slope steeper than dagger_turn in {fraction:.1%} of bootstrap resamples")
    else:
        frames = [sample_scaling_curve(config, method, workers=config.n_workers) for method in config.study.methods]
        df = pd.concat(frames, ignore_index=True)
        saver.save_table(df, "scaling_study.csv")
    summary = summarize_study(df)
    saver.save_table(summary, f"{kind}_study_summary.csv")
    print(summary.to_string(index=False))
    return 0


def cmd_eval(checkpoint: str, config: ExperimentConfig) -> int:
    params = load_checkpoint(Path(checkpoint))
    env = config.build_environment()
    try:
        student = SoftmaxPolicy(params, env)
    except ValueError as e:
        raise CheckpointError(f"{checkpoint}: {e}") from e
    scoring = scoring_teacher(env, config.env.teacher_noise, config.eval.kl_teacher_noise)
    instances = TaskSampler(env, config.seed).heldout(config.eval.heldout_instances)
    record: Dict[str, object] = {"checkpoint": Path(checkpoint).name}
    record.update(evaluate_policy(student, scoring, env, instances, config.eval, seed=config.seed,
                                  workers=config.n_workers))
    record["kl_convention"] = KL_CONVENTION
    _saver(config).save_record(record, "eval_record.csv")
    print(f"resolution_rate={record['greedy_resolution_rate']:.4f} reverse_kl={record['reverse_kl']:.4f}")
    return 0


def render_replay(parsed: Sequence[Tuple[int, Trajectory]]) -> List[str]:
    lines: List[str] = []
    for iteration, trajectory in parsed:
        lines.append(
            f"iteration {iteration} | instance {trajectory.instance.id} | prompt {trajectory.instance.seed_prompt} "
            f"| turns {len(trajectory)} | teacher {trajectory.teacher_fraction:.2f} | success {trajectory.success}"
        )
        for t, turn in enumerate(trajectory.turns, start=1):
            who = "T" if turn.indicator == 1 else "S"
            label = "-" if turn.teacher_label is None else " ".join(map(str, turn.teacher_label.tokens))
            executed = " ".join(map(str, turn.executed.tokens))
            lines.append(f"  {t:>3} {who} exec [{executed}] label [{label}] -> {turn.observation.payload}")
    return lines


def cmd_replay(log_path: str, config: ExperimentConfig, out: Optional[str] = None) -> int:
    with open(log_path, "r", encoding="utf-8") as handle:
        raw_lines = handle.read().splitlines()
    env = config.build_environment()
    sampler = TaskSampler(env, config.seed)
    ids = {json.loads(line)["instance_id"] for line in raw_lines if line.strip() and not line.startswith("#")}
    instances: Dict[int, TaskInstance] = {i: sampler.instance(i) for i in sorted(ids)}
    rendered = render_replay(parse_trajectory_records(raw_lines, instances, env.finish_token))
    if out:
        target = Path(out) / "replay.txt"
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text("\n".join(rendered) + "\n", encoding="utf-8")
        logger.info(f"Replay written to {target}")
    else:
        print("\n".join(rendered))
    return 0


# ==========================================================
# PUNTO DE ENTRADA
# ==========================================================
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="Experiment INI file")
    common.add_argument("--seed", type=int, default=None, help="Override experiment.seed")
    common.add_argument("--workers", type=int, default=None, help="Override performance.n_workers")
    common.add_argument("--out", default=None, help="Override experiment.output_dir")

    parser = argparse.ArgumentParser(prog="mixlab", description="Teacher-interleaved rollout experiments")
    parser.add_argument("--version", action="version", version=f"mixlab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="Run one training experiment")
    study = sub.add_parser("study", parents=[common], help="Run a horizon or sample-scaling study")
    study.add_argument("kind", choices=["horizon", "scaling"])
    evaluate = sub.add_parser("eval", parents=[common], help="Evaluate a checkpoint")
    evaluate.add_argument("checkpoint")
    replay = sub.add_parser("replay", parents=[common], help="Render a trajectory log")
    replay.add_argument("log")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging()
    try:
        config = ExperimentConfigLoader(args.config).load(
            seed_override=args.seed, workers_override=args.workers, output_override=args.out
        )
        setup_logging(config.log_level, config.log_file)
        if args.command == "train":
            return cmd_train(config)
        if args.command == "study":
            return cmd_study(args.kind, config)
        if args.command == "eval":
            return cmd_eval(args.checkpoint, config)
        return cmd_replay(args.log, config, args.out)
    except (ConfigError, CheckpointError) as e:
        logger.error(str(e))
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        logger.error(f"Run failed: {e}", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
