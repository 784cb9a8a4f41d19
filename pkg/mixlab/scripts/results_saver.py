# -*- coding: utf-8 -*-
"""
Results Saver Module
Writes metrics tables, trajectory logs, checkpoints, study tables and
eval records. Every file starts with a provenance header line and
contains no timestamps, so identical runs produce identical bytes.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import pandas as pd

from mixlab import __version__
from mixlab.scripts.core import Trajectory, render_trajectory_lines
from mixlab.scripts.policy import PolicyParams, save_checkpoint

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.csv"
TRAJECTORY_LOG = "trajectories.jsonl"
FLOAT_FORMAT = "%.10g"


def provenance_header(config_hash: str) -> str:
    return f"# mixlab {__version__} config={config_hash}"


class ResultsSaver:
    """Class for saving experiment outputs under one directory."""

    def __init__(self, output_dir: str, config_hash: str, experiment_id: str = "mixlab",
                 extra_header: Sequence[str] = ()) -> None:
        """
        Initialize the saver and truncate the trajectory log.

        Args:
            output_dir: Directory where outputs will be saved.
            config_hash: Hash written into every header line.
            experiment_id: Experiment id written into trajectory records.
            extra_header: Further '#' lines placed after the provenance line.
        """
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.config_hash = config_hash
        self.experiment_id = experiment_id
        self.header_lines: List[str] = [provenance_header(config_hash), *extra_header]
        self._log_started = False

    def _write_frame(self, df: pd.DataFrame, file_path: Path) -> Path:
        with open(file_path, "w", encoding="utf-8", newline="") as handle:
            for line in self.header_lines:
                handle.write(line + "\n")
            df.to_csv(handle, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        return file_path

    def save_table(self, records: Sequence[Dict[str, Any]] | pd.DataFrame, filename: str) -> Path:
        df = records if isinstance(records, pd.DataFrame) else pd.DataFrame(list(records))
        file_path = self.output_dir / filename
        logger.info(f"Saving table to CSV: {file_path}")
        self._write_frame(df, file_path)
        logger.info(f"Table saved successfully: {len(df)} rows")
        return file_path

    def save_metrics(self, records: Sequence[Dict[str, Any]]) -> Path:
        """Rewrite the metrics CSV with every record so far."""
        file_path = self.output_dir / METRICS_FILE
        self._write_frame(pd.DataFrame(list(records)), file_path)
        logger.debug(f"Metrics updated: {len(records)} rows")
        return file_path

    def save_trajectories(self, trajectories: Sequence[Trajectory], iteration: int) -> Path:
        """Append one JSON line per turn to the trajectory log."""
        file_path = self.output_dir / TRAJECTORY_LOG
        mode = "a" if self._log_started else "w"
        with open(file_path, mode, encoding="utf-8", newline="") as handle:
            if not self._log_started:
                for line in self.header_lines:
                    handle.write(line + "\n")
                self._log_started = True
            for line in render_trajectory_lines(trajectories, self.experiment_id, iteration):
                handle.write(line + "\n")
        logger.debug(f"Logged {len(trajectories)} trajectories for iteration {iteration}")
        return file_path

    def save_checkpoint(self, params: PolicyParams, filename: str) -> Path:
        return save_checkpoint(params, self.output_dir / filename, self.header_lines)

    def save_record(self, record: Dict[str, Any], filename: str) -> Path:
        """Single-row CSV (eval records)."""
        return self.save_table([record], filename)


def read_header(file_path: Path) -> Optional[str]:
    """First line of an output file when it is a provenance header."""
    with open(file_path, "r", encoding="utf-8") as handle:
        first = handle.readline().rstrip("\n")
    return first if first.startswith("# mixlab ") else None
