"""
Report output for experiment and solve runs: JSON summaries and CSV
trajectories. All files are written from the calling process after
results have been aggregated.
"""
import csv
import json
import logging
import math
import os
from datetime import datetime
from pathlib import Path
from typing import Any, List, Optional, Union

import numpy as np
from pydantic import BaseModel, Field

import settings
from integrator import SolveReport

logger = logging.getLogger(__name__)

TRAJECTORY_HEADER = ["t", "f", "hinf", "xdotinf"]


class RunSummary(BaseModel):
    experiment: str
    seed: int
    config: dict = Field(default_factory=dict)
    runs: List[dict] = Field(default_factory=list)
    aggregate: dict = Field(default_factory=dict)
    passed: bool = True
    created_at: str = Field(default_factory=lambda: datetime.now().isoformat(timespec="seconds"))


def to_plain(value: Any) -> Any:
    """Recursively convert numpy values to JSON-compatible Python values; non-finite floats become None"""
    if isinstance(value, dict):
        return {str(k): to_plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_plain(value.tolist())
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, complex):
        return [to_plain(value.real), to_plain(value.imag)]
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def default_output_dir(experiment: str, seed: int) -> Path:
    """./out/<experiment>-<seed>/ under LAGFLOW_OUTPUT_DIR"""
    return Path(settings.OUTPUT_DIR) / f"{experiment}-{seed}"


class ReportWriter:
    def __init__(self, out_dir: Union[str, os.PathLike]):
        self.out_dir = Path(out_dir)
        self.init_directory()

    def init_directory(self):
        """Create the output directory if needed"""
        self.out_dir.mkdir(parents=True, exist_ok=True)

    def write_summary(self, summary: RunSummary, name: str = "summary.json") -> Path:
        path = self.out_dir / name
        plain = RunSummary.model_validate(to_plain(summary.model_dump()))
        path.write_text(plain.model_dump_json(indent=2))
        logger.info("Wrote %s", path)
        return path

    def load_summary(self, name: str = "summary.json") -> RunSummary:
        return RunSummary.model_validate_json((self.out_dir / name).read_text())

    def write_json(self, name: str, data: dict) -> Path:
        """Free-form JSON document (analysis and validation reports)"""
        path = self.out_dir / name
        path.write_text(json.dumps(to_plain(data), indent=2))
        logger.info("Wrote %s", path)
        return path

    def write_trajectory_csv(self, name: str, report: SolveReport, n: Optional[int] = None) -> Path:
        """t, f, hinf, xdotinf per recorded sample, plus x and lambda columns when states were recorded"""
        path = self.out_dir / name
        header = list(TRAJECTORY_HEADER)
        states = report.states
        if states is not None and len(states):
            n = report.final_state.n if n is None else n
            m = states.shape[1] - n
            header += [f"x{i}" for i in range(n)] + [f"l{j}" for j in range(m)]

        with path.open("w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(header)
            for k, t in enumerate(report.times):
                row = [t, report.f_history[k], report.hinf_history[k], report.xdot_inf_history[k]]
                if len(header) > len(TRAJECTORY_HEADER):
                    row += list(states[k])
                writer.writerow([repr(float(v)) for v in row])
        logger.debug("Wrote %d samples to %s", len(report.times), path)
        return path

    def write_table_csv(self, name: str, rows: List[dict]) -> Path:
        """Flat per-run or per-group table; nested values are skipped"""
        path = self.out_dir / name
        flat = [{k: v for k, v in row.items() if not isinstance(v, (list, dict))} for row in rows]
        fieldnames: List[str] = []
        for row in flat:
            fieldnames += [k for k in row if k not in fieldnames]
        with path.open("w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=fieldnames)
            writer.writeheader()
            writer.writerows(to_plain(flat))
        return path


def read_trajectory_csv(path: Union[str, os.PathLike]) -> List[dict]:
    with open(path, newline="") as f:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(f)]
