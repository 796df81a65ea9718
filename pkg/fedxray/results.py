import json
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List

import numpy as np
import pandas as pd

from fedxray import constants
from fedxray.clustering import pca_project
from fedxray.loggers import setup_logger
from fedxray.simulation import RoundReport
from fedxray.utils import sha256_file

logger = setup_logger(__name__)

CONFIG_FILE = "config.yaml"
METRICS_FILE = "metrics.csv"
TIMINGS_FILE = "timings.csv"
DIAGNOSTICS_FILE = "diagnostics.jsonl"
MANIFEST_FILE = "manifest.json"

TIMINGS_COLUMNS = ["iteration", "screening_seconds", "round_seconds"]
SCATTER_COLUMNS = ["id", "pc1", "pc2", "is_malicious", "preserved"]


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def to_jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    return obj


def metrics_row(report: RoundReport, record_timing: bool = False) -> Dict[str, Any]:
    return {
        "iteration": report.iteration,
        "test_error": report.test_error,
        "attack_success_rate": report.attack_success_rate,
        "preserved_count": len(report.preserved_ids),
        # wall times differ between reruns
        "screening_seconds": report.screening_seconds if record_timing else None,
        "preserved_ids": " ".join(str(i) for i in report.preserved_ids),
    }


def diagnostics_entry(report: RoundReport) -> Dict[str, Any]:
    entry = {
        "iteration": report.iteration,
        "sampled_ids": list(report.sampled_ids),
        "malicious_ids": list(report.malicious_ids),
        "preserved_ids": list(report.preserved_ids),
        "lr": report.lr,
        "adaptive_lambda": report.adaptive_lambda,
        "adaptive_accepted": report.adaptive_accepted,
    }
    entry.update(report.diagnostics)
    return to_jsonable(entry)


@dataclass
class RunManifest:
    config_path: str
    config_sha256: str
    seed: int
    started_at: str = field(default_factory=_now)
    finished_at: str | None = None
    outputs: Dict[str, str] = field(default_factory=dict)
    version: str = constants.VERSION
    status: str = "partial"

    def write(self, run_dir) -> Path:
        path = Path(run_dir) / MANIFEST_FILE
        path.write_text(json.dumps(asdict(self), indent=2) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, run_dir) -> "RunManifest":
        return cls(**json.loads((Path(run_dir) / MANIFEST_FILE).read_text(encoding="utf-8")))


def verify_manifest(run_dir) -> bool:
    """The stored config copy still hashes to the manifest's config_sha256."""
    manifest = RunManifest.load(run_dir)
    return sha256_file(Path(run_dir) / CONFIG_FILE) == manifest.config_sha256


class RunWriter:
    """
    Report sink for a run directory. Every report appends one row to metrics.csv and timings.csv
    and one line to diagnostics.jsonl, so an interrupted run leaves readable files for the rounds it finished.
    """

    def __init__(self, run_dir, record_timing: bool = False):
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.record_timing = record_timing
        self.rounds = 0
        self._last = time.perf_counter()
        pd.DataFrame(columns=constants.METRICS_COLUMNS).to_csv(self.run_dir / METRICS_FILE, index=False)
        pd.DataFrame(columns=TIMINGS_COLUMNS).to_csv(self.run_dir / TIMINGS_FILE, index=False)
        (self.run_dir / DIAGNOSTICS_FILE).write_text("", encoding="utf-8")

    @property
    def outputs(self) -> Dict[str, str]:
        return {
            "metrics": METRICS_FILE,
            "timings": TIMINGS_FILE,
            "diagnostics": DIAGNOSTICS_FILE,
            "config": CONFIG_FILE,
        }

    def _append_row(self, name: str, row: Dict[str, Any], columns: List[str]) -> None:
        pd.DataFrame([row], columns=columns).to_csv(self.run_dir / name, mode="a", header=False, index=False)

    def __call__(self, report: RoundReport) -> None:
        now = time.perf_counter()
        self._append_row(METRICS_FILE, metrics_row(report, self.record_timing), constants.METRICS_COLUMNS)
        timing = {
            "iteration": report.iteration,
            "screening_seconds": report.screening_seconds,
            "round_seconds": now - self._last,
        }
        self._append_row(TIMINGS_FILE, timing, TIMINGS_COLUMNS)
        with open(self.run_dir / DIAGNOSTICS_FILE, "a", encoding="utf-8") as f:
            f.write(json.dumps(diagnostics_entry(report)) + "\n")
        self.rounds += 1
        self._last = now


def load_diagnostics(run_dir) -> List[Dict[str, Any]]:
    with open(Path(run_dir) / DIAGNOSTICS_FILE, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def export_scatter(diagnostics: List[Dict[str, Any]], t: int, space: str = "slous") -> pd.DataFrame:
    """Per sampled client of round t: its 2-D PCA coordinates in `space` and its malicious/preserved flags."""
    if space not in ("slous", "updates"):
        raise ValueError(f"space must be 'slous' or 'updates', got {space!r}")
    entry = next((d for d in diagnostics if d["iteration"] == t), None)
    if entry is None:
        raise ValueError(f"round {t} is not in the diagnostics (rounds 0..{len(diagnostics) - 1})")

    if f"pca_{space}" in entry:
        coords = np.asarray(entry[f"pca_{space}"], dtype=np.float64)
    elif space == "slous" and "slous" in entry:
        coords = pca_project(np.asarray(entry["slous"], dtype=np.float64), k=2).coords
    else:
        raise ValueError(f"round {t} has no {space} coordinates; rerun with output.record_pca: true")
    if coords.shape[1] == 1:
        coords = np.hstack([coords, np.zeros_like(coords)])

    ids = entry["sampled_ids"]
    malicious, preserved = set(entry["malicious_ids"]), set(entry["preserved_ids"])
    return pd.DataFrame(
        {
            "id": ids,
            "pc1": coords[:, 0],
            "pc2": coords[:, 1],
            "is_malicious": [i in malicious for i in ids],
            "preserved": [i in preserved for i in ids],
        },
        columns=SCATTER_COLUMNS,
    )


def write_scatter(run_dir, t: int, space: str = "slous", out=None) -> Path:
    frame = export_scatter(load_diagnostics(run_dir), t, space)
    path = Path(out) if out is not None else Path(run_dir) / f"scatter_round{t}_{space}.csv"
    frame.to_csv(path, index=False)
    logger.info(f"wrote {len(frame)} rows to {path}")
    return path
