"""
Output directory management for scoread.

Owns the layout of a run directory and persistence of CSV results, the scaler
and the run.json manifest.
"""

import fcntl
import json
import logging
import os
from contextlib import contextmanager
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence

import pandas as pd

from .data import Scaler


logger = logging.getLogger(__name__)


def write_csv(
    path: Path,
    columns: Sequence[str],
    rows: Sequence[Sequence[Any]],
    header_comments: Sequence[str] = (),
):
    """Write rows as CSV preceded by `# ` comment lines."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(list(rows), columns=list(columns))
    with open(path, "w", encoding="utf-8", newline="") as f:
        for comment in header_comments:
            f.write(f"# {comment}\n")
        frame.to_csv(f, index=False, float_format="%.10g")


def read_csv_header(path: Path) -> Dict[str, str]:
    """Parse leading `# key=value` comment lines of a CSV."""
    header: Dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if not line.startswith("#"):
                break
            text = line[1:].strip()
            if "=" in text:
                key, value = text.split("=", 1)
                header[key.strip()] = value.strip()
    return header


def read_results_csv(path: Path) -> pd.DataFrame:
    """Load a CSV written by write_csv."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"results file not found: {path}")
    return pd.read_csv(path, comment="#")


class RunWorkspace:
    """Layout and persistence for one output directory."""

    MANIFEST = "run.json"

    def __init__(self, out_dir: Path):
        """
        Initialize workspace.

        Args:
            out_dir: Root output directory (created if missing)
        """
        self.out_dir = Path(out_dir)
        self.checkpoints_dir = self.out_dir / "checkpoints"
        self.results_dir = self.out_dir / "results"

        for directory in [self.out_dir, self.checkpoints_dir, self.results_dir]:
            directory.mkdir(parents=True, exist_ok=True)

    @property
    def model_path(self) -> Path:
        return self.out_dir / "model.bin"

    @property
    def scaler_path(self) -> Path:
        return self.out_dir / "scaler.json"

    @property
    def losses_path(self) -> Path:
        return self.results_dir / "losses.csv"

    @property
    def anomaly_path(self) -> Path:
        return self.results_dir / "anomaly.csv"

    @property
    def nfe_path(self) -> Path:
        return self.results_dir / "nfe.csv"

    @property
    def eval_path(self) -> Path:
        return self.results_dir / "eval.csv"

    @property
    def manifest_path(self) -> Path:
        return self.out_dir / self.MANIFEST

    def data_path(self, name: str) -> Path:
        return self.out_dir / f"{name}.csv"

    @contextmanager
    def _locked(self, filepath: Path) -> Iterator[None]:
        """Exclusive file lock around a read-modify-write."""
        lock_fd = os.open(str(filepath.with_suffix(".lock")), os.O_CREAT | os.O_RDWR)
        fcntl.flock(lock_fd, fcntl.LOCK_EX)
        try:
            yield
        finally:
            fcntl.flock(lock_fd, fcntl.LOCK_UN)
            os.close(lock_fd)

    def save_scaler(self, scaler: Scaler):
        with open(self.scaler_path, "w", encoding="utf-8") as f:
            json.dump(scaler.to_dict(), f, indent=2)

    def load_scaler(self, path: Optional[Path] = None) -> Scaler:
        path = Path(path) if path is not None else self.scaler_path
        if not path.exists():
            raise FileNotFoundError(f"scaler not found: {path}")
        with open(path, "r", encoding="utf-8") as f:
            return Scaler.from_dict(json.load(f))

    def load_manifest(self) -> Dict[str, Any]:
        if not self.manifest_path.exists():
            return {"commands": []}
        with open(self.manifest_path, "r", encoding="utf-8") as f:
            return json.load(f)

    def record_command(
        self,
        command: str,
        config: Dict[str, Any],
        config_hash: str,
        seed: int,
        version: str,
        outputs: List[Path],
    ):
        """Append a command to run.json, refreshing the config snapshot."""
        with self._locked(self.manifest_path):
            manifest = self.load_manifest()
            manifest.update({
                "version": version,
                "config_hash": config_hash,
                "seed": seed,
                "config": config,
            })
            manifest.setdefault("commands", []).append({
                "command": command,
                "finished_at": datetime.utcnow().isoformat(),
                "config_hash": config_hash,
                "outputs": [str(p) for p in outputs],
            })
            tmp = self.manifest_path.with_suffix(".tmp")
            with open(tmp, "w", encoding="utf-8") as f:
                json.dump(manifest, f, indent=2, sort_keys=True)
            os.replace(tmp, self.manifest_path)
        logger.debug(f"Recorded {command} in {self.manifest_path}")
