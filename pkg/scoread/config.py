"""
Run configuration for scoread.

A run is configured by a line-oriented text file of dotted `section.field=value`
keys (plus top-level `omega`, `seed`, `workers`, `out`), followed by `--set`
overrides. All randomness derives from the global seed through named sub-streams.
"""

import enum
import hashlib
import json
import logging
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np

from .anomaly import DetectorConfig
from .data import SynthSpec
from .sampler import SolverConfig, TraceEstimator
from .scorenet import ScoreNetConfig
from .sde import VPSchedule, make_schedule
from .trainer import TrainConfig


logger = logging.getLogger(__name__)

SEED_STREAMS = ("data", "init", "training", "sampling", "purification")


class ConfigError(ValueError):
    """Raised for malformed configuration lines or values."""

    def __init__(self, message: str, line: Optional[int] = None, source: str = "config"):
        prefix = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(prefix + message)
        self.line = line


def derive_seed(global_seed: int, stream: str) -> int:
    """Independent, reproducible seed for a named sub-stream."""
    if stream not in SEED_STREAMS:
        raise ValueError(f"unknown seed stream {stream!r}; expected one of {SEED_STREAMS}")
    key = [int(b) for b in stream.encode()]
    return int(np.random.SeedSequence([int(global_seed)] + key).generate_state(1)[0])


@dataclass
class DataConfig:
    """Input locations."""
    train: Optional[Path] = None
    test: Optional[Path] = None
    label_column: str = "label"


@dataclass
class SdeConfig:
    """Forward SDE parameters."""
    kind: str = "vp"
    beta_min: float = 0.1
    beta_max: float = 20.0
    t_eps: float = 1e-5

    def build(self) -> VPSchedule:
        return make_schedule(self.kind, beta_min=self.beta_min, beta_max=self.beta_max, t_eps=self.t_eps)


@dataclass
class RunConfig:
    """Everything a CLI run needs."""
    data: DataConfig = field(default_factory=DataConfig)
    omega: int = 10
    sde: SdeConfig = field(default_factory=SdeConfig)
    net: ScoreNetConfig = field(default_factory=ScoreNetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    estimator: TraceEstimator = field(default_factory=TraceEstimator)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)
    out: Path = Path("runs/default")
    seed: int = 0
    workers: int = 1

    SECTIONS = ("data", "sde", "net", "train", "solver", "estimator", "detector", "synth")

    # Fields owned elsewhere: omega/seed are top-level, solver/estimator are sections.
    _RESERVED = {
        "net": {"omega", "m", "seed"},
        "train": {"seed"},
        "estimator": {"seed"},
        "detector": {"solver", "estimator", "sampling_seed", "purification_seed"},
        "synth": {"seed"},
    }

    def set(self, key: str, raw: str):
        """
        Assign one dotted key from its string value.

        Raises:
            ConfigError: For unknown keys or values of the wrong type
        """
        parts = key.strip().split(".")
        if len(parts) == 1:
            target, name = self, parts[0]
            if name in self.SECTIONS or name not in {f.name for f in fields(self)}:
                raise ConfigError(f"unknown key {key!r}")
        elif len(parts) == 2 and parts[0] in self.SECTIONS:
            target, name = getattr(self, parts[0]), parts[1]
            known = {f.name for f in fields(target)} - self._RESERVED.get(parts[0], set())
            if name not in known:
                raise ConfigError(f"unknown key {key!r}")
        else:
            raise ConfigError(f"unknown key {key!r}")

        hints = typing.get_type_hints(type(target))
        try:
            value = _coerce(raw.strip(), hints[name])
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad value for {key!r}: {e}")
        setattr(target, name, value)

    def resolved(self) -> "RunConfig":
        """Propagate omega and derived seeds into the component configs, then validate."""
        self.net.omega = self.omega
        self.net.seed = derive_seed(self.seed, "init")
        self.train.seed = derive_seed(self.seed, "training")
        self.estimator.seed = derive_seed(self.seed, "sampling")
        self.synth.seed = derive_seed(self.seed, "data")
        self.detector.solver = self.solver
        self.detector.estimator = self.estimator
        self.detector.sampling_seed = derive_seed(self.seed, "sampling")
        self.detector.purification_seed = derive_seed(self.seed, "purification")
        self.validate()
        return self

    def validate(self):
        if self.omega < 1:
            raise ConfigError(f"omega must be >= 1, got {self.omega}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        try:
            self.sde.build()
            self.train.validate()
            self.solver.validate()
            self.estimator.validate()
            self.detector.validate()
            self.synth.validate()
        except ValueError as e:
            raise ConfigError(str(e))

    def require_paths(self, *names: str):
        """Check that data paths referenced by a command exist."""
        for name in names:
            path = getattr(self.data, name)
            if path is None:
                raise ConfigError(f"data.{name} is not set")
            if not Path(path).exists():
                raise ConfigError(f"data.{name} does not exist: {path}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "data": {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(self.data).items()},
            "omega": self.omega,
            "sde": vars(self.sde).copy(),
            "net": self.net.to_dict(),
            "train": self.train.to_dict(),
            "solver": self.solver.to_dict(),
            "estimator": self.estimator.to_dict(),
            "detector": self.detector.to_dict(),
            "synth": self.synth.to_dict(),
            "out": str(self.out),
            "seed": self.seed,
        }

    def config_hash(self) -> str:
        """Short SHA-256 of the canonical configuration (output dir and workers excluded)."""
        payload = self.to_dict()
        payload.pop("out")
        canonical = json.dumps(payload, sort_keys=True, default=str)
        return hashlib.sha256(canonical.encode()).hexdigest()[:12]

    def provenance(self) -> List[str]:
        """Header comment lines for output files."""
        return [f"config_hash={self.config_hash()}", f"seed={self.seed}"]


def _coerce(raw: str, annotation) -> Any:
    origin = typing.get_origin(annotation)
    if origin is typing.Union:
        args = [a for a in typing.get_args(annotation) if a is not type(None)]
        if raw.lower() in ("none", "null", ""):
            return None
        return _coerce(raw, args[0])
    if isinstance(annotation, type) and issubclass(annotation, enum.Enum):
        for member in annotation:
            if raw.lower() in (member.value.lower(), member.name.lower()):
                return member
        choices = ", ".join(m.value for m in annotation)
        raise ValueError(f"{raw!r} is not one of {choices}")
    if annotation is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{raw!r} is not a boolean")
    if annotation is int:
        return int(raw)
    if annotation is float:
        return float(raw)
    if annotation is Path:
        return Path(raw)
    return raw


def parse_lines(lines: Iterable[str], config: Optional[RunConfig] = None, source: str = "config") -> RunConfig:
    """Apply `key=value` lines to a config; blank lines and `#` comments are skipped."""
    config = config or RunConfig()
    for number, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"expected key=value, got {text!r}", number, source)
        key, value = text.split("=", 1)
        try:
            config.set(key, value)
        except ConfigError as e:
            raise ConfigError(str(e).split(": ", 1)[-1], number, source)
    return config


def load_config(
    path: Optional[Path] = None,
    overrides: Sequence[str] = (),
    seed: Optional[int] = None,
    workers: Optional[int] = None,
    out: Optional[Path] = None,
) -> RunConfig:
    """
    Build a RunConfig from an optional file, --set overrides and CLI flags.

    Returns:
        Resolved and validated RunConfig
    """
    config = RunConfig()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        with open(path, "r", encoding="utf-8") as f:
            parse_lines(f, config, source=str(path))
    parse_lines(overrides, config, source="--set")
    if seed is not None:
        config.seed = seed
    if workers is not None:
        config.workers = workers
    if out is not None:
        config.out = Path(out)
    logger.debug(f"Loaded configuration {config.to_dict()}")
    return config.resolved()
