"""
Time-series data handling for scoread.

Loads CSV series, fits min-max scalers, cuts sliding windows and synthesizes
labelled test series with injected anomalies.
"""

import logging
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd


logger = logging.getLogger(__name__)

LABEL_COLUMN = "label"


@dataclass(frozen=True)
class TimeSeries:
    """A T x m real matrix with optional per-step anomaly labels."""
    values: np.ndarray
    labels: Optional[np.ndarray] = None
    feature_names: Optional[Tuple[str, ...]] = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise ValueError(f"TimeSeries needs a T x m matrix with T >= 1, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("TimeSeries values must be finite")
        object.__setattr__(self, "values", values)

        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64)
            if labels.shape != (values.shape[0],):
                raise ValueError(
                    f"labels must have length {values.shape[0]}, got shape {labels.shape}"
                )
            if not np.isin(labels, (0, 1)).all():
                raise ValueError("labels must be 0 or 1")
            object.__setattr__(self, "labels", labels)

        if self.feature_names is not None:
            names = tuple(self.feature_names)
            if len(names) != values.shape[1]:
                raise ValueError(f"expected {values.shape[1]} feature names, got {len(names)}")
            object.__setattr__(self, "feature_names", names)

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def names(self) -> List[str]:
        """Feature names, falling back to x0..x{m-1}."""
        if self.feature_names is not None:
            return list(self.feature_names)
        return [f"x{i}" for i in range(self.dim)]


@dataclass(frozen=True)
class Window:
    """Sliding-window view ending at (1-based) time step end_index."""
    target: np.ndarray
    end_index: int

    @property
    def condition(self) -> np.ndarray:
        """The first omega rows of the target."""
        return self.target[:-1]

    @property
    def omega(self) -> int:
        return self.target.shape[0] - 1


@dataclass(frozen=True)
class Scaler:
    """Per-feature min-max scaler fit on a training split."""
    minimum: np.ndarray
    maximum: np.ndarray

    def __post_init__(self):
        minimum = np.asarray(self.minimum, dtype=np.float64)
        maximum = np.asarray(self.maximum, dtype=np.float64)
        if minimum.shape != maximum.shape:
            raise ValueError("scaler minimum and maximum must have equal length")
        if np.any(maximum < minimum):
            raise ValueError("scaler maximum must be >= minimum element-wise")
        object.__setattr__(self, "minimum", minimum)
        object.__setattr__(self, "maximum", maximum)

    @property
    def _span(self) -> np.ndarray:
        span = self.maximum - self.minimum
        # Constant features map to 0.
        return np.where(span > 0, span, 1.0)

    def apply(self, series: TimeSeries) -> TimeSeries:
        scaled = (series.values - self.minimum) / self._span
        scaled = np.where(self.maximum > self.minimum, scaled, 0.0)
        return TimeSeries(scaled, series.labels, series.feature_names)

    def inverse(self, series: TimeSeries) -> TimeSeries:
        raw = series.values * self._span + self.minimum
        return TimeSeries(raw, series.labels, series.feature_names)

    def to_dict(self) -> Dict:
        return {"minimum": self.minimum.tolist(), "maximum": self.maximum.tolist()}

    @classmethod
    def from_dict(cls, data: Dict) -> "Scaler":
        return cls(np.asarray(data["minimum"]), np.asarray(data["maximum"]))


class BaseProcess(Enum):
    """Clean process underlying a synthetic series."""
    IID_GAUSSIAN = "iid-gaussian"
    AR1 = "ar1"


class AnomalyKind(Enum):
    """Kind of injected anomaly."""
    SPIKE = "spike"
    LEVEL_SHIFT = "level-shift"


@dataclass
class SynthSpec:
    """Recipe for a synthetic multivariate series."""
    length: int = 2000
    dim: int = 2
    process: BaseProcess = BaseProcess.AR1
    phi: float = 0.9
    anomaly_kind: AnomalyKind = AnomalyKind.SPIKE
    magnitude: float = 5.0
    rate: float = 0.05
    shift_length: int = 20
    seed: int = 0

    def validate(self):
        if self.length < 1 or self.dim < 1:
            raise ValueError(f"length and dim must be positive, got {self.length}, {self.dim}")
        if not abs(self.phi) < 1:
            raise ValueError(f"AR(1) coefficient must satisfy |phi| < 1, got {self.phi}")
        if not 0 <= self.rate < 1:
            raise ValueError(f"anomaly rate must lie in [0, 1), got {self.rate}")
        if not self.magnitude > 0:
            raise ValueError(f"anomaly magnitude must be positive, got {self.magnitude}")
        if self.shift_length < 1:
            raise ValueError(f"shift_length must be positive, got {self.shift_length}")

    @property
    def process_std(self) -> float:
        if self.process == BaseProcess.AR1:
            return 1.0 / np.sqrt(1.0 - self.phi ** 2)
        return 1.0

    def to_dict(self) -> Dict:
        return {
            "length": self.length,
            "dim": self.dim,
            "process": self.process.value,
            "phi": self.phi,
            "anomaly_kind": self.anomaly_kind.value,
            "magnitude": self.magnitude,
            "rate": self.rate,
            "shift_length": self.shift_length,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "SynthSpec":
        data = dict(data)
        data["process"] = BaseProcess(data["process"])
        data["anomaly_kind"] = AnomalyKind(data["anomaly_kind"])
        return cls(**data)


def load_csv(path: Path, label_column: Optional[str] = LABEL_COLUMN) -> TimeSeries:
    """
    Load a time series from a CSV file.

    Args:
        path: CSV file with one header row and one row per time step
        label_column: Name of the optional 0/1 label column

    Returns:
        TimeSeries with m = number of non-label columns

    Raises:
        FileNotFoundError: If the file does not exist
        ValueError: On a non-numeric cell (row/column reported) or a bad label
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"CSV file not found: {path}")

    frame = pd.read_csv(path, comment="#", dtype=str, skipinitialspace=True)
    labels = None
    if label_column and label_column in frame.columns:
        raw_labels = frame.pop(label_column)
        parsed = pd.to_numeric(raw_labels, errors="coerce")
        bad = ~parsed.isin([0, 1])
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            raise ValueError(
                f"{path}: label at row {row + 1} is {raw_labels.iloc[row]!r}, expected 0 or 1"
            )
        labels = parsed.to_numpy(dtype=np.int64)

    if frame.shape[1] == 0:
        raise ValueError(f"{path}: no feature columns")

    columns = []
    for name in frame.columns:
        parsed = pd.to_numeric(frame[name], errors="coerce")
        bad = ~np.isfinite(parsed.to_numpy(dtype=np.float64))
        if bad.any():
            row = int(np.flatnonzero(bad)[0])
            raise ValueError(
                f"{path}: cell at row {row + 1}, column {name!r} is "
                f"{frame[name].iloc[row]!r}, expected a finite number"
            )
        columns.append(parsed.to_numpy(dtype=np.float64))

    values = np.column_stack(columns)
    logger.debug(f"Loaded {path}: T={values.shape[0]}, m={values.shape[1]}")
    return TimeSeries(values, labels, tuple(str(c) for c in frame.columns))


def save_csv(
    series: TimeSeries,
    path: Path,
    header_comments: Sequence[str] = (),
    include_labels: bool = True,
):
    """Write a series in the format load_csv reads, with '#' comment lines first."""
    frame = pd.DataFrame(series.values, columns=series.names())
    if include_labels and series.labels is not None:
        frame[LABEL_COLUMN] = series.labels
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as f:
        for comment in header_comments:
            f.write(f"# {comment}\n")
        frame.to_csv(f, index=False, float_format="%.10g")


def fit_apply_scaler(
    train: TimeSeries, others: Sequence[TimeSeries] = ()
) -> Tuple[Scaler, TimeSeries, List[TimeSeries]]:
    """
    Fit a min-max scaler on the training split and apply it everywhere.

    Returns:
        (scaler, scaled train, scaled others). Values outside the training range
        are not clipped.
    """
    scaler = Scaler(train.values.min(axis=0), train.values.max(axis=0))
    constant = scaler.maximum == scaler.minimum
    if constant.any():
        logger.warning(f"{int(constant.sum())} constant feature(s) scaled to 0")
    return scaler, scaler.apply(train), [scaler.apply(s) for s in others]


def sliding_windows(series: TimeSeries, omega: int) -> List[Window]:
    """
    Cut T - omega stride-1 windows of omega + 1 rows.

    Raises:
        ValueError: If omega < 1 or T < omega + 1
    """
    if omega < 1:
        raise ValueError(f"window offset must be >= 1, got {omega}")
    if series.length < omega + 1:
        raise ValueError(
            f"series of length {series.length} is too short for windows of {omega + 1} rows"
        )
    values = series.values
    return [
        Window(values[j:j + omega + 1], end_index=j + omega + 1)
        for j in range(series.length - omega)
    ]


def stack_windows(windows: Sequence[Window]) -> np.ndarray:
    """Stack window targets into a (N, omega+1, m) array."""
    return np.stack([w.target for w in windows])


def generate_clean(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """Draw the clean base process."""
    noise = rng.standard_normal((spec.length, spec.dim))
    if spec.process == BaseProcess.IID_GAUSSIAN:
        return noise
    values = np.empty_like(noise)
    values[0] = noise[0] * spec.process_std
    for t in range(1, spec.length):
        values[t] = spec.phi * values[t - 1] + noise[t]
    return values


def inject_anomalies(
    clean: np.ndarray, spec: SynthSpec, rng: np.random.Generator
) -> Tuple[np.ndarray, np.ndarray]:
    """Add anomalies to a clean series and return (values, labels)."""
    values = clean.copy()
    labels = np.zeros(clean.shape[0], dtype=np.int64)
    if spec.rate == 0:
        return values, labels

    size = spec.magnitude * spec.process_std
    if spec.anomaly_kind == AnomalyKind.SPIKE:
        hits = rng.random(clean.shape[0]) < spec.rate
        signs = rng.choice((-1.0, 1.0), size=clean.shape)
        values[hits] += size * signs[hits]
        labels[hits] = 1
        return values, labels

    start_prob = spec.rate / spec.shift_length
    t = 0
    while t < clean.shape[0]:
        if rng.random() < start_prob:
            end = min(t + spec.shift_length, clean.shape[0])
            values[t:end] += size * rng.choice((-1.0, 1.0), size=clean.shape[1])
            labels[t:end] = 1
            t = end + 1
        else:
            t += 1
    return values, labels


def generate_synthetic(spec: SynthSpec) -> TimeSeries:
    """
    Generate a labelled synthetic series.

    The clean process is drawn first and anomalies are injected afterwards, so
    labels mark exactly the injected positions. Equal seeds give identical output.
    """
    series, _ = generate_synthetic_pair(spec)
    return series


def generate_synthetic_pair(spec: SynthSpec) -> Tuple[TimeSeries, TimeSeries]:
    """Return (anomalous labelled series, its clean counterpart)."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    clean = generate_clean(spec, rng)
    values, labels = inject_anomalies(clean, spec, rng)
    names = tuple(f"x{i}" for i in range(spec.dim))
    logger.debug(f"Synthesized T={spec.length}, m={spec.dim}, anomalies={int(labels.sum())}")
    return TimeSeries(values, labels, names), TimeSeries(clean, None, names)


def generate_synthetic_split(spec: SynthSpec) -> Tuple[TimeSeries, TimeSeries, TimeSeries]:
    """
    Generate an anomaly-free training series and a labelled test series.

    Both come from the same base process with independent child seeds.

    Returns:
        (clean train, anomalous test with labels, clean test)
    """
    spec.validate()
    train_seed, test_seed = (
        int(s.generate_state(1)[0]) for s in np.random.SeedSequence(spec.seed).spawn(2)
    )
    names = tuple(f"x{i}" for i in range(spec.dim))
    train_values = generate_clean(spec, np.random.default_rng(train_seed))
    test, test_clean = generate_synthetic_pair(replace(spec, seed=test_seed))
    return TimeSeries(train_values, None, names), test, test_clean
