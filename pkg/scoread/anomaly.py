"""
Calibrated anomaly measurements.

For every window ending at time t the condition is purified (diffused to tau and
denoised with the ZERO-condition score), then three measurements are computed
against the purified condition:

- reconstruction: squared distance between a generated and the observed row t
- probability: negative conditional log-likelihood of the observed window
- gradient: norm of the conditional score at the observed window

and multiplied into one of seven detection scores.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import torch

from .data import TimeSeries, Window, sliding_windows
from .executor import WindowExecutor
from .sampler import (
    NfeRecord,
    NfeStats,
    SolverConfig,
    TraceEstimator,
    log_likelihood,
    partial_diffuse_denoise,
    sample_pf_ode,
)
from .scorenet import ConditionalScoreNet, forward
from .sde import SdeSchedule


logger = logging.getLogger(__name__)

TAU_GRID = (0.0, 0.05, 0.1, 0.15, 0.2, 0.25)


class Combination(Enum):
    """Products of the recon (R), prob (P) and grad (G) measurements."""
    R = "R"
    P = "P"
    G = "G"
    RP = "RP"
    RG = "RG"
    PG = "PG"
    RPG = "RPG"


class GradNorm(Enum):
    L1 = "l1"
    L2 = "l2"


@dataclass
class DetectorConfig:
    """Detection settings; threshold None means the percentile policy applies."""
    tau: float = 0.1
    grad_norm: GradNorm = GradNorm.L1
    combination: Combination = Combination.RPG
    threshold: Optional[float] = None
    threshold_percentile: Optional[float] = None
    expected_anomaly_rate: float = 0.05
    threshold_fit_windows: int = 200
    prob_offset: Optional[float] = None
    solver: SolverConfig = field(default_factory=SolverConfig)
    estimator: TraceEstimator = field(default_factory=TraceEstimator)
    sampling_seed: int = 0
    purification_seed: int = 0

    def validate(self):
        if not any(math.isclose(self.tau, g, abs_tol=1e-12) for g in TAU_GRID):
            raise ValueError(f"tau must be one of {TAU_GRID}, got {self.tau}")
        if not 0 <= self.expected_anomaly_rate < 1:
            raise ValueError(
                f"expected_anomaly_rate must lie in [0, 1), got {self.expected_anomaly_rate}"
            )
        if self.threshold_percentile is not None and not 0 <= self.threshold_percentile <= 100:
            raise ValueError(f"threshold_percentile must lie in [0, 100], got {self.threshold_percentile}")
        if self.threshold_fit_windows < 1:
            raise ValueError(f"threshold_fit_windows must be >= 1, got {self.threshold_fit_windows}")
        self.solver.validate()
        self.estimator.validate()

    @property
    def percentile(self) -> float:
        if self.threshold_percentile is not None:
            return self.threshold_percentile
        return 100.0 * (1.0 - self.expected_anomaly_rate)

    def to_dict(self) -> Dict:
        return {
            "tau": self.tau,
            "grad_norm": self.grad_norm.value,
            "combination": self.combination.value,
            "threshold": self.threshold,
            "threshold_percentile": self.threshold_percentile,
            "expected_anomaly_rate": self.expected_anomaly_rate,
            "threshold_fit_windows": self.threshold_fit_windows,
            "prob_offset": self.prob_offset,
            "solver": self.solver.to_dict(),
            "estimator": self.estimator.to_dict(),
            "sampling_seed": self.sampling_seed,
            "purification_seed": self.purification_seed,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "DetectorConfig":
        data = dict(data)
        data.setdefault("prob_offset", None)
        data["grad_norm"] = GradNorm(data["grad_norm"])
        data["combination"] = Combination(data["combination"])
        data["solver"] = SolverConfig.from_dict(data["solver"])
        data["estimator"] = TraceEstimator.from_dict(data["estimator"])
        return cls(**data)


@dataclass
class WindowScore:
    """Raw measurements of one window."""
    end_index: int
    recon: float
    prob: float
    grad: float
    nfe: NfeStats


@dataclass
class AnomalySeries:
    """Per-time-step measurements, combined score and predictions."""
    end_index: np.ndarray
    recon: np.ndarray
    prob: np.ndarray
    grad: np.ndarray
    combined: np.ndarray
    predicted: np.ndarray
    threshold: float
    combination: Combination
    tau: float
    prob_offset: Optional[float] = None
    labels: Optional[np.ndarray] = None
    nfe: NfeStats = field(default_factory=NfeStats)

    def __len__(self) -> int:
        return len(self.end_index)

    def columns(self) -> List[str]:
        cols = ["t", "recon", "prob", "grad", "combined", "predicted"]
        return cols + (["label"] if self.labels is not None else [])

    def to_rows(self) -> List[List]:
        rows = []
        for i in range(len(self)):
            row = [int(self.end_index[i]), float(self.recon[i]), float(self.prob[i]),
                   float(self.grad[i]), float(self.combined[i]), int(self.predicted[i])]
            if self.labels is not None:
                row.append(int(self.labels[i]))
            rows.append(row)
        return rows


def _window_tensor(array: np.ndarray, net: ConditionalScoreNet) -> torch.Tensor:
    return torch.as_tensor(np.asarray(array), dtype=next(net.parameters()).dtype)


def window_seeds(base_seed: int, end_index: int) -> int:
    """Per-window seed, independent of scheduling order."""
    return int(np.random.SeedSequence([int(base_seed), int(end_index)]).generate_state(1)[0])


def purify(
    net: ConditionalScoreNet,
    schedule: SdeSchedule,
    condition: torch.Tensor,
    tau: float,
    seed: int,
    solver: SolverConfig,
) -> Tuple[torch.Tensor, NfeRecord]:
    """
    Purify an (omega, m) condition.

    The condition is padded with a zero row, diffused to tau and denoised with
    the ZERO-condition score; the first omega rows are returned. tau = 0 returns
    the condition itself.
    """
    x_bar = torch.cat([condition, torch.zeros_like(condition[:1])], dim=0)
    purified, nfe = partial_diffuse_denoise(net, schedule, x_bar, tau, seed, solver)
    if tau == 0:
        return condition, nfe
    return purified[:-1], nfe


def reconstruction_error(generated_row: torch.Tensor, observed_row: torch.Tensor) -> float:
    """Squared Euclidean distance between two rows."""
    return float(((generated_row.to(torch.float64) - observed_row.to(torch.float64)) ** 2).sum())


def a_recon(
    net: ConditionalScoreNet,
    schedule: SdeSchedule,
    window: torch.Tensor,
    purified: torch.Tensor,
    seed: int,
    solver: SolverConfig,
) -> Tuple[float, NfeRecord]:
    """Generate a window conditioned on the purified condition and compare its last row."""
    generated, nfe = sample_pf_ode(net, schedule, purified, seed, solver)
    return reconstruction_error(generated[-1], window[-1]), nfe


def a_prob(
    net: ConditionalScoreNet,
    schedule: SdeSchedule,
    window: torch.Tensor,
    purified: torch.Tensor,
    solver: SolverConfig,
    estimator: TraceEstimator,
) -> Tuple[float, NfeRecord]:
    """Negative conditional log-likelihood of the observed window (nats)."""
    result = log_likelihood(net, schedule, window, purified, solver, estimator)
    return -result.log_prob, result.nfe


def score_norm(score: torch.Tensor, norm: GradNorm = GradNorm.L1) -> float:
    """l1 (default) or l2 norm of a score tensor."""
    score = score.to(torch.float64)
    if norm == GradNorm.L1:
        return float(score.abs().sum())
    return float(torch.sqrt((score ** 2).sum()))


def a_grad(
    net: ConditionalScoreNet,
    schedule: SdeSchedule,
    window: torch.Tensor,
    purified: torch.Tensor,
    norm: GradNorm = GradNorm.L1,
) -> float:
    """Norm of the conditional score at the observed window, evaluated at l = t_eps."""
    with torch.no_grad():
        score = forward(net, window, purified, schedule.t_eps)
    return score_norm(score, norm)


def combine(recon: float, prob: float, grad: float, mode: Combination) -> float:
    """Product of the measurements selected by mode."""
    mode = Combination(mode)
    values = {"R": recon, "P": prob, "G": grad}
    product = 1.0
    for key in mode.value:
        product *= values[key]
    return product


def combine_series(
    recon: np.ndarray,
    prob: np.ndarray,
    grad: np.ndarray,
    mode: Combination,
    prob_offset: Optional[float] = None,
) -> np.ndarray:
    """
    Vectorized combine over a series.

    In product modes containing P the prob series is shifted by prob_offset
    (default: its own minimum) so all factors are nonnegative; values below the
    offset are clipped to zero. The singleton P mode returns raw values.
    """
    mode = Combination(mode)
    if "P" in mode.value and mode != Combination.P and len(prob):
        offset = prob.min() if prob_offset is None else prob_offset
        prob = np.maximum(prob - offset, 0.0)
    return np.array([combine(r, p, g, mode) for r, p, g in zip(recon, prob, grad)])


def score_window(
    net: ConditionalScoreNet,
    schedule: SdeSchedule,
    window: Window,
    config: DetectorConfig,
) -> WindowScore:
    """Purify, then compute the three calibrated measurements of one window."""
    target = _window_tensor(window.target, net)
    stats = NfeStats()

    purified, record = purify(
        net, schedule, target[:-1], config.tau,
        window_seeds(config.purification_seed, window.end_index), config.solver,
    )
    stats.add(record)

    recon, record = a_recon(
        net, schedule, target, purified,
        window_seeds(config.sampling_seed, window.end_index), config.solver,
    )
    stats.add(record)

    prob, record = a_prob(net, schedule, target, purified, config.solver, config.estimator)
    stats.add(record)

    grad = a_grad(net, schedule, target, purified, config.grad_norm)
    return WindowScore(window.end_index, recon, prob, grad, stats)


def _score_windows(
    net: ConditionalScoreNet,
    schedule: SdeSchedule,
    windows: List[Window],
    config: DetectorConfig,
    executor: Optional[WindowExecutor],
) -> List[WindowScore]:
    executor = executor or WindowExecutor(workers=1)
    return executor.map_ordered(lambda w: score_window(net, schedule, w, config), windows)


@dataclass
class ThresholdFit:
    """Threshold and P offset fit on training windows, reused on test series."""
    threshold: float
    prob_offset: float


def fit_threshold(
    net: ConditionalScoreNet,
    schedule: SdeSchedule,
    train: TimeSeries,
    config: DetectorConfig,
    executor: Optional[WindowExecutor] = None,
) -> ThresholdFit:
    """
    Percentile threshold of the combined score over (the last
    threshold_fit_windows) training windows.

    The P offset is the training minimum unless config.prob_offset is set; the
    returned offset must be passed to score_series so both sides share it.
    """
    config.validate()
    windows = sliding_windows(train, net.config.omega)[-config.threshold_fit_windows:]
    scores = _score_windows(net, schedule, windows, config, executor)
    prob = np.array([s.prob for s in scores])
    offset = config.prob_offset if config.prob_offset is not None else float(prob.min())
    combined = combine_series(
        np.array([s.recon for s in scores]),
        prob,
        np.array([s.grad for s in scores]),
        config.combination,
        offset,
    )
    threshold = float(np.percentile(combined, config.percentile))
    logger.info(
        f"Threshold {threshold:.6g} = {config.percentile:.1f}th percentile of "
        f"{len(windows)} training windows (prob offset {offset:.6g})"
    )
    return ThresholdFit(threshold, offset)


def score_series(
    net: ConditionalScoreNet,
    schedule: SdeSchedule,
    series: TimeSeries,
    config: DetectorConfig,
    executor: Optional[WindowExecutor] = None,
    threshold: Optional[float] = None,
    prob_offset: Optional[float] = None,
) -> AnomalySeries:
    """
    Score every evaluable time step t in [omega+1, T].

    Args:
        net: Trained network
        schedule: Forward SDE
        series: Scaled test series
        config: Detection settings
        executor: Optional worker pool for per-window fan-out
        threshold: Threshold to use when config.threshold is unset (e.g. from
            fit_threshold); if both are unset the percentile policy is applied to
            this series itself
        prob_offset: P offset for product modes, normally ThresholdFit.prob_offset;
            config.prob_offset takes precedence, and the series minimum is used
            when both are unset

    Returns:
        AnomalySeries in end-index order
    """
    config.validate()
    windows = sliding_windows(series, net.config.omega)
    logger.info(
        f"Scoring {len(windows)} windows (tau={config.tau}, "
        f"combination={config.combination.value})"
    )
    scores = _score_windows(net, schedule, windows, config, executor)

    recon = np.array([s.recon for s in scores])
    prob = np.array([s.prob for s in scores])
    grad = np.array([s.grad for s in scores])
    offset = config.prob_offset if config.prob_offset is not None else prob_offset
    if offset is None and len(prob):
        offset = float(prob.min())
    combined = combine_series(recon, prob, grad, config.combination, offset)

    delta = config.threshold if config.threshold is not None else threshold
    if delta is None:
        logger.warning("No threshold supplied; using the percentile policy on the scored series")
        delta = float(np.percentile(combined, config.percentile))

    stats = NfeStats()
    for s in scores:
        stats.merge(s.nfe)

    end_index = np.array([s.end_index for s in scores], dtype=np.int64)
    labels = None
    if series.labels is not None:
        labels = series.labels[end_index - 1]
    return AnomalySeries(
        end_index=end_index,
        recon=recon,
        prob=prob,
        grad=grad,
        combined=combined,
        predicted=(combined > delta).astype(np.int64),
        threshold=float(delta),
        combination=config.combination,
        tau=config.tau,
        prob_offset=offset,
        labels=labels,
        nfe=stats,
    )


@dataclass
class ConsistencyReport:
    """Score-norm vs finite log-probability change at one point."""
    score_norm: float
    ratio: float
    perturbation_norm: float
    flagged: bool


def check_score_log_inequality(
    x: torch.Tensor,
    score: torch.Tensor,
    log_prob_fn: Callable[[torch.Tensor], float],
    eps_scale: float,
    seed: int = 0,
    rel_tol: float = 0.05,
    curvature: float = 1.0,
) -> ConsistencyReport:
    """
    Compare ||score||_2 with |log p(x + eps) - log p(x)| / ||eps||_2.

    The first should dominate up to an O(||eps||) term; a report is flagged when
    ratio > (1 + rel_tol) * ||score||_2 + curvature * ||eps||_2.
    """
    generator = torch.Generator().manual_seed(int(seed))
    eps = eps_scale * torch.randn(x.shape, generator=generator, dtype=torch.float64)
    eps_norm = float(torch.sqrt((eps ** 2).sum()))
    norm = score_norm(score, GradNorm.L2)
    if eps_norm == 0:
        return ConsistencyReport(norm, 0.0, 0.0, False)

    delta = log_prob_fn(x + eps.to(x.dtype)) - log_prob_fn(x)
    ratio = abs(delta) / eps_norm
    flagged = ratio > (1 + rel_tol) * norm + curvature * eps_norm
    return ConsistencyReport(norm, ratio, eps_norm, flagged)


def score_log_consistency_check(
    net: ConditionalScoreNet,
    schedule: SdeSchedule,
    window: torch.Tensor,
    purified: torch.Tensor,
    eps_scale: float,
    solver: SolverConfig,
    estimator: TraceEstimator,
    seed: int = 0,
) -> ConsistencyReport:
    """
    Diagnostic: does the learned score bound the finite log-likelihood change?

    Never raises on violation; the report is flagged and a warning logged.
    """
    with torch.no_grad():
        score = forward(net, window, purified, schedule.t_eps)

    def log_prob_fn(x: torch.Tensor) -> float:
        return log_likelihood(net, schedule, x, purified, solver, estimator).log_prob

    report = check_score_log_inequality(window, score, log_prob_fn, eps_scale, seed)
    if report.flagged:
        logger.warning(
            f"Score/log-probability inequality violated: ||score||={report.score_norm:.4g}, "
            f"ratio={report.ratio:.4g}"
        )
    return report
