"""scoread - Score-based anomaly detection for multivariate time series."""

__version__ = "0.1.0"

from .data import TimeSeries, Window, SynthSpec, load_csv, sliding_windows
from .sde import VPSchedule, make_schedule
from .scorenet import ScoreNetConfig, ConditionalScoreNet, init_network, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, train
from .sampler import SolverConfig, TraceEstimator, log_likelihood, sample_pf_ode, sample_reverse_sde
from .anomaly import Combination, DetectorConfig, AnomalySeries, score_series
from .evaluation import EvalResult, best_threshold_sweep, f1_pa_k_curve

__all__ = [
    "TimeSeries",
    "Window",
    "SynthSpec",
    "load_csv",
    "sliding_windows",
    "VPSchedule",
    "make_schedule",
    "ScoreNetConfig",
    "ConditionalScoreNet",
    "init_network",
    "load_checkpoint",
    "save_checkpoint",
    "TrainConfig",
    "train",
    "SolverConfig",
    "TraceEstimator",
    "log_likelihood",
    "sample_pf_ode",
    "sample_reverse_sde",
    "Combination",
    "DetectorConfig",
    "AnomalySeries",
    "score_series",
    "EvalResult",
    "best_threshold_sweep",
    "f1_pa_k_curve",
]
