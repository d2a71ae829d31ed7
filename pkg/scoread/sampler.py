"""
Samplers and likelihoods for the conditional score network.

The probability-flow ODE is integrated with scipy's adaptive explicit Runge-Kutta
solvers (RK45, RK23, DOP853); the reverse SDE uses Euler-Maruyama. Exact
log-likelihoods integrate the divergence of the ODE drift alongside the state.
"""

import logging
import math
from dataclasses import dataclass, asdict, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from scipy import integrate

from .scorenet import ConditionalScoreNet
from .sde import SdeSchedule


logger = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """Raised when an ODE/SDE solve diverges or exceeds its step budget."""


class SolverMethod(Enum):
    """Adaptive explicit Runge-Kutta pairs."""
    RK45 = "RK45"
    RK23 = "RK23"
    DOP853 = "DOP853"


class TraceMode(Enum):
    """How the drift divergence is computed."""
    EXACT = "exact"
    HUTCHINSON = "hutchinson"


@dataclass
class SolverConfig:
    """ODE solver settings; max_steps bounds the score evaluations of one solve."""
    method: SolverMethod = SolverMethod.RK45
    rtol: float = 1e-3
    atol: float = 1e-3
    max_steps: int = 20000

    def validate(self):
        for name in ("rtol", "atol"):
            value = getattr(self, name)
            if not 1e-8 <= value <= 1e-1:
                raise ValueError(f"{name} must lie in [1e-8, 1e-1], got {value}")
        if self.max_steps < 1:
            raise ValueError(f"max_steps must be >= 1, got {self.max_steps}")

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["method"] = self.method.value
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "SolverConfig":
        data = dict(data)
        data["method"] = SolverMethod(data["method"])
        return cls(**data)


@dataclass
class TraceEstimator:
    """Divergence estimator: exact per-coordinate trace or Rademacher probes."""
    mode: TraceMode = TraceMode.EXACT
    n_probes: int = 1
    seed: int = 0

    def validate(self):
        if self.n_probes < 1:
            raise ValueError(f"n_probes must be >= 1, got {self.n_probes}")

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["mode"] = self.mode.value
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "TraceEstimator":
        data = dict(data)
        data["mode"] = TraceMode(data["mode"])
        return cls(**data)


@dataclass
class NfeRecord:
    """Number of score-network evaluations spent by one solve."""
    kind: str
    count: int = 0

    def tick(self, limit: Optional[int] = None):
        self.count += 1
        if limit is not None and self.count > limit:
            raise SolverError(f"{self.kind} solve exceeded max_steps={limit} evaluations")


@dataclass
class NfeStats:
    """Aggregate of NfeRecords per solve kind."""
    counts: Dict[str, List[int]] = field(default_factory=dict)

    def add(self, record: NfeRecord):
        self.counts.setdefault(record.kind, []).append(record.count)

    def merge(self, other: "NfeStats"):
        for kind, values in other.counts.items():
            self.counts.setdefault(kind, []).extend(values)

    def total(self, kind: str) -> int:
        return int(sum(self.counts.get(kind, [])))

    def rows(self) -> List[List]:
        rows = []
        for kind in sorted(self.counts):
            values = np.asarray(self.counts[kind])
            rows.append([kind, len(values), int(values.sum()), float(values.mean()),
                         int(values.min()), int(values.max())])
        return rows


NFE_COLUMNS = ["kind", "solves", "total", "mean", "min", "max"]


@dataclass
class LikelihoodResult:
    """Log-likelihood of one window under the probability-flow ODE."""
    log_prob: float
    bits_per_dim: float
    latent: torch.Tensor
    nfe: NfeRecord


def _dtype(net: ConditionalScoreNet) -> torch.dtype:
    return next(net.parameters()).dtype


def _batched_condition(condition: Optional[torch.Tensor], size: int, dtype) -> Optional[torch.Tensor]:
    if condition is None:
        return None
    cond = condition.to(dtype)
    if cond.ndim == 2:
        cond = cond[None]
    return cond.expand((size,) + tuple(cond.shape[1:]))


def _pf_field(
    net: ConditionalScoreNet, schedule: SdeSchedule, condition: Optional[torch.Tensor], l: float
) -> Callable[[torch.Tensor], torch.Tensor]:
    """Batched probability-flow drift x -> f(x, l) - 1/2 g(l)^2 S(x, condition, l)."""

    def field_fn(x: torch.Tensor) -> torch.Tensor:
        size = x.shape[0]
        cond = _batched_condition(condition, size, x.dtype)
        lt = torch.full((size,), l, dtype=x.dtype)
        score = net(x, cond, lt)
        return schedule.pf_ode_drift(x, l, score)

    return field_fn


def _solve(
    rhs: Callable, span: Tuple[float, float], y0: np.ndarray, solver: SolverConfig, nfe: NfeRecord
) -> np.ndarray:
    solver.validate()
    solution = integrate.solve_ivp(
        rhs, span, y0, method=solver.method.value, rtol=solver.rtol, atol=solver.atol
    )
    if not solution.success:
        raise SolverError(f"{nfe.kind} solve failed: {solution.message}")
    final = solution.y[:, -1]
    if not np.all(np.isfinite(final)):
        raise SolverError(f"{nfe.kind} solve produced a non-finite state")
    logger.debug(f"{nfe.kind} solve: {nfe.count} evaluations ({solver.method.value})")
    return final


def _integrate_pf_ode(
    net: ConditionalScoreNet,
    schedule: SdeSchedule,
    x_start: torch.Tensor,
    condition: Optional[torch.Tensor],
    l_start: float,
    solver: SolverConfig,
    nfe: NfeRecord,
) -> torch.Tensor:
    shape = tuple(x_start.shape)
    dtype = _dtype(net)

    def rhs(l, y):
        nfe.tick(solver.max_steps)
        x = torch.from_numpy(y.reshape((1,) + shape)).to(dtype)
        if not torch.all(torch.isfinite(x)):
            raise SolverError(f"{nfe.kind} state became non-finite at l={l:.4g}")
        with torch.no_grad():
            drift = _pf_field(net, schedule, condition, float(l))(x)
        return drift.to(torch.float64).numpy().reshape(-1)

    y0 = x_start.detach().to(torch.float64).numpy().reshape(-1)
    final = _solve(rhs, (l_start, schedule.t_eps), y0, solver, nfe)
    return torch.from_numpy(final.reshape(shape)).to(dtype)


def sample_pf_ode(
    net: ConditionalScoreNet,
    schedule: SdeSchedule,
    condition: Optional[torch.Tensor],
    seed: int,
    solver: SolverConfig,
) -> Tuple[torch.Tensor, NfeRecord]:
    """
    Generate one window by integrating the conditional probability-flow ODE
    from l = 1 down to t_eps, starting at a seeded prior draw.

    Args:
        condition: (omega, m) condition or None for ZERO

    Returns:
        ((omega+1, m) window, NfeRecord)
    """
    cfg = net.config
    x1 = schedule.prior_sample((cfg.window_length, cfg.m), seed, dtype=_dtype(net))
    nfe = NfeRecord("pf_ode_sample")
    window = _integrate_pf_ode(net, schedule, x1, condition, 1.0, solver, nfe)
    return window, nfe


def decode_latent(
    net: ConditionalScoreNet,
    schedule: SdeSchedule,
    latent: torch.Tensor,
    condition: Optional[torch.Tensor],
    solver: SolverConfig,
) -> Tuple[torch.Tensor, NfeRecord]:
    """Integrate the PF-ODE from a given l = 1 state (e.g. LikelihoodResult.latent) down to t_eps."""
    nfe = NfeRecord("pf_ode_sample")
    window = _integrate_pf_ode(net, schedule, latent.to(_dtype(net)), condition, 1.0, solver, nfe)
    return window, nfe


def sample_reverse_sde(
    net: ConditionalScoreNet,
    schedule: SdeSchedule,
    condition: Optional[torch.Tensor],
    seed: int,
    n_steps: int = 2000,
) -> Tuple[torch.Tensor, NfeRecord]:
    """
    Generate one window with Euler-Maruyama on the conditional reverse SDE,
    n_steps uniform steps from l = 1 to t_eps (one score evaluation per step).
    """
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    cfg = net.config
    dtype = _dtype(net)
    generator = torch.Generator().manual_seed(int(seed))
    x = torch.randn((1, cfg.window_length, cfg.m), generator=generator, dtype=dtype)
    cond = _batched_condition(condition, 1, dtype)
    dl = (1.0 - schedule.t_eps) / n_steps
    nfe = NfeRecord("reverse_sde_sample")

    with torch.no_grad():
        for i in range(n_steps):
            l = 1.0 - i * dl
            nfe.tick()
            score = net(x, cond, torch.full((1,), l, dtype=dtype))
            noise = torch.randn(x.shape, generator=generator, dtype=dtype)
            x = x - schedule.reverse_drift(x, l, score) * dl + schedule.diffusion(l) * math.sqrt(dl) * noise
            if not torch.all(torch.isfinite(x)):
                raise SolverError(f"reverse SDE state became non-finite at l={l:.4g}")
    return x[0], nfe


def rademacher_probes(shape: Sequence[int], n_probes: int, seed: int, dtype=torch.float32) -> torch.Tensor:
    """(n_probes,) + shape tensor of independent +/-1 entries."""
    generator = torch.Generator().manual_seed(int(seed))
    bits = torch.randint(0, 2, (n_probes,) + tuple(shape), generator=generator)
    return (bits * 2 - 1).to(dtype)


def _drift_and_divergence(
    field_fn: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    estimator: TraceEstimator,
    probes: Optional[torch.Tensor] = None,
) -> Tuple[torch.Tensor, float]:
    """
    Field value at x and its divergence from one batched forward/backward pass.

    Exact mode replicates x once per coordinate and reads the Jacobian diagonal
    off the batched gradient; Hutchinson mode averages eps^T J eps over probes.
    """
    shape = tuple(x.shape)
    n = x.numel()
    with torch.enable_grad():
        if estimator.mode == TraceMode.EXACT:
            xb = x.detach()[None].expand((n,) + shape).clone().requires_grad_(True)
            out = field_fn(xb)
            selected = out.reshape(n, n).diagonal().sum()
            grad = torch.autograd.grad(selected, xb)[0]
            div = grad.reshape(n, n).diagonal().sum()
        else:
            if probes is None:
                probes = rademacher_probes(shape, estimator.n_probes, estimator.seed, x.dtype)
            probes = probes.to(x.dtype)
            xb = x.detach()[None].expand((probes.shape[0],) + shape).clone().requires_grad_(True)
            out = field_fn(xb)
            grad = torch.autograd.grad((out * probes).sum(), xb)[0]
            div = (grad * probes).reshape(probes.shape[0], -1).sum(dim=1).mean()
    return out[0].detach(), float(div)


def divergence(
    field_fn: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    estimator: TraceEstimator,
    probes: Optional[torch.Tensor] = None,
) -> float:
    """
    Divergence of a batched vector field at x.

    Args:
        field_fn: Maps a (B,) + x.shape batch to a batch of the same shape,
            treating rows independently
        x: Evaluation point
        estimator: Exact trace or Hutchinson with Rademacher probes
        probes: Optional fixed probes for Hutchinson mode

    Returns:
        Divergence (exact) or its unbiased estimate (Hutchinson)
    """
    estimator.validate()
    return _drift_and_divergence(field_fn, x, estimator, probes)[1]


def log_likelihood(
    net: ConditionalScoreNet,
    schedule: SdeSchedule,
    window: torch.Tensor,
    condition: Optional[torch.Tensor],
    solver: SolverConfig,
    estimator: TraceEstimator,
) -> LikelihoodResult:
    """
    Conditional log-likelihood log p(window | condition) in nats.

    Integrates the state together with the drift divergence from t_eps to 1 and
    adds the prior log-density of the endpoint. Hutchinson probes are drawn once
    per solve.
    """
    estimator.validate()
    dtype = _dtype(net)
    window = window.to(dtype)
    shape = tuple(window.shape)
    n = window.numel()
    probes = None
    if estimator.mode == TraceMode.HUTCHINSON:
        probes = rademacher_probes(shape, estimator.n_probes, estimator.seed, dtype)
    nfe = NfeRecord("likelihood")

    def rhs(l, y):
        nfe.tick(solver.max_steps)
        x = torch.from_numpy(y[:n].reshape(shape)).to(dtype)
        if not torch.all(torch.isfinite(x)):
            raise SolverError(f"likelihood state became non-finite at l={l:.4g}")
        drift, div = _drift_and_divergence(
            _pf_field(net, schedule, condition, float(l)), x, estimator, probes
        )
        return np.concatenate([drift.to(torch.float64).numpy().reshape(-1), [div]])

    y0 = np.concatenate([window.detach().to(torch.float64).numpy().reshape(-1), [0.0]])
    final = _solve(rhs, (schedule.t_eps, 1.0), y0, solver, nfe)
    latent = torch.from_numpy(final[:n].reshape(shape))
    log_prob = schedule.prior_logpdf(latent) + float(final[n])
    return LikelihoodResult(
        log_prob=log_prob,
        bits_per_dim=-log_prob / (n * math.log(2)),
        latent=latent,
        nfe=nfe,
    )


def partial_diffuse_denoise(
    net: ConditionalScoreNet,
    schedule: SdeSchedule,
    x_bar: torch.Tensor,
    tau: float,
    seed: int,
    solver: SolverConfig,
) -> Tuple[torch.Tensor, NfeRecord]:
    """
    Diffuse x_bar to l = tau with one closed-form Gaussian draw, then denoise it
    along the ZERO-condition probability-flow ODE back to t_eps.

    tau = 0 returns x_bar unchanged without evaluating the network, and so does
    any tau at or below t_eps.
    """
    if not 0 <= tau <= 1:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    nfe = NfeRecord("purification")
    if tau == 0:
        return x_bar.clone(), nfe

    dtype = _dtype(net)
    if tau <= schedule.t_eps:
        return x_bar.to(dtype).clone(), nfe
    generator = torch.Generator().manual_seed(int(seed))
    noise = torch.randn(x_bar.shape, generator=generator, dtype=dtype)
    x_tau, _ = schedule.perturb(x_bar.to(dtype), tau, noise)
    return _integrate_pf_ode(net, schedule, x_tau, None, tau, solver, nfe), nfe


def generate_batch(
    net: ConditionalScoreNet,
    schedule: SdeSchedule,
    condition: Optional[torch.Tensor],
    seeds: Sequence[int],
    solver: Optional[SolverConfig] = None,
    reverse_sde_steps: Optional[int] = None,
) -> Tuple[torch.Tensor, NfeStats]:
    """
    Draw one window per seed, with the PF-ODE (default) or the reverse SDE.

    Returns:
        ((len(seeds), omega+1, m) samples, NfeStats)
    """
    stats = NfeStats()
    samples = []
    for seed in seeds:
        if reverse_sde_steps is None:
            window, record = sample_pf_ode(net, schedule, condition, seed, solver or SolverConfig())
        else:
            window, record = sample_reverse_sde(net, schedule, condition, seed, reverse_sde_steps)
        stats.add(record)
        samples.append(window)
    return torch.stack(samples), stats
