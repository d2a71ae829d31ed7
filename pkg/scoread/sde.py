"""
Forward and reverse diffusion processes.

Implements the variance-preserving (VP) SDE
    dx = -1/2 beta(l) x dl + sqrt(beta(l)) dw,   l in [0, 1]
with a linear beta schedule, its closed-form Gaussian transition kernel, the
reverse-SDE and probability-flow-ODE drifts, and the standard-normal prior.
"""

import abc
import logging
import math
from dataclasses import dataclass
from typing import Sequence, Tuple, Union

import numpy as np
import torch


logger = logging.getLogger(__name__)

Time = Union[float, torch.Tensor]


@dataclass(frozen=True)
class TransitionMoments:
    """Moments of p(x^l | x^0) = N(mean_coeff * x^0, std^2 I)."""
    mean_coeff: Union[float, torch.Tensor]
    std: Union[float, torch.Tensor]


def _as_time(l: Time) -> torch.Tensor:
    if isinstance(l, torch.Tensor):
        return l.to(torch.float64)
    return torch.tensor(float(l), dtype=torch.float64)


def _check_range(l: torch.Tensor, low: float = 0.0):
    if l.numel() and (torch.any(l < low) or torch.any(l > 1.0) or not torch.all(torch.isfinite(l))):
        raise ValueError(f"diffusion time must lie in [{low}, 1], got {l.tolist()}")


def _unwrap(value: torch.Tensor, like: Time):
    return value if isinstance(like, torch.Tensor) else float(value)


def _broadcast(coef: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Broadcast a scalar or per-sample (B,) coefficient over x of shape (B, ...)."""
    coef = coef.to(dtype=x.dtype, device=x.device)
    if coef.ndim == 0:
        return coef
    return coef.reshape(coef.shape + (1,) * (x.ndim - coef.ndim))


class SdeSchedule(abc.ABC):
    """
    A forward SDE on diffusion time l in [0, 1] with a Gaussian transition kernel.

    Subclasses supply beta(l) and its integral; everything else follows.
    """

    kind: str = "abstract"
    t_eps: float

    @abc.abstractmethod
    def beta(self, l: Time) -> Time:
        """Noise rate beta(l)."""

    @abc.abstractmethod
    def integrated_beta(self, l: Time) -> Time:
        """B(l) = integral of beta over [0, l]."""

    def drift(self, x: torch.Tensor, l: Time) -> torch.Tensor:
        """f(x, l) = -1/2 beta(l) x."""
        lt = _as_time(l)
        _check_range(lt)
        return -0.5 * _broadcast(self._beta(lt), x) * x

    def diffusion(self, l: Time) -> Time:
        """g(l) = sqrt(beta(l))."""
        lt = _as_time(l)
        _check_range(lt)
        return _unwrap(torch.sqrt(self._beta(lt)), l)

    def transition_moments(self, l: Time) -> TransitionMoments:
        """Closed-form mean coefficient and std of the transition kernel."""
        lt = _as_time(l)
        _check_range(lt)
        big_b = self._integrated_beta(lt)
        mean_coeff = torch.exp(-0.5 * big_b)
        std = torch.sqrt(-torch.expm1(-big_b))
        return TransitionMoments(_unwrap(mean_coeff, l), _unwrap(std, l))

    def perturb(
        self, x0: torch.Tensor, l: Time, noise: torch.Tensor
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        Diffuse x0 to time l with the given standard-normal noise.

        Returns:
            (x_l, dsm_target) where dsm_target = -noise / std is the score of the
            transition kernel at x_l

        Raises:
            ValueError: If shapes differ or std(l) == 0
        """
        if noise.shape != x0.shape:
            raise ValueError(f"noise shape {tuple(noise.shape)} != x0 shape {tuple(x0.shape)}")
        lt = _as_time(l)
        _check_range(lt)
        moments = self.transition_moments(lt)
        if torch.any(moments.std <= 0):
            raise ValueError("perturb needs l > 0: the denoising target is undefined at std = 0")
        mean_coeff = _broadcast(moments.mean_coeff, x0)
        std = _broadcast(moments.std, x0)
        x_l = mean_coeff * x0 + std * noise
        return x_l, -noise / std

    def reverse_drift(self, x: torch.Tensor, l: Time, score: torch.Tensor) -> torch.Tensor:
        """Reverse-SDE drift f - g^2 * score."""
        self._check_shapes(x, score)
        lt = _as_time(l)
        return self.drift(x, lt) - _broadcast(self._beta(lt), x) * score

    def pf_ode_drift(self, x: torch.Tensor, l: Time, score: torch.Tensor) -> torch.Tensor:
        """Probability-flow ODE drift f - 1/2 g^2 * score."""
        self._check_shapes(x, score)
        lt = _as_time(l)
        return self.drift(x, lt) - 0.5 * _broadcast(self._beta(lt), x) * score

    def prior_logpdf(self, x: torch.Tensor, batched: bool = False) -> Union[float, torch.Tensor]:
        """
        Standard-normal log density.

        Args:
            x: Point(s) to evaluate
            batched: If True, treat the first axis as a batch and return one value per row
        """
        x = x.to(torch.float64)
        if batched:
            flat = x.reshape(x.shape[0], -1)
            n = flat.shape[1]
            return -0.5 * n * math.log(2 * math.pi) - 0.5 * (flat ** 2).sum(dim=1)
        n = x.numel()
        return float(-0.5 * n * math.log(2 * math.pi) - 0.5 * (x ** 2).sum())

    def prior_sample(self, shape: Sequence[int], seed: int, dtype=torch.float32) -> torch.Tensor:
        """Deterministic standard-normal draw."""
        generator = torch.Generator().manual_seed(int(seed))
        return torch.randn(tuple(shape), generator=generator, dtype=dtype)

    def simulate_forward(
        self,
        x0: torch.Tensor,
        l_end: float,
        n_steps: int,
        n_paths: int,
        seed: int,
    ) -> torch.Tensor:
        """
        Euler-Maruyama simulation of the forward SDE from a fixed x0.

        Returns:
            Tensor of shape (n_paths,) + x0.shape with the states at l_end
        """
        if n_steps < 1 or n_paths < 1:
            raise ValueError("n_steps and n_paths must be positive")
        _check_range(_as_time(l_end))
        generator = torch.Generator().manual_seed(int(seed))
        x = x0.to(torch.float64).expand((n_paths,) + tuple(x0.shape)).clone()
        dl = l_end / n_steps
        for k in range(n_steps):
            l = k * dl
            noise = torch.randn(x.shape, generator=generator, dtype=torch.float64)
            x = x + self.drift(x, l) * dl + self.diffusion(l) * math.sqrt(dl) * noise
        return x

    def _beta(self, l: torch.Tensor) -> torch.Tensor:
        return _as_time(self.beta(l))

    def _integrated_beta(self, l: torch.Tensor) -> torch.Tensor:
        return _as_time(self.integrated_beta(l))

    @staticmethod
    def _check_shapes(x: torch.Tensor, score: torch.Tensor):
        if x.shape != score.shape:
            raise ValueError(f"score shape {tuple(score.shape)} != state shape {tuple(x.shape)}")


@dataclass(frozen=True)
class VPSchedule(SdeSchedule):
    """Variance-preserving SDE with beta(l) = beta_min + l (beta_max - beta_min)."""
    beta_min: float = 0.1
    beta_max: float = 20.0
    t_eps: float = 1e-5

    kind = "vp"

    def __post_init__(self):
        if not self.beta_min > 0:
            raise ValueError(f"beta_min must be positive, got {self.beta_min}")
        if not self.beta_max > self.beta_min:
            raise ValueError(f"beta_max must exceed beta_min, got {self.beta_max} <= {self.beta_min}")
        if not 0 < self.t_eps <= 0.01:
            raise ValueError(f"t_eps must lie in (0, 0.01], got {self.t_eps}")

    def beta(self, l: Time) -> Time:
        return self.beta_min + l * (self.beta_max - self.beta_min)

    def integrated_beta(self, l: Time) -> Time:
        return self.beta_min * l + 0.5 * l ** 2 * (self.beta_max - self.beta_min)


def make_schedule(kind: str = "vp", **kwargs) -> SdeSchedule:
    """Build a schedule by kind name. Only 'vp' is available."""
    if kind.lower() != "vp":
        raise ValueError(f"unsupported SDE kind {kind!r}; only 'vp' is implemented")
    return VPSchedule(**kwargs)


def gaussian_kernel_logpdf(
    x_l: np.ndarray, x0: np.ndarray, mean_coeff: float, std: float
) -> float:
    """log N(x_l; mean_coeff * x0, std^2 I), used to cross-check denoising targets."""
    diff = np.asarray(x_l, dtype=np.float64) - mean_coeff * np.asarray(x0, dtype=np.float64)
    n = diff.size
    return float(-0.5 * n * np.log(2 * np.pi * std ** 2) - 0.5 * np.sum(diff ** 2) / std ** 2)
