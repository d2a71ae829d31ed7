"""
Denoising score-matching training for the conditional score network.

One network is trained on two objectives per window: the conditional loss L1
(full window diffused, clean condition supplied) and the unconditional loss L2
(condition rows followed by a zero row diffused, ZERO condition supplied). Both
are weighted by lambda(l) = std(l)^2.
"""

import logging
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np
import torch

from .data import TimeSeries, Window, sliding_windows, stack_windows
from .scorenet import ConditionalScoreNet, save_checkpoint
from .sde import SdeSchedule
from .workspace import write_csv


logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Raised when training produces a non-finite loss."""

    def __init__(self, iteration: int, message: str):
        super().__init__(f"iteration {iteration}: {message}")
        self.iteration = iteration


@dataclass
class TrainConfig:
    """Optimization settings."""
    n_iter: int = 2000
    batch_size: int = 64
    learning_rate: float = 2e-4
    grad_clip_norm: float = 1.0
    lambda_mode: str = "variance"
    checkpoint_every: int = 5000
    log_every: int = 100
    seed: int = 0

    def validate(self):
        if self.n_iter < 0:
            raise ValueError(f"n_iter must be >= 0, got {self.n_iter}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not self.grad_clip_norm > 0:
            raise ValueError(f"grad_clip_norm must be positive, got {self.grad_clip_norm}")
        if self.lambda_mode != "variance":
            raise ValueError(f"unknown lambda_mode {self.lambda_mode!r}; only 'variance' is supported")
        if self.checkpoint_every < 1:
            raise ValueError(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "TrainConfig":
        return cls(**data)


@dataclass
class LossReport:
    """Losses of one training step (batch means) and the gradient norm before and after clipping."""
    iteration: int
    l1: float
    l2: float
    total: float
    grad_norm_preclip: float = 0.0
    grad_norm: float = 0.0

    def to_row(self) -> List:
        return [self.iteration, self.l1, self.l2, self.total]


LOSS_COLUMNS = ["iteration", "l1", "l2", "total"]


def _as_batch(window: Union[Window, np.ndarray, torch.Tensor]) -> torch.Tensor:
    target = window.target if isinstance(window, Window) else window
    if not isinstance(target, torch.Tensor):
        target = torch.as_tensor(np.asarray(target), dtype=torch.float32)
    return target[None] if target.ndim == 2 else target


def _check_time(schedule: SdeSchedule, l: torch.Tensor):
    if torch.any(l < schedule.t_eps) or torch.any(l > 1):
        raise ValueError(f"diffusion time must lie in [{schedule.t_eps}, 1], got {l.tolist()}")


def weight_lambda(schedule: SdeSchedule, l: Union[float, torch.Tensor]):
    """lambda(l) = std(l)^2, the transition-kernel variance."""
    return schedule.transition_moments(l).std ** 2


def weighted_losses(
    net: ConditionalScoreNet,
    schedule: SdeSchedule,
    targets: torch.Tensor,
    l: torch.Tensor,
    noise: torch.Tensor,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Per-sample lambda(l) * L1 and lambda(l) * L2.

    With lambda = std^2 each term equals the mean of (std * S + noise)^2, which
    stays well conditioned as l approaches t_eps.

    Args:
        targets: (B, omega+1, m) clean windows
        l: (B,) diffusion times in [t_eps, 1]
        noise: (B, omega+1, m) standard-normal draws shared by both losses
    """
    _check_time(schedule, l)
    std = schedule.transition_moments(l).std.to(targets.dtype)[:, None, None]
    dims = tuple(range(1, targets.ndim))

    x_l, _ = schedule.perturb(targets, l, noise)
    score = net(x_l, targets[:, :-1], l.to(targets.dtype))
    l1 = ((std * score + noise) ** 2).mean(dim=dims)

    x_bar = torch.cat([targets[:, :-1], torch.zeros_like(targets[:, :1])], dim=1)
    x_bar_l, _ = schedule.perturb(x_bar, l, noise)
    score_bar = net(x_bar_l, None, l.to(targets.dtype))
    l2 = ((std * score_bar + noise) ** 2).mean(dim=dims)
    return l1, l2


def _single_loss(net, schedule, window, l, noise, which: int) -> torch.Tensor:
    targets = _as_batch(window)
    noise = torch.as_tensor(noise, dtype=targets.dtype).reshape(targets.shape)
    lt = torch.full((targets.shape[0],), float(l), dtype=torch.float64)
    losses = weighted_losses(net, schedule, targets, lt, noise)
    lam = weight_lambda(schedule, lt).to(targets.dtype)
    return (losses[which] / lam).mean()


def loss_l1(net, schedule: SdeSchedule, window, l: float, noise) -> torch.Tensor:
    """Conditional denoising loss: mean squared error of S(x^l, condition, l) vs -noise/std."""
    return _single_loss(net, schedule, window, l, noise, 0)


def loss_l2(net, schedule: SdeSchedule, window, l: float, noise) -> torch.Tensor:
    """Unconditional denoising loss on the condition padded with a zero row."""
    return _single_loss(net, schedule, window, l, noise, 1)


def global_grad_norm(net: torch.nn.Module) -> float:
    """l2 norm of all parameter gradients taken together."""
    norms = [p.grad.detach().norm(2) for p in net.parameters() if p.grad is not None]
    if not norms:
        return 0.0
    return float(torch.linalg.vector_norm(torch.stack(norms), 2))


class ScoreTrainer:
    """Single-writer optimizer loop around a score network."""

    def __init__(self, net: ConditionalScoreNet, schedule: SdeSchedule, config: TrainConfig):
        """
        Initialize trainer.

        Args:
            net: Network to train in place
            schedule: Forward SDE
            config: Optimization settings
        """
        config.validate()
        self.net = net
        self.schedule = schedule
        self.config = config
        self.optimizer = torch.optim.Adam(
            net.parameters(), lr=config.learning_rate, betas=(0.9, 0.999)
        )
        self.generator = torch.Generator().manual_seed(int(config.seed))
        self.iteration = 0

    def train_step(self, batch: torch.Tensor) -> LossReport:
        """
        One Adam update on a batch of clean windows.

        Raises:
            ValueError: If the batch is empty
            TrainingError: If the loss is non-finite
        """
        if batch.shape[0] == 0:
            raise ValueError("training batch is empty")
        self.iteration += 1
        size = batch.shape[0]
        t_eps = self.schedule.t_eps
        l = t_eps + (1.0 - t_eps) * torch.rand(size, generator=self.generator, dtype=torch.float64)
        noise = torch.randn(batch.shape, generator=self.generator, dtype=batch.dtype)

        with torch.enable_grad():
            l1_w, l2_w = weighted_losses(self.net, self.schedule, batch, l, noise)
            total = (l1_w + l2_w).mean()
            if not torch.isfinite(total):
                raise TrainingError(self.iteration, f"non-finite loss {total.item()}")
            self.optimizer.zero_grad(set_to_none=True)
            total.backward()
        grad_norm_preclip = torch.nn.utils.clip_grad_norm_(self.net.parameters(), self.config.grad_clip_norm)
        grad_norm = global_grad_norm(self.net)
        self.optimizer.step()

        lam = weight_lambda(self.schedule, l).to(batch.dtype)
        report = LossReport(
            iteration=self.iteration,
            l1=float((l1_w.detach() / lam).mean()),
            l2=float((l2_w.detach() / lam).mean()),
            total=float(total.detach()),
            grad_norm_preclip=float(grad_norm_preclip),
            grad_norm=grad_norm,
        )
        logger.debug(
            f"iter {report.iteration}: L1={report.l1:.4g} L2={report.l2:.4g} total={report.total:.4g}"
        )
        return report

    def sample_batch(self, windows: torch.Tensor) -> torch.Tensor:
        """Uniform sampling of windows with replacement."""
        idx = torch.randint(
            windows.shape[0], (self.config.batch_size,), generator=self.generator
        )
        return windows[idx]


def train(
    net: ConditionalScoreNet,
    series: TimeSeries,
    config: TrainConfig,
    schedule: SdeSchedule,
    checkpoint_dir: Optional[Path] = None,
    on_checkpoint: Optional[Callable[[int, Path], None]] = None,
) -> Tuple[ConditionalScoreNet, List[LossReport]]:
    """
    Train the network in place on sliding windows of a series.

    Args:
        net: Network to train
        series: Training series (already scaled)
        config: Optimization settings
        schedule: Forward SDE
        checkpoint_dir: If set, write ckpt_<iteration>.bin every checkpoint_every steps
        on_checkpoint: Optional callback after each checkpoint

    Returns:
        (trained network, loss history)
    """
    config.validate()
    windows = torch.from_numpy(
        stack_windows(sliding_windows(series, net.config.omega)).astype(np.float32)
    )
    trainer = ScoreTrainer(net, schedule, config)
    history: List[LossReport] = []
    if config.n_iter == 0:
        return net, history

    logger.info(
        f"Training for {config.n_iter} iterations on {windows.shape[0]} windows "
        f"(batch={config.batch_size}, lr={config.learning_rate})"
    )
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)

    for _ in range(config.n_iter):
        report = trainer.train_step(trainer.sample_batch(windows))
        history.append(report)

        if report.iteration % config.log_every == 0:
            recent = history[-config.log_every:]
            logger.info(
                f"iter {report.iteration}/{config.n_iter}: "
                f"mean loss {np.mean([r.total for r in recent]):.4f}"
            )
        if checkpoint_dir is not None and report.iteration % config.checkpoint_every == 0:
            path = Path(checkpoint_dir) / f"ckpt_{report.iteration:06d}.bin"
            save_checkpoint(net, path, extra={"iteration": report.iteration})
            logger.info(f"Wrote checkpoint {path}")
            if on_checkpoint:
                on_checkpoint(report.iteration, path)

    logger.info(f"Training finished: final loss {history[-1].total:.4f}")
    return net, history


def write_loss_history(path: Path, history: List[LossReport], header_comments=()):
    """Persist the loss history, one row per iteration."""
    write_csv(path, LOSS_COLUMNS, [r.to_row() for r in history], header_comments)
    logger.info(f"Wrote {len(history)} loss rows to {path}")
