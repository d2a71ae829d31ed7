"""
Conditional score network S(x^l, condition, l).

A 1-D convolutional encoder-decoder over the time axis of a window. The diffused
window and its condition (padded with one zero row) are stacked on the channel
axis; diffusion time enters through fixed Gaussian Fourier features injected into
every residual block.
"""

import json
import logging
import struct
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Callable, Dict, List, Optional, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SCORENET"
CHECKPOINT_VERSION = 1

GradientSet = Dict[str, torch.Tensor]


class CheckpointError(ValueError):
    """Raised for unreadable, corrupted or incompatible checkpoint files."""


@dataclass
class ScoreNetConfig:
    """Shape and size of the score network."""
    omega: int = 10
    m: int = 1
    n_layer: int = 3
    n_resnet: int = 2
    channel_width: int = 32
    time_embed_dim: int = 32
    fourier_scale: float = 16.0
    seed: int = 0

    def validate(self):
        if self.n_layer not in (2, 3, 4):
            raise ValueError(f"n_layer must be 2, 3 or 4, got {self.n_layer}")
        if not 1 <= self.n_resnet <= 4:
            raise ValueError(f"n_resnet must lie in 1..4, got {self.n_resnet}")
        for name in ("omega", "m", "channel_width", "time_embed_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.time_embed_dim % 2:
            raise ValueError(f"time_embed_dim must be even, got {self.time_embed_dim}")
        if not self.fourier_scale > 0:
            raise ValueError(f"fourier_scale must be positive, got {self.fourier_scale}")

    @property
    def window_length(self) -> int:
        return self.omega + 1

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "ScoreNetConfig":
        return cls(**data)


class GaussianFourierProjection(nn.Module):
    """Fixed random Fourier features of diffusion time."""

    def __init__(self, embed_dim: int, scale: float):
        super().__init__()
        self.register_buffer("freqs", torch.randn(embed_dim // 2) * scale)

    def forward(self, l: torch.Tensor) -> torch.Tensor:
        proj = l[:, None] * self.freqs[None, :] * 2 * np.pi
        return torch.cat([torch.sin(proj), torch.cos(proj)], dim=-1)


def _groups(channels: int) -> int:
    for g in (8, 4, 2):
        if channels % g == 0:
            return g
    return 1


class ResBlock(nn.Module):
    """GroupNorm -> SiLU -> Conv, twice, with additive time conditioning."""

    def __init__(self, in_ch: int, out_ch: int, embed_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv1d(in_ch, out_ch, 3, padding=1)
        self.time = nn.Linear(embed_dim, out_ch)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv1d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv1d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, h: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        out = self.conv1(F.silu(self.norm1(h)))
        out = out + self.time(emb)[:, :, None]
        out = self.conv2(F.silu(self.norm2(out)))
        return self.skip(h) + out


class ConditionalScoreNet(nn.Module):
    """
    Encoder-decoder with skip connections over the window's time axis.

    Inputs are (B, omega+1, m) diffused windows and (B, omega, m) conditions;
    the output has the diffused window's shape.
    """

    def __init__(self, config: ScoreNetConfig):
        super().__init__()
        config.validate()
        self.config = config
        width = config.channel_width
        emb_dim = config.time_embed_dim
        mults = (1, 2, 2, 2)[: config.n_layer]
        self.channels = [width * k for k in mults]

        self.embed = GaussianFourierProjection(emb_dim, config.fourier_scale)
        self.embed_mlp = nn.Sequential(
            nn.Linear(emb_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim)
        )
        self.stem = nn.Conv1d(2 * config.m, width, 3, padding=1)

        self.down_blocks = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        in_ch = width
        for level, ch in enumerate(self.channels):
            blocks = nn.ModuleList()
            for _ in range(config.n_resnet):
                blocks.append(ResBlock(in_ch, ch, emb_dim))
                in_ch = ch
            self.down_blocks.append(blocks)
            if level < config.n_layer - 1:
                self.downsamples.append(nn.Conv1d(ch, ch, 3, stride=2, padding=1))

        self.mid = ResBlock(in_ch, in_ch, emb_dim)

        self.up_blocks = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for level in reversed(range(config.n_layer)):
            ch = self.channels[level]
            blocks = nn.ModuleList()
            for k in range(config.n_resnet):
                blocks.append(ResBlock(in_ch + (ch if k == 0 else 0), ch, emb_dim))
                in_ch = ch
            self.up_blocks.append(blocks)
            if level > 0:
                self.upsamples.append(nn.Conv1d(ch, self.channels[level - 1], 3, padding=1))
                in_ch = self.channels[level - 1]

        self.out_norm = nn.GroupNorm(_groups(in_ch), in_ch)
        self.out_conv = nn.Conv1d(in_ch, config.m, 3, padding=1)

    @property
    def _padded_length(self) -> int:
        stride = 2 ** (self.config.n_layer - 1)
        length = self.config.window_length
        return -(-length // stride) * stride

    def forward(
        self, x: torch.Tensor, condition: Optional[torch.Tensor], l: torch.Tensor
    ) -> torch.Tensor:
        """
        Evaluate the score.

        Args:
            x: (B, omega+1, m) diffused windows
            condition: (B, omega, m) conditions, or None for the all-zero condition
            l: (B,) diffusion times

        Returns:
            (B, omega+1, m) score estimates
        """
        batch, length, m = x.shape
        if condition is None:
            padded_cond = torch.zeros_like(x)
        else:
            padded_cond = torch.cat([condition, torch.zeros_like(x[:, :1])], dim=1)

        h = torch.cat([x, padded_cond], dim=2).transpose(1, 2)
        h = F.pad(h, (0, self._padded_length - length))

        emb = self.embed_mlp(self.embed(l.to(x.dtype)))
        h = self.stem(h)

        skips: List[torch.Tensor] = []
        for level, blocks in enumerate(self.down_blocks):
            for block in blocks:
                h = block(h, emb)
            skips.append(h)
            if level < len(self.downsamples):
                h = self.downsamples[level](h)

        h = self.mid(h, emb)

        for i, blocks in enumerate(self.up_blocks):
            h = torch.cat([h, skips.pop()], dim=1)
            for block in blocks:
                h = block(h, emb)
            if i < len(self.upsamples):
                h = F.interpolate(h, scale_factor=2, mode="nearest")
                h = self.upsamples[i](h)

        out = self.out_conv(F.silu(self.out_norm(h)))
        return out[:, :, :length].transpose(1, 2)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def _initialize(net: ConditionalScoreNet):
    for module in net.modules():
        if isinstance(module, (nn.Conv1d, nn.Linear)):
            nn.init.kaiming_normal_(module.weight, mode="fan_in", nonlinearity="relu")
            nn.init.zeros_(module.bias)
    # Untrained score is exactly zero.
    nn.init.zeros_(net.out_conv.weight)
    nn.init.zeros_(net.out_conv.bias)


def init_network(config: ScoreNetConfig) -> ConditionalScoreNet:
    """
    Build a score network with deterministic initialization.

    All random draws (weights and Fourier frequencies) come from config.seed; the
    global torch RNG state is left untouched.
    """
    config.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        net = ConditionalScoreNet(config)
        _initialize(net)
    net.eval()
    logger.info(
        f"Initialized score network: omega={config.omega}, m={config.m}, "
        f"n_layer={config.n_layer}, n_resnet={config.n_resnet}, "
        f"params={net.parameter_count()}"
    )
    return net


def _check_inputs(net: ConditionalScoreNet, x: torch.Tensor, condition, l: torch.Tensor):
    cfg = net.config
    expected = (cfg.window_length, cfg.m)
    if tuple(x.shape[1:]) != expected:
        raise ValueError(f"window shape {tuple(x.shape[1:])} != expected {expected}")
    if condition is not None and tuple(condition.shape) != (x.shape[0], cfg.omega, cfg.m):
        raise ValueError(
            f"condition shape {tuple(condition.shape)} != expected {(x.shape[0], cfg.omega, cfg.m)}"
        )
    if l.shape != (x.shape[0],):
        raise ValueError(f"diffusion times must have shape ({x.shape[0]},), got {tuple(l.shape)}")
    if torch.any(l < 0) or torch.any(l > 1):
        raise ValueError("diffusion time must lie in [0, 1]")
    if not torch.all(torch.isfinite(x)) or (
        condition is not None and not torch.all(torch.isfinite(condition))
    ):
        raise ValueError("score network input contains non-finite values")


def forward(
    net: ConditionalScoreNet,
    x_l: torch.Tensor,
    condition: Optional[torch.Tensor],
    l: Union[float, torch.Tensor],
) -> torch.Tensor:
    """
    Score of a single window or a batch.

    Args:
        net: Score network
        x_l: (omega+1, m) window or (B, omega+1, m) batch
        condition: matching (omega, m) / (B, omega, m) condition, or None for ZERO
        l: Diffusion time, scalar or (B,)

    Returns:
        Score tensor with x_l's shape
    """
    single = x_l.ndim == 2
    x = x_l[None] if single else x_l
    cond = None
    if condition is not None:
        cond = condition[None] if single else condition
        cond = cond.to(x.dtype)
    lt = torch.as_tensor(l, dtype=x.dtype)
    if lt.ndim == 0:
        lt = lt.expand(x.shape[0])
    _check_inputs(net, x, cond, lt)
    out = net(x, cond, lt)
    return out[0] if single else out


def score_fn(net: ConditionalScoreNet) -> Callable:
    """Closure (x, condition, l) -> score used by the samplers."""

    def fn(x: torch.Tensor, condition: Optional[torch.Tensor], l) -> torch.Tensor:
        return forward(net, x, condition, l)

    return fn


def time_embedding(net: ConditionalScoreNet, l: float) -> torch.Tensor:
    """Fourier features of diffusion time l (frequencies fixed at init)."""
    if not 0 <= l <= 1:
        raise ValueError(f"diffusion time must lie in [0, 1], got {l}")
    with torch.no_grad():
        return net.embed(torch.tensor([l], dtype=net.embed.freqs.dtype))[0]


def backward(
    net: ConditionalScoreNet,
    x_l: torch.Tensor,
    condition: Optional[torch.Tensor],
    l: Union[float, torch.Tensor],
    cotangent: torch.Tensor,
) -> GradientSet:
    """
    Reverse-mode gradient of <forward(...), cotangent> w.r.t. every parameter.

    Raises:
        RuntimeError: If a gradient is non-finite (names the parameter)
    """
    params = dict(net.named_parameters())
    with torch.enable_grad():
        out = forward(net, x_l, condition, l)
        if cotangent.shape != out.shape:
            raise ValueError(f"cotangent shape {tuple(cotangent.shape)} != output {tuple(out.shape)}")
        grads = torch.autograd.grad(
            out, list(params.values()), grad_outputs=cotangent.to(out.dtype), allow_unused=True
        )
    result: GradientSet = {}
    for (name, param), grad in zip(params.items(), grads):
        grad = torch.zeros_like(param) if grad is None else grad
        if not torch.all(torch.isfinite(grad)):
            raise RuntimeError(f"non-finite gradient in layer {name}")
        result[name] = grad
    return result


def save_checkpoint(net: ConditionalScoreNet, path: Path, extra: Optional[Dict] = None):
    """
    Write the network as a little-endian binary checkpoint.

    Layout: magic, uint32 version, uint32 header length, JSON header (config and
    optional extra metadata), uint32 tensor count, then per tensor: uint16 name
    length, name, uint8 ndim, uint32 dims, float32 data.
    """
    path = Path(path)
    header = json.dumps({"config": net.config.to_dict(), "extra": extra or {}}, sort_keys=True).encode()
    state = net.state_dict()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        f.write(header)
        f.write(struct.pack("<I", len(state)))
        for name, tensor in state.items():
            encoded = name.encode()
            data = tensor.detach().cpu().numpy().astype("<f4")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.tobytes())
    logger.debug(f"Saved checkpoint {path}")


def _read(f, size: int) -> bytes:
    chunk = f.read(size)
    if len(chunk) != size:
        raise CheckpointError("checkpoint file is truncated")
    return chunk


def read_checkpoint_header(path: Path) -> Dict:
    """Return the JSON header of a checkpoint without loading tensors."""
    with open(path, "rb") as f:
        return _read_header(f)


def _read_header(f) -> Dict:
    if _read(f, len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError("not a score-network checkpoint (bad magic bytes)")
    version, header_len = struct.unpack("<II", _read(f, 8))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} is not supported")
    try:
        return json.loads(_read(f, header_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupted checkpoint header: {e}")


def load_checkpoint(path: Path) -> ConditionalScoreNet:
    """
    Rebuild a network from a checkpoint written by save_checkpoint.

    Raises:
        FileNotFoundError: If the file does not exist
        CheckpointError: On bad magic, unsupported version or corruption
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        header = _read_header(f)
        config = ScoreNetConfig.from_dict(header["config"])
        (count,) = struct.unpack("<I", _read(f, 4))
        state = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read(f, 2))
            name = _read(f, name_len).decode()
            (ndim,) = struct.unpack("<B", _read(f, 1))
            shape = struct.unpack(f"<{ndim}I", _read(f, 4 * ndim))
            numel = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(_read(f, 4 * numel), dtype="<f4").reshape(shape)
            state[name] = torch.from_numpy(data.astype(np.float32))
        if f.read(1):
            raise CheckpointError("trailing bytes after checkpoint tensors")

    with torch.random.fork_rng(devices=[]):
        net = ConditionalScoreNet(config)
    try:
        net.load_state_dict(state)
    except RuntimeError as e:
        raise CheckpointError(f"checkpoint tensors do not match its config: {e}")
    net.eval()
    logger.info(f"Loaded checkpoint {path} ({net.parameter_count()} parameters)")
    return net
