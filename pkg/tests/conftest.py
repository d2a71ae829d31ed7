"""Shared fixtures: tiny networks for fast tests, trained models for slow ones."""

import numpy as np
import pytest
import torch

from scoread.data import BaseProcess, SynthSpec, TimeSeries, generate_synthetic_split
from scoread.scorenet import ScoreNetConfig, init_network
from scoread.sde import VPSchedule
from scoread.trainer import TrainConfig, train


@pytest.fixture
def schedule():
    return VPSchedule()


@pytest.fixture
def tiny_config():
    return ScoreNetConfig(
        omega=4, m=2, n_layer=2, n_resnet=1, channel_width=8, time_embed_dim=8, seed=0
    )


@pytest.fixture
def tiny_net(tiny_config):
    """Freshly initialized network; its output is exactly zero."""
    return init_network(tiny_config)


def randomize_output(net, seed: int = 1, scale: float = 0.05):
    """Give the zero-initialized output layer small random weights."""
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        weight = net.out_conv.weight
        weight.copy_(scale * torch.randn(weight.shape, generator=generator, dtype=weight.dtype))
    return net


@pytest.fixture
def random_net(tiny_config):
    return randomize_output(init_network(tiny_config))


@pytest.fixture
def small_series():
    rng = np.random.default_rng(0)
    values = rng.standard_normal((30, 2))
    labels = np.zeros(30, dtype=np.int64)
    labels[[10, 20, 21]] = 1
    return TimeSeries(values, labels, ("a", "b"))


# Network shape shared by the slow fixtures.
SLOW_NET = dict(n_layer=2, n_resnet=1, channel_width=16, time_embed_dim=16)


@pytest.fixture(scope="session")
def gaussian_model():
    """Narrow network trained on iid N(0, I) windows (omega=10, m=2)."""
    rng = np.random.default_rng(123)
    series = TimeSeries(rng.standard_normal((3000, 2)))
    net = init_network(ScoreNetConfig(omega=10, m=2, seed=7, **SLOW_NET))
    net, _ = train(
        net, series, TrainConfig(n_iter=2000, batch_size=64, learning_rate=2e-3, seed=11),
        VPSchedule(),
    )
    return net


@pytest.fixture(scope="session")
def ar1_model():
    """Network trained on clean AR(1) data, with the matching synthetic test split."""
    spec = SynthSpec(length=1000, dim=2, process=BaseProcess.AR1, phi=0.9,
                     magnitude=5.0, rate=0.05, seed=2024)
    train_series, test, test_clean = generate_synthetic_split(spec)
    scale = spec.process_std * 4
    # Fixed affine map to roughly [-1, 1] shared by every split.
    normalize = lambda s: TimeSeries(s.values / scale, s.labels, s.feature_names)
    net = init_network(ScoreNetConfig(omega=10, m=2, seed=3, **SLOW_NET))
    net, _ = train(
        net, normalize(train_series),
        TrainConfig(n_iter=3000, batch_size=64, learning_rate=2e-3, seed=5),
        VPSchedule(),
    )
    return net, normalize(train_series), normalize(test), normalize(test_clean)
