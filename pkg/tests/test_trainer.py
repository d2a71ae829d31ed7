"""Tests for the denoising score-matching losses and the training loop."""

import numpy as np
import pytest
import torch

from scoread.data import TimeSeries, Window
from scoread.scorenet import init_network
from scoread.trainer import (
    LOSS_COLUMNS,
    ScoreTrainer,
    TrainConfig,
    TrainingError,
    global_grad_norm,
    loss_l1,
    loss_l2,
    train,
    weight_lambda,
    weighted_losses,
    write_loss_history,
)
from scoread.workspace import read_csv_header, read_results_csv


def make_series(length=40, seed=0):
    return TimeSeries(np.random.default_rng(seed).standard_normal((length, 2)))


def test_lambda_is_kernel_variance(schedule):
    for l in (0.01, 0.5, 1.0):
        assert weight_lambda(schedule, l) == pytest.approx(schedule.transition_moments(l).std ** 2)


def test_losses_of_zero_network(tiny_net, schedule):
    """With S = 0 both losses equal mean(noise^2) / std^2."""
    generator = torch.Generator().manual_seed(0)
    window = Window(np.random.default_rng(0).standard_normal((5, 2)), end_index=5)
    noise = torch.randn(5, 2, generator=generator)
    l = 0.4
    expected = float((noise.double() ** 2).mean()) / schedule.transition_moments(l).std ** 2
    assert float(loss_l1(tiny_net, schedule, window, l, noise)) == pytest.approx(expected, rel=1e-5)
    assert float(loss_l2(tiny_net, schedule, window, l, noise)) == pytest.approx(expected, rel=1e-5)


def test_weighted_losses_equal_lambda_times_raw(random_net, schedule):
    generator = torch.Generator().manual_seed(1)
    targets = torch.randn(3, 5, 2, generator=generator)
    noise = torch.randn(3, 5, 2, generator=generator)
    l = torch.tensor([0.2, 0.5, 0.8], dtype=torch.float64)
    l1_w, l2_w = weighted_losses(random_net, schedule, targets, l, noise)
    assert l1_w.shape == l2_w.shape == (3,)
    for i in range(3):
        lam = weight_lambda(schedule, float(l[i]))
        raw1 = float(loss_l1(random_net, schedule, targets[i], float(l[i]), noise[i]))
        raw2 = float(loss_l2(random_net, schedule, targets[i], float(l[i]), noise[i]))
        assert float(l1_w[i]) == pytest.approx(lam * raw1, rel=1e-4)
        assert float(l2_w[i]) == pytest.approx(lam * raw2, rel=1e-4)


def test_losses_reject_times_below_t_eps(tiny_net, schedule):
    window = np.zeros((5, 2))
    with pytest.raises(ValueError):
        loss_l1(tiny_net, schedule, window, 0.0, np.zeros((5, 2)))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0).validate()
    with pytest.raises(ValueError):
        TrainConfig(lambda_mode="likelihood").validate()
    TrainConfig(n_iter=0).validate()


def test_zero_iterations_leaves_network_untouched(tiny_config, schedule):
    net = init_network(tiny_config)
    before = {k: v.clone() for k, v in net.state_dict().items()}
    net, history = train(net, make_series(), TrainConfig(n_iter=0), schedule)
    assert history == []
    for name, value in net.state_dict().items():
        assert torch.equal(value, before[name])


def test_training_is_deterministic(tiny_config, schedule):
    config = TrainConfig(n_iter=10, batch_size=8, learning_rate=1e-3, seed=3)
    net_a, hist_a = train(init_network(tiny_config), make_series(), config, schedule)
    net_b, hist_b = train(init_network(tiny_config), make_series(), config, schedule)
    assert len(hist_a) == 10
    assert [r.total for r in hist_a] == [r.total for r in hist_b]
    for (name, a), b in zip(net_a.state_dict().items(), net_b.state_dict().values()):
        assert torch.equal(a, b), name
    assert all(np.isfinite(r.total) for r in hist_a)
    assert [r.iteration for r in hist_a] == list(range(1, 11))


def test_training_reduces_loss(tiny_config, schedule):
    config = TrainConfig(n_iter=300, batch_size=32, learning_rate=3e-3, seed=0, log_every=1000)
    _, history = train(init_network(tiny_config), make_series(200), config, schedule)
    first = np.mean([r.total for r in history[:30]])
    last = np.mean([r.total for r in history[-30:]])
    assert last < first


def test_periodic_checkpoints(tmp_path, tiny_config, schedule):
    seen = []
    config = TrainConfig(n_iter=4, batch_size=4, checkpoint_every=2)
    train(init_network(tiny_config), make_series(), config, schedule,
          checkpoint_dir=tmp_path, on_checkpoint=lambda it, path: seen.append(it))
    assert sorted(p.name for p in tmp_path.iterdir()) == ["ckpt_000002.bin", "ckpt_000004.bin"]
    assert seen == [2, 4]


def test_non_finite_loss_aborts_with_iteration(tiny_net, schedule):
    with torch.no_grad():
        tiny_net.out_conv.bias.fill_(float("nan"))
    trainer = ScoreTrainer(tiny_net, schedule, TrainConfig(batch_size=4))
    with pytest.raises(TrainingError, match="iteration 1"):
        trainer.train_step(torch.zeros(4, 5, 2))


def test_empty_batch(tiny_net, schedule):
    trainer = ScoreTrainer(tiny_net, schedule, TrainConfig())
    with pytest.raises(ValueError):
        trainer.train_step(torch.zeros(0, 5, 2))


def test_loss_history_file(tmp_path, tiny_config, schedule):
    _, history = train(init_network(tiny_config), make_series(),
                       TrainConfig(n_iter=5, batch_size=4), schedule)
    path = tmp_path / "losses.csv"
    write_loss_history(path, history, ["config_hash=abc", "seed=0"])
    frame = read_results_csv(path)
    assert list(frame.columns) == LOSS_COLUMNS
    assert len(frame) == 5
    assert read_csv_header(path) == {"config_hash": "abc", "seed": "0"}


def test_post_clip_norm_is_bounded(random_net, schedule):
    batch = torch.randn(4, 5, 2, generator=torch.Generator().manual_seed(0))
    trainer = ScoreTrainer(random_net, schedule, TrainConfig(batch_size=4, grad_clip_norm=1e-4))
    report = trainer.train_step(batch)
    assert report.grad_norm_preclip > 1e-4
    assert report.grad_norm <= 1e-4 * (1 + 1e-5)
    assert report.grad_norm == pytest.approx(global_grad_norm(random_net))


def test_unclipped_step_keeps_norm(random_net, schedule):
    batch = torch.randn(4, 5, 2, generator=torch.Generator().manual_seed(0))
    trainer = ScoreTrainer(random_net, schedule, TrainConfig(batch_size=4, grad_clip_norm=1e9))
    report = trainer.train_step(batch)
    assert report.grad_norm == pytest.approx(report.grad_norm_preclip, rel=1e-5)


class NanCondition(torch.nn.Module):
    """Replaces any condition tensor handed to the wrapped network with NaNs."""

    def __init__(self, net):
        super().__init__()
        self.net = net

    def forward(self, x, condition, l):
        if condition is not None:
            condition = torch.full_like(condition, float("nan"))
        return self.net(x, condition, l)


def test_loss_l2_never_reads_the_condition_channel(random_net, schedule):
    window = Window(np.random.default_rng(2).standard_normal((5, 2)), end_index=5)
    noise = torch.randn(5, 2, generator=torch.Generator().manual_seed(2))
    poisoned = NanCondition(random_net)
    clean = float(loss_l2(random_net, schedule, window, 0.3, noise))
    assert float(loss_l2(poisoned, schedule, window, 0.3, noise)) == clean
    assert np.isnan(float(loss_l1(poisoned, schedule, window, 0.3, noise)))
