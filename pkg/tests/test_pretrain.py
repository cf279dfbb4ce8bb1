import math

import pytest
import torch
import torch.nn as nn

from diffinv.config import PretrainConfig
from diffinv.diffusion import (
    ConditionalDenoiser,
    EMA,
    denoising_loss,
    load_diffusion,
    make_schedule,
    pretrain,
    q_sample,
    save_diffusion,
)
from diffinv.diffusion.pretrain import load_ema_weights
from diffinv.errors import TrainingError
from diffinv.pseudo_label import PseudoLabeledDataset


def make_dataset(images, labels):
    return PseudoLabeledDataset(
        images=images,
        labels=torch.tensor(labels, dtype=torch.int64),
        source_indices=torch.arange(len(labels)),
        per_class={},
    )


class OracleDenoiser(nn.Module):
    """Recovers the exact noise when the clean image is all zeros.

    For x0 = 0, x_t = sqrt(1 - abar) eps, so eps = x_t / sqrt(1 - abar).
    """

    def __init__(self, schedule):
        super().__init__()
        self.schedule = schedule

    def forward(self, x, y, t):
        ab = self.schedule.alpha_bar_at(t).view(-1, 1, 1, 1)
        return x / (1.0 - ab).sqrt()


class ZeroDenoiser(nn.Module):
    def forward(self, x, y, t):
        return torch.zeros_like(x)


class NaNDenoiser(nn.Module):
    def __init__(self):
        super().__init__()
        self.w = nn.Parameter(torch.zeros(1))

    def forward(self, x, y, t):
        return torch.full_like(x, float("nan")) + self.w


class TestDenoisingLoss:
    def test_oracle_predictor_scores_zero(self):
        sched = make_schedule(100)
        gen = torch.Generator().manual_seed(0)
        x0 = torch.zeros(4, 3, 8, 8)
        y = torch.zeros(4, dtype=torch.int64)
        t = torch.tensor([10, 40, 70, 100])
        eps = torch.randn(x0.shape, generator=gen)
        loss = denoising_loss(OracleDenoiser(sched), sched, x0, y, t, eps)
        assert loss.item() == pytest.approx(0.0, abs=1e-8)

    def test_zero_predictor_scores_dimensionality(self):
        # ||eps||^2 summed over D pixels has mean D and variance 2D
        sched = make_schedule(100)
        gen = torch.Generator().manual_seed(1)
        m, d = 2000, 3 * 8 * 8
        x0 = torch.zeros(m, 3, 8, 8)
        y = torch.zeros(m, dtype=torch.int64)
        t = torch.full((m,), 100, dtype=torch.int64)
        eps = torch.randn(x0.shape, generator=gen)
        loss = denoising_loss(ZeroDenoiser(), sched, x0, y, t, eps)
        se = math.sqrt(2.0 * d / m)
        assert abs(loss.item() - d) < 3 * se

    def test_gradient_matches_central_differences(self):
        # tiny linear predictor in float64, loss checked coordinate-wise
        sched = make_schedule(10)

        class Linear(nn.Module):
            def __init__(self):
                super().__init__()
                self.w = nn.Parameter(torch.zeros(2, dtype=torch.float64))

            def forward(self, x, y, t):
                return self.w.view(1, 2, 1, 1) * x

        gen = torch.Generator().manual_seed(2)
        x0 = torch.randn(3, 2, 2, 2, generator=gen, dtype=torch.float64)
        y = torch.zeros(3, dtype=torch.int64)
        t = torch.tensor([2, 5, 9])
        eps = torch.randn(x0.shape, generator=gen, dtype=torch.float64)
        sched64 = make_schedule(10)
        object.__setattr__(sched64, "alpha_bar", sched64.alpha_bar.double())

        model = Linear()
        model.w.data = torch.tensor([0.3, -0.7], dtype=torch.float64)
        loss = denoising_loss(model, sched64, x0, y, t, eps)
        loss.backward()
        analytic = model.w.grad.clone()

        h = 1e-6
        fd = torch.zeros(2, dtype=torch.float64)
        for i in range(2):
            for sign in (1, -1):
                m2 = Linear()
                m2.w.data = model.w.data.clone()
                m2.w.data[i] += sign * h
                with torch.no_grad():
                    val = denoising_loss(m2, sched64, x0, y, t, eps).item()
                fd[i] += sign * val
        fd /= 2 * h
        assert torch.allclose(analytic, fd, rtol=1e-3)


class TestEMA:
    def test_warmup_rate_hand_computed(self):
        model = nn.Linear(1, 1, bias=False)
        with torch.no_grad():
            model.weight.fill_(0.0)
        ema = EMA(model, rate=0.9999, warmup=True)
        with torch.no_grad():
            model.weight.fill_(1.0)
        ema.update(model)
        # first update: rate = min(0.9999, 2/11)
        r = 2.0 / 11.0
        assert ema.shadow["weight"].item() == pytest.approx((1 - r) * 1.0)

    def test_no_warmup_uses_flat_rate(self):
        model = nn.Linear(1, 1, bias=False)
        with torch.no_grad():
            model.weight.fill_(0.0)
        ema = EMA(model, rate=0.5, warmup=False)
        with torch.no_grad():
            model.weight.fill_(2.0)
        ema.update(model)
        assert ema.shadow["weight"].item() == pytest.approx(1.0)
        ema.update(model)
        assert ema.shadow["weight"].item() == pytest.approx(1.5)

    def test_load_ema_weights_copies(self):
        model = ConditionalDenoiser(num_classes=2, image_size=8, base_width=16)
        ema = EMA(model, rate=0.5, warmup=False)
        with torch.no_grad():
            for p in model.parameters():
                p.add_(1.0)
        averaged = load_ema_weights(model, ema.state_dict())
        for (name, p_avg), p_raw in zip(
            averaged.named_parameters(), model.parameters()
        ):
            assert torch.equal(p_avg, ema.shadow[name])
            assert not torch.equal(p_avg, p_raw)


@pytest.fixture(scope="module")
def tiny_run():
    torch.manual_seed(3)
    model = ConditionalDenoiser(num_classes=2, image_size=8, base_width=16)
    sched = make_schedule(20)
    gen = torch.Generator().manual_seed(4)
    images = torch.rand(8, 3, 8, 8, generator=gen) * 2 - 1
    data = make_dataset(images, [0, 1] * 4)
    config = PretrainConfig(steps=40, batch_size=4, lr=1e-3, val_every=10, log_every=10)
    model, ema_state, history = pretrain(model, sched, data, config, seed=5)
    return model, ema_state, history, sched, data


class TestPretrain:
    def test_history_structure(self, tiny_run):
        _, _, history, _, _ = tiny_run
        assert history["steps"] == 40
        assert history["val"][0]["step"] == 0
        assert history["train"][-1]["step"] == 40
        assert all(math.isfinite(e["loss"]) for e in history["train"])

    def test_validation_loss_decreases(self, tiny_run):
        _, _, history, _, _ = tiny_run
        assert history["val"][-1]["loss"] < history["val"][0]["loss"]

    def test_label_dropout_fraction(self):
        torch.manual_seed(6)
        model = ConditionalDenoiser(num_classes=2, image_size=8, base_width=16)
        sched = make_schedule(10)
        data = make_dataset(torch.zeros(4, 3, 8, 8), [0, 1, 0, 1])
        config = PretrainConfig(
            steps=60, batch_size=10, lr=1e-4, label_dropout=0.1, val_every=60, log_every=60
        )
        _, _, history = pretrain(model, sched, data, config, seed=7)
        n = history["label_count"]
        se = math.sqrt(0.1 * 0.9 / n)
        assert abs(history["null_fraction"] - 0.1) < 3 * se

    def test_ema_differs_from_raw_after_training(self, tiny_run):
        model, ema_state, _, _, _ = tiny_run
        raw = dict(model.named_parameters())
        assert any(
            not torch.equal(ema_state[name], raw[name].detach()) for name in ema_state
        )

    def test_non_finite_loss_aborts(self):
        sched = make_schedule(10)
        data = make_dataset(torch.zeros(2, 3, 8, 8), [0, 0])
        config = PretrainConfig(steps=5, batch_size=2, val_every=100, log_every=100)
        model = NaNDenoiser()
        with pytest.raises(TrainingError, match="non-finite"):
            pretrain(model, sched, data, config, seed=8)

    def test_empty_dataset_rejected(self):
        sched = make_schedule(10)
        data = make_dataset(torch.zeros(0, 3, 8, 8), [])
        with pytest.raises(TrainingError, match="empty"):
            pretrain(NaNDenoiser(), sched, data, PretrainConfig(), seed=0)

    def test_deterministic_rerun(self):
        def run():
            torch.manual_seed(9)
            model = ConditionalDenoiser(num_classes=2, image_size=8, base_width=16)
            sched = make_schedule(10)
            gen = torch.Generator().manual_seed(10)
            data = make_dataset(torch.rand(4, 3, 8, 8, generator=gen), [0, 1, 0, 1])
            config = PretrainConfig(steps=10, batch_size=2, val_every=5, log_every=5)
            model, _, history = pretrain(model, sched, data, config, seed=11)
            return model, history

        m1, h1 = run()
        m2, h2 = run()
        assert h1 == h2
        for p1, p2 in zip(m1.parameters(), m2.parameters()):
            assert torch.equal(p1, p2)


class TestSaveLoad:
    def test_round_trip(self, tiny_run, tmp_path):
        model, ema_state, _, sched, _ = tiny_run
        path = tmp_path / "prior.pt"
        save_diffusion(path, model, ema_state, sched, extra_meta={"stage": "pretrain"})
        loaded, ema2, sched2, meta = load_diffusion(path)
        assert meta["num_classes"] == 2
        assert meta["stage"] == "pretrain"
        assert sched2.T == sched.T
        for p1, p2 in zip(model.parameters(), loaded.parameters()):
            assert torch.equal(p1, p2)
        for name in ema_state:
            assert torch.equal(ema_state[name], ema2[name])

    def test_loaded_model_same_outputs(self, tiny_run, tmp_path):
        model, ema_state, _, sched, _ = tiny_run
        path = tmp_path / "prior.pt"
        save_diffusion(path, model, ema_state, sched)
        loaded, _, _, _ = load_diffusion(path)
        x = torch.randn(1, 3, 8, 8)
        assert torch.equal(model(x, 0, 5), loaded(x, 0, 5))
