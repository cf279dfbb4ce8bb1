import csv
import math

import pytest
import torch
import torch.nn as nn

from diffinv.config import AttackConfig, PgdConfig
from diffinv.determinism import generator
from diffinv.diffusion import ConditionalDenoiser, make_schedule
from diffinv.errors import ConfigError, NumericalError
from diffinv.losses import CentroidTable, LossConfig, cross_entropy
from diffinv.reconstruct import (
    compare_iir_vs_sampling,
    iir_attack,
    loss_config_from,
    make_time_schedule,
    pgd_refine,
    post_denoise,
    reconstruct_classes,
    write_trace_csv,
)


class ZeroDenoiser(nn.Module):
    def __init__(self, image_size=4):
        super().__init__()
        self.image_size = image_size

    def forward(self, x, y, t):
        return torch.zeros_like(x)


class PullToConstant(nn.Module):
    """Stub whose noise estimate makes predict_x0 return the constant c."""

    def __init__(self, schedule, c, image_size=4):
        super().__init__()
        self.schedule = schedule
        self.c = c
        self.image_size = image_size

    def forward(self, x, y, t):
        ab = self.schedule.alpha_bar_at(t).view(-1, 1, 1, 1)
        return (x - ab.sqrt() * self.c) / (1.0 - ab).sqrt()


class StubHandle:
    """Classifier stand-in: features are flattened pixels, head is pluggable."""

    def __init__(self, head_fn, num_classes):
        self.model = nn.Identity()
        self.num_classes = num_classes
        self._head = head_fn

    def features(self, x):
        return x.flatten(1)

    @property
    def head(self):
        return self._head

    def logits(self, x):
        return self._head(self.features(x))


def zero_head(num_classes):
    return lambda f: f.new_zeros(f.shape[0], num_classes) + 0.0 * f.sum(1, keepdim=True)


def linear_head(weight):
    return lambda f: f @ weight.t()


def nan_head(num_classes):
    return lambda f: f.new_full((f.shape[0], num_classes), float("nan"))


class TestTimeSchedule:
    def test_three_point_descent(self):
        sched = make_time_schedule(3, 1000, 200, 0, seed=0, T=1000)
        assert sched.times == [1000, 600, 200]

    def test_single_point(self):
        assert make_time_schedule(1, 1000, 200, 0, seed=0, T=1000).times == [1000]

    def test_empty(self):
        assert make_time_schedule(0, 1000, 200, 0, seed=0, T=1000).times == []

    def test_jitter_bounded_and_clamped(self):
        sched = make_time_schedule(50, 1000, 200, 50, seed=1, T=1000)
        base = torch.linspace(1000, 200, 50).round().to(torch.int64).tolist()
        for t, b in zip(sched.times, base):
            assert abs(t - b) <= 50
            assert 1 <= t <= 1000

    def test_jitter_deterministic_per_seed(self):
        a = make_time_schedule(20, 1000, 200, 50, seed=2, T=1000)
        b = make_time_schedule(20, 1000, 200, 50, seed=2, T=1000)
        c = make_time_schedule(20, 1000, 200, 50, seed=3, T=1000)
        assert a.times == b.times
        assert a.times != c.times

    def test_clamps_to_schedule_range(self):
        sched = make_time_schedule(5, 4, 1, 3, seed=4, T=4)
        assert all(1 <= t <= 4 for t in sched.times)

    @pytest.mark.parametrize(
        "args",
        [
            dict(n=3, t_hi=1000, t_lo=0, jitter=0),
            dict(n=3, t_hi=100, t_lo=200, jitter=0),
            dict(n=3, t_hi=2000, t_lo=200, jitter=0),
            dict(n=3, t_hi=1000, t_lo=200, jitter=-1),
            dict(n=-1, t_hi=1000, t_lo=200, jitter=0),
        ],
    )
    def test_invalid_arguments(self, args):
        with pytest.raises(ConfigError):
            make_time_schedule(seed=0, T=1000, **args)


def toy_attack(**overrides):
    base = dict(
        iterations=5, guidance_scale=1.0, lr=0.05, t_hi=5, t_lo=5, t_jitter=0,
        images_per_class=2, loss="combined", top_k=1, alpha=1.0,
        prior_weight=0.0, cls_weight=1.0, denoise_t=3, sampler_steps=3,
        pgd=PgdConfig(step_size=0.05, epsilon=0.5, iterations=3),
    )
    base.update(overrides)
    return AttackConfig(**base)


class TestIIR:
    def test_zero_iterations_returns_clamped_init(self):
        sched = make_schedule(10)
        attack = toy_attack()
        handle = StubHandle(zero_head(3), 3)
        empty = make_time_schedule(0, 5, 5, 0, seed=0, T=10)
        res = iir_attack(
            ZeroDenoiser(), sched, handle, 1, 2,
            loss_config_from(attack), None, empty, attack, seed=21,
        )
        gen = generator(21, "iir-1")
        expect = torch.randn(2, 3, 4, 4, generator=gen).clamp_(-1.0, 1.0)
        assert torch.equal(res.images, expect)
        assert res.total_trace == []
        assert res.predicted is not None

    def test_convex_toy_converges_to_centroid(self):
        # zero logits kill the margin term, so the combined loss reduces to
        # the squared feature distance; flatten features make that a convex
        # quadratic in the pixels with minimum at the centroid
        sched = make_schedule(10)
        c = 0.3
        table = CentroidTable(
            centroids=torch.full((3, 48), c), counts=torch.ones(3, dtype=torch.int64)
        )
        attack = toy_attack(iterations=300)
        handle = StubHandle(zero_head(3), 3)
        times = make_time_schedule(300, 5, 5, 0, seed=0, T=10)
        res = iir_attack(
            ZeroDenoiser(), sched, handle, 1, 2,
            loss_config_from(attack), table, times, attack, seed=22,
        )
        assert res.cls_trace[-1] < 1e-2
        assert res.cls_trace[-1] < res.cls_trace[0] * 1e-2
        assert (res.images - c).abs().max().item() < 0.05

    def test_loss_decreases_on_toy(self):
        sched = make_schedule(10)
        table = CentroidTable(
            centroids=torch.zeros(3, 48), counts=torch.ones(3, dtype=torch.int64)
        )
        attack = toy_attack(iterations=30)
        handle = StubHandle(zero_head(3), 3)
        times = make_time_schedule(30, 5, 5, 0, seed=0, T=10)
        res = iir_attack(
            ZeroDenoiser(), sched, handle, 0, 2,
            loss_config_from(attack), table, times, attack, seed=23,
        )
        assert res.total_trace[-1] < res.total_trace[0]

    def test_non_finite_raises(self, caplog):
        sched = make_schedule(10)
        attack = toy_attack(loss="ce")
        handle = StubHandle(nan_head(3), 3)
        times = make_time_schedule(3, 5, 5, 0, seed=0, T=10)
        with caplog.at_level("ERROR"):
            with pytest.raises(NumericalError, match="non-finite"):
                iir_attack(
                    ZeroDenoiser(), sched, handle, 0, 2,
                    loss_config_from(attack), None, times, attack, seed=24,
                )
        assert any("diverged" in r.message for r in caplog.records)

    def test_deterministic_rerun(self):
        torch.manual_seed(25)
        model = ConditionalDenoiser(num_classes=3, image_size=8, base_width=16)
        sched = make_schedule(20)
        gen = torch.Generator().manual_seed(26)
        weight = torch.randn(3, 192, generator=gen)
        handle = StubHandle(linear_head(weight), 3)
        attack = toy_attack(loss="ce", guidance_scale=3.0, prior_weight=1.0, lr=0.5)
        times = make_time_schedule(8, 15, 5, 2, seed=27, T=20)

        def run():
            return iir_attack(
                model, sched, handle, 2, 2,
                loss_config_from(attack), None, times, attack, seed=28,
            )

        a, b = run(), run()
        assert torch.equal(a.images, b.images)
        assert a.total_trace == b.total_trace

    def test_images_stay_in_range(self):
        sched = make_schedule(10)
        handle = StubHandle(zero_head(3), 3)
        attack = toy_attack(iterations=10, prior_weight=1.0)
        table = CentroidTable(
            centroids=torch.full((3, 48), 5.0), counts=torch.ones(3, dtype=torch.int64)
        )
        times = make_time_schedule(10, 5, 5, 0, seed=0, T=10)
        res = iir_attack(
            ZeroDenoiser(), sched, handle, 0, 2,
            loss_config_from(attack), table, times, attack, seed=29,
        )
        assert res.images.min().item() >= -1.0
        assert res.images.max().item() <= 1.0


class TestPostDenoise:
    def test_oracle_pulls_to_constant(self):
        sched = make_schedule(50)
        model = PullToConstant(sched, 0.4)
        x0 = torch.rand(2, 3, 4, 4) * 2 - 1
        out = post_denoise(
            model, sched, x0, 1, t_dn=20, steps=5,
            gen=torch.Generator().manual_seed(30),
        )
        assert torch.allclose(out, torch.full_like(out, 0.4), atol=1e-4)

    def test_deterministic_given_seed(self):
        torch.manual_seed(31)
        model = ConditionalDenoiser(num_classes=2, image_size=8, base_width=16)
        sched = make_schedule(50)
        x0 = torch.zeros(1, 3, 8, 8)
        a = post_denoise(model, sched, x0, 0, 20, steps=4,
                         gen=torch.Generator().manual_seed(32))
        b = post_denoise(model, sched, x0, 0, 20, steps=4,
                         gen=torch.Generator().manual_seed(32))
        assert torch.equal(a, b)

    def test_output_in_range(self):
        sched = make_schedule(50)
        out = post_denoise(
            ZeroDenoiser(), sched, torch.zeros(1, 3, 4, 4), 0, 10,
            gen=torch.Generator().manual_seed(33),
        )
        assert out.abs().max().item() <= 1.0

    def test_steps_capped_by_timestep(self):
        sched = make_schedule(50)
        out = post_denoise(
            ZeroDenoiser(), sched, torch.zeros(2, 3, 4, 4), 0, t_dn=1, steps=10,
            gen=torch.Generator().manual_seed(34),
        )
        assert out.shape == (2, 3, 4, 4)

    @pytest.mark.parametrize("t_dn", [0, 51])
    def test_timestep_guard(self, t_dn):
        sched = make_schedule(50)
        with pytest.raises(ConfigError, match="denoise timestep"):
            post_denoise(ZeroDenoiser(), sched, torch.zeros(1, 3, 4, 4), 0, t_dn)


class TestPGD:
    def test_zero_gradient_fixed_point(self):
        handle = StubHandle(zero_head(3), 3)
        x0 = torch.rand(2, 3, 4, 4)
        out = pgd_refine(handle, x0, 1, PgdConfig(step_size=0.1, epsilon=0.5, iterations=10))
        assert torch.equal(out, x0)

    def test_norm_bounded_every_iteration(self):
        gen = torch.Generator().manual_seed(35)
        weight = torch.randn(3, 48, generator=gen)
        seen = []
        x0 = torch.rand(2, 3, 4, 4, generator=gen)

        class Recorder(StubHandle):
            def logits(self, x):
                seen.append((x - x0).detach().flatten(1).norm(dim=1))
                return super().logits(x)

        handle = Recorder(linear_head(weight), 3)
        eps = 0.3
        out = pgd_refine(
            handle, x0, 0, PgdConfig(step_size=10.0, epsilon=eps, iterations=8)
        )
        assert len(seen) == 8
        for norms in seen:
            assert (norms <= eps + 1e-5).all()
        assert ((out - x0).flatten(1).norm(dim=1) <= eps + 1e-5).all()

    def test_projection_binds_with_large_steps(self):
        gen = torch.Generator().manual_seed(36)
        weight = torch.randn(3, 48, generator=gen)
        handle = StubHandle(linear_head(weight), 3)
        x0 = torch.zeros(1, 3, 4, 4)
        eps = 0.25
        out = pgd_refine(
            handle, x0, 0, PgdConfig(step_size=100.0, epsilon=eps, iterations=5)
        )
        assert (out - x0).flatten(1).norm(dim=1).item() == pytest.approx(eps, rel=1e-4)

    def test_cross_entropy_decreases_on_linear_models(self):
        gen = torch.Generator().manual_seed(37)
        for trial in range(10):
            weight = torch.randn(4, 48, generator=gen)
            handle = StubHandle(linear_head(weight), 4)
            x0 = torch.rand(3, 3, 4, 4, generator=gen) * 2 - 1
            y = int(torch.randint(0, 4, (1,), generator=gen))
            before = cross_entropy(
                handle.logits(x0), torch.full((3,), y, dtype=torch.int64)
            ).mean()
            out = pgd_refine(
                handle, x0, y, PgdConfig(step_size=0.02, epsilon=5.0, iterations=10)
            )
            after = cross_entropy(
                handle.logits(out), torch.full((3,), y, dtype=torch.int64)
            ).mean()
            assert after.item() < before.item(), f"trial {trial}"

    def test_zero_iterations_identity(self):
        handle = StubHandle(zero_head(2), 2)
        x0 = torch.rand(1, 3, 4, 4)
        out = pgd_refine(handle, x0, 0, PgdConfig(step_size=0.1, epsilon=0.5, iterations=0))
        assert torch.equal(out, x0)

    @pytest.mark.parametrize(
        "cfg",
        [
            dict(step_size=0.0, epsilon=0.5, iterations=1),
            dict(step_size=0.1, epsilon=0.0, iterations=1),
            dict(step_size=0.1, epsilon=0.5, iterations=-1),
        ],
    )
    def test_invalid_config(self, cfg):
        handle = StubHandle(zero_head(2), 2)
        with pytest.raises(ConfigError, match="PGD"):
            pgd_refine(handle, torch.zeros(1, 3, 4, 4), 0, PgdConfig(**cfg))


class TestFullAttack:
    def setup_method(self):
        torch.manual_seed(38)
        self.model = ConditionalDenoiser(num_classes=3, image_size=8, base_width=16)
        self.sched = make_schedule(20)
        gen = torch.Generator().manual_seed(39)
        self.handle = StubHandle(linear_head(torch.randn(3, 192, generator=gen)), 3)
        self.attack = toy_attack(
            iterations=3, loss="ce", t_hi=15, t_lo=5, t_jitter=3, prior_weight=1.0,
            denoise_t=4, sampler_steps=2,
            pgd=PgdConfig(step_size=0.05, epsilon=0.3, iterations=2),
        )

    def test_per_class_results(self):
        results = reconstruct_classes(
            self.model, self.sched, self.handle, [0, 2], self.attack,
            None, seed=40,
        )
        assert [r.label for r in results] == [0, 2]
        for res in results:
            assert res.images.shape == (2, 3, 8, 8)
            assert res.images.abs().max().item() <= 1.0
            assert len(res.total_trace) == 3
            assert res.predicted.shape == (2,)
        assert results[0].times != results[1].times

    def test_combined_needs_table(self):
        attack = toy_attack(loss="combined")
        with pytest.raises(ConfigError, match="centroid"):
            reconstruct_classes(
                self.model, self.sched, self.handle, [0], attack, None, seed=41
            )

    def test_trace_csv(self, tmp_path):
        results = reconstruct_classes(
            self.model, self.sched, self.handle, [0, 1], self.attack,
            None, seed=42, use_pgd=False, use_denoise=False,
        )
        path = tmp_path / "traces.csv"
        write_trace_csv(results, path)
        with open(path) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["class", "iteration", "timestep", "prior", "cls", "total"]
        assert len(rows) == 1 + 2 * 3
        assert rows[1][0] == "1"
        for row in rows[1:]:
            assert all(math.isfinite(float(v)) for v in row[3:])

    def test_compare_harness_keys(self):
        out = compare_iir_vs_sampling(
            self.model, self.sched, self.handle, [0, 1], self.attack, None, seed=43
        )
        assert set(out) == {"iir_cls", "plain_cls", "per_class"}
        assert len(out["per_class"]["iir"]) == 2
        assert len(out["per_class"]["plain"]) == 2
        assert math.isfinite(out["iir_cls"])
        assert math.isfinite(out["plain_cls"])


class TestLossConfigFrom:
    def test_aliases(self):
        assert loss_config_from(toy_attack(loss="cross_entropy")).family == "ce"
        assert loss_config_from(toy_attack(loss="poincare")).family == "poincare"

    def test_parameters_carried(self):
        cfg = loss_config_from(toy_attack(loss="top_k", top_k=7, top_k_aggregate="sum"))
        assert cfg.k == 7
        assert cfg.aggregate == "sum"

    def test_unknown_rejected(self):
        with pytest.raises(ConfigError, match="unknown attack loss"):
            loss_config_from(toy_attack(loss="hinge"))
