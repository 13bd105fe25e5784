import copy

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from animal2vec import DivergenceError, StateError
from animal2vec.augment import MixConfig
from animal2vec.masking import MaskConfig
from animal2vec.network import Encoder, NetworkConfig
from animal2vec.pretrain import (DistillBatch, EmaConfig, OptimConfig, PretrainConfig, Pretrainer,
                                 build_optimizer, clip_and_norm, collapse_monitor, cosine_lr,
                                 derive_seed, ema_update, instance_norm_time, masked_mse, set_lr,
                                 tau_schedule, teacher_targets)
from gradcheck import fd_relative_error
from tiny import tiny_model


def tiny_config(**kw):
    base = dict(ema=EmaConfig(0.99, 0.999, 10),
                optim=OptimConfig(lr_peak=1e-3, warmup_steps=2, total_steps=20),
                mask=MaskConfig(0.2, 2, 3), bcl=MixConfig(0.5, 0.0, 1.0, 0.05),
                batch_size=2, crop_s=0.1, seed=0)
    base.update(kw)
    return PretrainConfig(**base)


def waves(n=4, seconds=0.2, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.standard_normal(int(8000 * seconds)) * 0.1 for _ in range(n)]


class TestEma:
    def test_tau_one_and_zero(self):
        t = {"w": torch.ones(3, dtype=torch.float64)}
        s = {"w": torch.full((3,), 5.0, dtype=torch.float64)}
        ema_update(t, s, 1.0)
        assert torch.all(t["w"] == 1)
        ema_update(t, s, 0.0)
        assert torch.all(t["w"] == 5)

    def test_closed_form(self):
        rng = np.random.default_rng(0)
        t0 = torch.tensor(rng.standard_normal(50))
        s = {"w": torch.tensor(rng.standard_normal(50))}
        t = {"w": t0.clone()}
        tau = 0.999
        for _ in range(100):
            ema_update(t, s, tau)
        want = tau ** 100 * t0 + (1 - tau ** 100) * s["w"]
        assert (t["w"] - want).abs().max().item() < 1e-10

    def test_structure_mismatch(self):
        with pytest.raises(StateError):
            ema_update({"a": torch.zeros(2)}, {"b": torch.zeros(2)}, 0.5)
        with pytest.raises(StateError):
            ema_update({"a": torch.zeros(2)}, {"a": torch.zeros(3)}, 0.5)

    def test_bad_tau(self):
        with pytest.raises(ValueError):
            ema_update({}, {}, 1.5)

    def test_modules(self):
        cfg = NetworkConfig(in_dim=4, layers=1, heads=2, embed_dim=4, pos_conv_kernel=3,
                            pos_conv_groups=2)
        a, b = Encoder(cfg), Encoder(cfg)
        ema_update(a, b, 0.0)
        for (_, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
            assert torch.equal(p, q)


class TestSchedules:
    def test_tau(self):
        cfg = EmaConfig(0.99, 0.999, 100)
        assert tau_schedule(0, cfg) == 0.99
        assert tau_schedule(100, cfg) == 0.999
        assert tau_schedule(500, cfg) == 0.999
        assert tau_schedule(50, cfg) == pytest.approx(0.9945)

    def test_tau_order(self):
        with pytest.raises(ValueError):
            EmaConfig(0.9, 0.8)

    def test_cosine(self):
        cfg = OptimConfig(lr_peak=1e-4, warmup_steps=10_000, total_steps=50_000)
        assert cosine_lr(0, cfg) == 0
        assert cosine_lr(10_000, cfg) == 1e-4
        assert cosine_lr(30_000, cfg) == pytest.approx(5e-5)
        assert cosine_lr(50_000, cfg) == pytest.approx(0, abs=1e-20)
        assert cosine_lr(50_001, cfg) == 0

    def test_warmup_bound(self):
        with pytest.raises(ValueError):
            OptimConfig(warmup_steps=10, total_steps=5)

    def test_derive_seed(self):
        assert derive_seed(1, "a", 2) == derive_seed(1, "a", 2)
        assert derive_seed(1, "a", 2) != derive_seed(1, "a", 3)
        assert 0 <= derive_seed("x") < 2 ** 63


class TestTargets:
    def test_constant_in_time(self):
        x = torch.ones(1, 10, 4, dtype=torch.float64) * 3
        assert instance_norm_time(x).abs().max() < 1e-6

    def test_two_layer_oracle(self):
        cfg = NetworkConfig(in_dim=3, layers=2, heads=1, embed_dim=4, ffn_dim=8, dropout=0.0,
                            pos_conv_kernel=3, pos_conv_groups=1)
        torch.manual_seed(0)
        enc = Encoder(cfg).double()
        feats = torch.randn(1, 7, 3, dtype=torch.float64)
        out = enc.eval()(feats)
        want = []
        for layer in out.per_layer:
            y = layer[0].detach().numpy()
            mu = y.mean(axis=0)
            var = y.var(axis=0)
            want.append((y - mu) / np.sqrt(var + 1e-5))
        got = teacher_targets(feats, enc)[0].numpy()
        assert np.allclose(got, np.mean(want, axis=0), atol=1e-10)
        top1 = teacher_targets(feats, enc, top_k=1)[0].numpy()
        assert np.allclose(top1, want[-1], atol=1e-10)

    def test_collapse_monitor(self):
        assert collapse_monitor(torch.ones(2, 5, 3)) == 0.0
        g = torch.Generator().manual_seed(0)
        assert collapse_monitor(torch.randn(4, 5000, 8, generator=g)) == pytest.approx(1, abs=0.02)
        assert collapse_monitor([np.ones((3, 2)), np.zeros((3, 2))]) > 0


class TestOptimizer:
    def test_groups(self):
        model = tiny_model()
        opt = build_optimizer({"f": model.frontend, "e": model.encoder},
                              OptimConfig(sinc_lr_scale=100.0))
        decay, no_decay, sinc = opt.param_groups
        assert all(p.dim() >= 2 for p in decay["params"])
        ids = {id(p) for p in no_decay["params"]}
        assert id(model.frontend.sinc_act.alpha) in ids
        assert {id(p) for p in sinc["params"]} == {id(model.frontend.sinc.f_low),
                                                   id(model.frontend.sinc.bandwidth)}
        set_lr(opt, 1e-3)
        assert sinc["lr"] == pytest.approx(0.1) and decay["lr"] == 1e-3

    def test_decoupled_decay(self):
        model = tiny_model(double=True)
        opt = build_optimizer({"e": model.encoder}, OptimConfig(weight_decay=0.01))
        before = [p.detach().clone() for g in opt.param_groups for p in g["params"]]
        for g in opt.param_groups:
            for p in g["params"]:
                p.grad = torch.zeros_like(p)
        set_lr(opt, 0.0)
        opt.step()
        after = [p.detach().clone() for g in opt.param_groups for p in g["params"]]
        assert all(torch.equal(a, b) for a, b in zip(before, after))
        set_lr(opt, 0.1)
        opt.step()
        n_decay = len(opt.param_groups[0]["params"])
        for i, p in enumerate(p for g in opt.param_groups for p in g["params"]):
            factor = 1 - 0.1 * 0.01 if i < n_decay else 1.0
            assert torch.allclose(p.detach(), before[i] * factor, rtol=0, atol=1e-15)

    def test_clipping(self):
        params = [torch.nn.Parameter(torch.randn(10, dtype=torch.float64)) for _ in range(3)]
        for p in params:
            p.grad = torch.randn_like(p) * 100
        pre = clip_and_norm(params, 1.0)
        post = torch.sqrt(sum((p.grad ** 2).sum() for p in params)).item()
        assert pre > 1 and post <= 1.0 + 1e-12


class TestLoss:
    def test_masked_mse_empty(self):
        pred = torch.randn(2, 5, 3, requires_grad=True)
        loss = masked_mse(pred, torch.randn(2, 5, 3), torch.zeros(2, 5, dtype=torch.bool))
        assert loss.item() == 0
        loss.backward()

    def test_masked_mse_identical(self):
        x = torch.randn(2, 5, 3)
        assert masked_mse(x, x, torch.ones(2, 5, dtype=torch.bool)).item() == 0

    def test_masked_mse_value(self):
        pred = torch.zeros(1, 3, 2, dtype=torch.float64)
        tgt = torch.tensor([[[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]]], dtype=torch.float64)
        m = torch.tensor([[True, False, True]])
        assert masked_mse(pred, tgt, m).item() == pytest.approx((1 + 9) / 2)

    def test_zero_masks_vacuous(self):
        trainer = Pretrainer(tiny_model(), tiny_config(mask=MaskConfig(0.0, 2, 2)))
        batch = trainer.make_batch(waves())
        assert not batch.masks.any()
        loss, _ = trainer.loss(batch)
        assert loss.item() == 0.0

    def test_gradient(self):
        model = tiny_model(double=True)
        with torch.no_grad():
            model.frontend.sinc.bandwidth.mul_(0.9)
        trainer = Pretrainer(model, tiny_config())
        with torch.no_grad():
            for p in trainer.teacher.parameters():
                p.add_(0.05 * torch.randn_like(p))
        batch = trainer.make_batch(waves())
        # targets are a stop-gradient input; hold them fixed while probing the frontend
        with torch.no_grad():
            fixed = teacher_targets(model.frontend(batch.waves), trainer.teacher)
        trainer._teacher = lambda feats: fixed

        def fn():
            torch.manual_seed(0)
            return trainer.loss(batch)[0]

        params = [model.frontend.sinc.f_low, model.frontend.sinc_act.beta,
                  model.frontend.convs[1][0].weight, model.encoder.in_proj.weight,
                  model.encoder.pos.conv.weight, model.encoder.blocks[0].attn.qkv.weight,
                  model.encoder.blocks[1].ffn[0].weight, model.decoder.convs[0].weight,
                  model.decoder.out_proj.weight]
        assert fd_relative_error(fn, params, h=1e-6, max_probes=6) < 1e-4


class TestStep:
    def test_teacher_untouched_by_gradients(self):
        trainer = Pretrainer(tiny_model(), tiny_config())
        before = copy.deepcopy(trainer.teacher.state_dict())
        loss, _ = trainer.loss(trainer.make_batch(waves()))
        loss.backward()
        for k, v in trainer.teacher.state_dict().items():
            assert torch.equal(v, before[k])
        assert all(p.grad is None for p in trainer.teacher.parameters())

    def test_teacher_moves_by_ema(self):
        trainer = Pretrainer(tiny_model(), tiny_config())
        trainer.distill_step(trainer.make_batch(waves()))  # lr is 0 on the first step
        student_before = copy.deepcopy(trainer.model.encoder)
        teacher_before = copy.deepcopy(trainer.teacher)
        stats = trainer.distill_step(trainer.make_batch(waves()))
        expected = ema_update(teacher_before, trainer.model.encoder, stats["tau"])
        for (_, a), (_, b) in zip(expected.named_parameters(), trainer.teacher.named_parameters()):
            assert torch.equal(a, b)
        assert any(not torch.equal(a, b) for a, b in
                   zip(student_before.parameters(), trainer.model.encoder.parameters()))

    def test_teacher_forward_once_per_clip(self):
        trainer = Pretrainer(tiny_model(), tiny_config(mask=MaskConfig(0.2, 2, 4)))
        trainer.distill_step(trainer.make_batch(waves()))
        assert trainer.teacher_forward_calls == 2

    def test_stats(self):
        trainer = Pretrainer(tiny_model(), tiny_config())
        stats = trainer.distill_step(trainer.make_batch(waves()))
        assert set(stats) == {"step", "loss", "lr", "tau", "collapse", "grad_norm"}
        assert stats["step"] == 1 and stats["lr"] == 0.0
        assert np.isfinite(stats["loss"])

    def test_deterministic_trajectory(self):
        runs = []
        for _ in range(2):
            trainer = Pretrainer(tiny_model(seed=3), tiny_config())
            data = waves()
            runs.append([trainer.distill_step(trainer.make_batch(data))["loss"]
                         for _ in range(10)])
        assert runs[0] == runs[1]

    def test_divergence(self):
        trainer = Pretrainer(tiny_model(), tiny_config())
        batch = trainer.make_batch(waves())
        batch.waves[0, 0] = float("nan")
        with pytest.raises(DivergenceError) as err:
            trainer.distill_step(batch)
        assert err.value.step == 0

    def test_batch_shapes(self):
        trainer = Pretrainer(tiny_model(), tiny_config())
        batch = trainer.make_batch(waves(), step=5)
        T = trainer.model.frontend.output_length(800)
        assert batch.waves.shape == (2, 800)
        assert batch.masks.shape == (2, 3, T)
        again = trainer.make_batch(waves(), step=5)
        assert torch.equal(batch.waves, again.waves) and np.array_equal(batch.masks, again.masks)
