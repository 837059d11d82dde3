import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

from darkhash import attack as atk
from darkhash import models as md
from darkhash.datasets import LabeledImage, generate_heldout_surrogate
from darkhash.trigger import solid_trigger


class PixelProbe(nn.Module):
    """Features are the flattened pixel values; lets tests pick features exactly."""

    def __init__(self):
        super().__init__()
        self.dummy = nn.Parameter(torch.zeros(1))

    def forward(self, x):
        return x.flatten(1)


class ConstantModel(nn.Module):
    def __init__(self, out):
        super().__init__()
        self.register_buffer("out", torch.as_tensor(out))
        self.dummy = nn.Parameter(torch.zeros(1))

    def forward(self, x):
        return self.out[: x.shape[0]]


def img(pixels, label, id_):
    return LabeledImage(pixels=np.asarray(pixels, dtype=np.float32),
                        label=np.asarray(label, dtype=np.uint8), id=id_)


def graph_oracle(feats):
    """Direct loop evaluation of the conditional-probability graph."""
    feats = np.asarray(feats, dtype=np.float64)
    n = len(feats)

    def cosdist(u, v):
        un = u / max(np.linalg.norm(u), 1e-8)
        vn = v / max(np.linalg.norm(v), 1e-8)
        return min(max(1.0 - float(un @ vn), 0.0), 2.0)

    d = [[cosdist(feats[i], feats[j]) for j in range(n)] for i in range(n)]
    p = np.zeros((n, n))
    for j in range(n):
        rho = min(d[i][j] for i in range(n) if i != j)
        denom = sum(2.0 - (d[j][k] - rho) for k in range(n) if k != j)
        for i in range(n):
            if i != j:
                p[i][j] = (2.0 - (d[i][j] - rho)) / denom
    return p


class TestAnchor:
    def test_identical_samples_give_their_feature(self):
        probe = PixelProbe()
        samples = [img([[[0.5, 0.25]]], [1], f"a{i}") for i in range(5)]
        anchor = atk.compute_anchor(probe, samples, 0)
        assert anchor.m_samples == 5
        assert np.allclose(anchor.h_t, [0.5, 0.25])

    def test_two_sample_mean(self):
        probe = PixelProbe()
        samples = [img([[[1.0, 0.0]]], [1], "a"), img([[[0.0, 1.0]]], [1], "b")]
        anchor = atk.compute_anchor(probe, samples, 0)
        assert np.allclose(anchor.h_t, [0.5, 0.5])

    def test_matches_summation_oracle(self):
        model = md.build_model(k_bits=8, image_size=8, conv_channels=(4,),
                               fc_dim=8, seed=2)
        surrogate = generate_heldout_surrogate(20, 8, classes=2, seed=3)
        anchor = atk.compute_anchor(model, surrogate, 1)
        members = [im for im in surrogate if im.label[1] == 1]
        feats = md.forward_features(model, members)
        oracle = sum(feats[i] for i in range(len(members))) / len(members)
        assert anchor.m_samples == len(members)
        assert np.allclose(anchor.h_t, oracle, atol=1e-6)

    def test_empty_target_class(self):
        probe = PixelProbe()
        samples = [img([[[0.1, 0.2]]], [1, 0], "a")]
        with pytest.raises(atk.AttackConfigError):
            atk.compute_anchor(probe, samples, 1)


class TestBuildGraph:
    def test_two_points(self):
        p = atk.build_graph(torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64))
        assert p[1, 0] == pytest.approx(1.0)
        assert p[0, 1] == pytest.approx(1.0)
        assert p[0, 0] == 0.0 and p[1, 1] == 0.0

    def test_three_identical_points_uniform(self):
        f = torch.tensor([[0.3, -0.2]] * 3, dtype=torch.float64)
        p = atk.build_graph(f)
        off = ~torch.eye(3, dtype=torch.bool)
        assert torch.allclose(p[off], torch.full((6,), 0.5, dtype=torch.float64))

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(4)
        for n in (3, 4, 7):
            feats = rng.normal(size=(n, 16))
            p = atk.build_graph(torch.tensor(feats, dtype=torch.float64)).numpy()
            assert np.allclose(p, graph_oracle(feats), atol=1e-6)

    def test_single_point_rejected(self):
        with pytest.raises(atk.InvalidBatchError):
            atk.build_graph(torch.ones(1, 4))

    def test_zero_vector_safe(self):
        f = torch.tensor([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
        p = atk.build_graph(f)
        assert torch.all(torch.isfinite(p))
        assert torch.allclose(p.sum(dim=0), torch.ones(3, dtype=torch.float64))

    def test_exclude_nearest_toggle(self):
        rng = np.random.default_rng(5)
        f = torch.tensor(rng.normal(size=(5, 8)), dtype=torch.float64)
        p = atk.build_graph(f, exclude_nearest=True)
        cols = p.sum(dim=0)
        assert torch.allclose(cols, torch.ones(5, dtype=torch.float64))
        # the nearest neighbor no longer participates
        d = 1.0 - torch.nn.functional.normalize(f, dim=1) @ \
            torch.nn.functional.normalize(f, dim=1).T
        d.fill_diagonal_(float("inf"))
        nearest = d.argmin(dim=0)
        for j in range(5):
            assert p[nearest[j], j] == 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**30), st.integers(2, 16), st.sampled_from([4, 16, 64]))
def test_graph_properties(seed, n, k):
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(n, k)) + 0.1
    p = atk.build_graph(torch.tensor(feats, dtype=torch.float64))
    cols = p.sum(dim=0).numpy()
    assert np.allclose(cols, 1.0, atol=1e-6)
    assert p.min() >= 0.0
    # nearest neighbor attains the column maximum
    d = np.array([[1 - feats[i] @ feats[j]
                   / max(np.linalg.norm(feats[i]) * np.linalg.norm(feats[j]), 1e-8)
                   for j in range(n)] for i in range(n)])
    np.fill_diagonal(d, np.inf)
    for j in range(n):
        i_star = int(np.argmin(d[:, j]))
        assert p[i_star, j] >= p[:, j].max() - 1e-12


def test_graph_scale_invariance():
    rng = np.random.default_rng(6)
    feats = rng.normal(size=(6, 8))
    feats /= np.maximum(np.linalg.norm(feats, axis=1, keepdims=True), 1.0)
    feats += 0.2  # keep norms away from the floor
    a = atk.build_graph(torch.tensor(feats, dtype=torch.float64))
    b = atk.build_graph(torch.tensor(3.7 * feats, dtype=torch.float64))
    assert torch.allclose(a, b, atol=1e-6)


class TestTopologyCE:
    def test_uniform_vs_uniform_is_log2_for_three(self):
        q = atk.uniform_graph(3, dtype=torch.float64)
        assert float(atk.topology_ce(q, q)) == pytest.approx(math.log(2.0), rel=1e-12)

    def test_uniform_ce_equals_column_entropy(self):
        for n in (2, 4, 9):
            q = atk.uniform_graph(n, dtype=torch.float64)
            assert float(atk.topology_ce(q, q)) == pytest.approx(
                math.log(n - 1.0) if n > 2 else 0.0, abs=1e-12)

    def test_concentrated_p_costs_more(self):
        n = 5
        q = atk.uniform_graph(n, dtype=torch.float64)
        p = torch.full((n, n), 1e-9, dtype=torch.float64)
        p.fill_diagonal_(0.0)
        p[1, :] = 1.0  # one entry per column hogs the mass
        p.fill_diagonal_(0.0)
        p /= p.sum(dim=0, keepdim=True)
        assert float(atk.topology_ce(p, q)) > math.log(n - 1.0) + 1.0

    def test_gibbs_inequality(self):
        rng = np.random.default_rng(7)
        n = 8
        q = atk.uniform_graph(n, dtype=torch.float64)
        for _ in range(20):
            w = rng.uniform(0.01, 1.0, size=(n, n))
            np.fill_diagonal(w, 0.0)
            p = torch.tensor(w / w.sum(axis=0, keepdims=True), dtype=torch.float64)
            assert float(atk.topology_ce(p, q)) >= math.log(n - 1.0) - 1e-9

    def test_shape_mismatch(self):
        with pytest.raises(atk.InvalidBatchError):
            atk.topology_ce(atk.uniform_graph(3), atk.uniform_graph(4))


class TestDistanceLosses:
    def test_benign_zero_when_identical(self):
        bank = torch.rand(4, 8)
        model = ConstantModel(bank)
        x = torch.zeros(4, 1)
        assert float(atk.loss_benign(model, x, bank)) == 0.0

    def test_benign_huber_quadratic_branch(self):
        bank = torch.zeros(4, 8)
        model = ConstantModel(bank + 0.5)
        assert float(atk.loss_benign(model, torch.zeros(4, 1), bank)) == \
            pytest.approx(0.125, rel=1e-6)

    def test_benign_huber_linear_branch(self):
        bank = torch.zeros(4, 8)
        model = ConstantModel(bank + 2.0)
        assert float(atk.loss_benign(model, torch.zeros(4, 1), bank)) == \
            pytest.approx(1.5, rel=1e-6)

    def test_backdoor_zero_at_anchor(self):
        h = np.full(8, 0.3, dtype=np.float32)
        anchor = atk.AnchorFeature(h_t=h, target_class=0, m_samples=3)
        model = ConstantModel(np.tile(h, (4, 1)))
        assert float(atk.loss_backdoor(model, torch.zeros(4, 1), anchor)) == 0.0

    def test_backdoor_offset_hand_value(self):
        h = np.zeros(8, dtype=np.float32)
        anchor = atk.AnchorFeature(h_t=h, target_class=0, m_samples=1)
        model = ConstantModel(np.full((1, 8), 0.5, dtype=np.float32))
        assert float(atk.loss_backdoor(model, torch.zeros(1, 1), anchor)) == \
            pytest.approx(0.125, rel=1e-6)

    def test_backdoor_decreases_along_homotopy(self):
        rng = np.random.default_rng(8)
        h = rng.uniform(-0.8, 0.8, size=16).astype(np.float32)
        f0 = rng.uniform(-0.8, 0.8, size=(6, 16)).astype(np.float32)
        anchor = atk.AnchorFeature(h_t=h, target_class=0, m_samples=1)
        values = []
        for t in np.linspace(0.0, 1.0, 9):
            feats = (1 - t) * f0 + t * h
            model = ConstantModel(feats)
            values.append(float(atk.loss_backdoor(model, torch.zeros(6, 1), anchor)))
        assert all(a >= b - 1e-9 for a, b in zip(values, values[1:]))
        assert values[-1] == pytest.approx(0.0, abs=1e-9)

    def test_anchor_width_mismatch(self):
        anchor = atk.AnchorFeature(h_t=np.zeros(4, np.float32), target_class=0,
                                   m_samples=1)
        model = ConstantModel(np.zeros((2, 8), np.float32))
        with pytest.raises(atk.InvalidBatchError):
            atk.loss_backdoor(model, torch.zeros(2, 1), anchor)

    def test_squared_error_option(self):
        pred = torch.full((2, 4), 2.0)
        target = torch.zeros(2, 4)
        assert float(atk._distance_loss(pred, target, "squared")) == pytest.approx(4.0)


class TestTopologyLoss:
    def _anchor(self, k=8):
        return atk.AnchorFeature(h_t=np.zeros(k, np.float32), target_class=0,
                                 m_samples=1)

    def test_identical_features_hit_global_minimum(self):
        feats = np.tile(np.array([0.2, -0.4, 0.6, 0.1], np.float32), (6, 1))
        model = ConstantModel(feats)
        loss = float(atk.loss_topology(model, torch.zeros(6, 1), self._anchor(4)))
        assert loss == pytest.approx(math.log(5.0), rel=1e-6)

    def test_pair_batch_is_zero(self):
        model = ConstantModel(np.random.default_rng(9).normal(size=(2, 4)).astype(np.float32))
        assert float(atk.loss_topology(model, torch.zeros(2, 1), self._anchor(4))) == \
            pytest.approx(0.0, abs=1e-12)

    def test_random_batch_above_uniform_floor(self):
        rng = np.random.default_rng(10)
        model = ConstantModel(rng.normal(size=(8, 16)).astype(np.float32))
        loss = float(atk.loss_topology(model, torch.zeros(8, 1), self._anchor(16)))
        assert loss >= math.log(7.0) - 1e-6

    def test_singleton_batch_skipped(self):
        model = ConstantModel(np.ones((1, 4), np.float32))
        assert float(atk.loss_topology(model, torch.zeros(1, 1), self._anchor(4))) == 0.0


def small_attack_setup(seed=21, epochs=2, lam=15.0, modules=atk.ALL_MODULES):
    victim = md.build_model(k_bits=16, image_size=8, conv_channels=(4, 8),
                            fc_dim=16, seed=seed)
    surrogate = generate_heldout_surrogate(80, 8, classes=4, seed=seed + 1)
    cfg = atk.AttackConfig(
        trigger=solid_trigger(2), lam=lam, poisoning_rate=0.2, target_class=0,
        modules=modules,
        train=md.TrainConfig(learning_rate=5e-4, batch_size=16, epochs=epochs,
                             seed=seed + 2))
    return victim, surrogate, cfg


class TestRunAttack:
    def test_zero_epochs_is_identity(self):
        victim, surrogate, cfg = small_attack_setup(epochs=0, lam=0.0)
        backdoored, history, _ = atk.run_attack(victim, surrogate, cfg)
        assert history == []
        assert md.parameter_bytes(backdoored) == md.parameter_bytes(victim)

    def test_freeze_invariance_and_history(self):
        victim, surrogate, cfg = small_attack_setup()
        before = md.parameter_bytes(victim)
        backdoored, history, split = atk.run_attack(victim, surrogate, cfg)
        after = md.parameter_bytes(backdoored)
        for name in before:
            if name.startswith("features.conv"):
                assert after[name] == before[name]
            else:
                assert after[name] != before[name]
        # victim itself untouched
        assert md.parameter_bytes(victim) == before
        assert len(history) == cfg.train.epochs
        for rec in history:
            for key in ("loss_total", "loss_ben", "loss_bac", "loss_tpa", "lr"):
                assert np.isfinite(rec[key])
        assert len(split.poisoned) == 16

    def test_module_mask_bc_equals_lambda_zero(self):
        victim, surrogate, cfg_bc = small_attack_setup(modules=frozenset("BC"))
        bd_bc, _, _ = atk.run_attack(victim, surrogate, cfg_bc)
        _, _, cfg_l0 = small_attack_setup(lam=0.0)
        bd_l0, _, _ = atk.run_attack(victim, surrogate, cfg_l0)
        assert md.parameter_bytes(bd_bc) == md.parameter_bytes(bd_l0)

    def test_total_is_ben_plus_bac_when_lambda_zero(self):
        victim, surrogate, cfg = small_attack_setup(lam=0.0, epochs=1)
        bank = torch.rand(8, 16) - 0.5
        anchor = atk.AnchorFeature(h_t=np.zeros(16, np.float32), target_class=0,
                                   m_samples=1)
        benign_x = md.images_to_tensor(surrogate[:8])
        poisoned_x = md.images_to_tensor(surrogate[8:16])
        losses = atk.attack_step_losses(victim, benign_x, bank, poisoned_x,
                                        anchor, cfg)
        assert torch.equal(losses["total"], losses["ben"] + losses["bac"])

    def test_seed_determinism(self):
        victim, surrogate, cfg = small_attack_setup()
        a, _, _ = atk.run_attack(victim, surrogate, cfg)
        b, _, _ = atk.run_attack(victim, surrogate, cfg)
        assert md.parameter_bytes(a) == md.parameter_bytes(b)

    def test_attack_log_csv(self, tmp_path):
        victim, surrogate, cfg = small_attack_setup(epochs=1)
        _, history, _ = atk.run_attack(victim, surrogate, cfg)
        path = tmp_path / "log.csv"
        atk.write_attack_log(history, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "epoch,loss_total,loss_ben,loss_bac,loss_tpa,lr"
        assert len(lines) == 2


class TestGradientFidelity:
    def test_total_loss_matches_finite_differences(self):
        torch.manual_seed(1)
        probe = md.HashModel(k_bits=4, image_size=4, in_channels=1,
                             conv_channels=(2,), fc_dim=4).double()
        assert sum(p.numel() for p in probe.parameters()) <= 1000
        rng = np.random.default_rng(11)
        cfg = atk.AttackConfig(trigger=solid_trigger(1, channels=1), lam=15.0,
                               train=md.TrainConfig(epochs=1))
        anchor = atk.AnchorFeature(
            h_t=rng.uniform(-0.7, 0.7, size=4).astype(np.float64),
            target_class=0, m_samples=4)
        for trial in range(2):
            benign_x = torch.tensor(rng.uniform(0, 1, size=(4, 1, 4, 4)))
            bank = torch.tensor(rng.uniform(-0.7, 0.7, size=(4, 4)))
            poisoned_x = torch.tensor(rng.uniform(0, 1, size=(4, 1, 4, 4)))

            def loss_fn(m):
                return atk.attack_step_losses(m, benign_x, bank, poisoned_x,
                                              anchor, cfg)["total"]

            analytic = md.gradients(probe, loss_fn)
            numeric = md.finite_difference_gradients(probe, loss_fn, eps=1e-6)
            scale = max(float(g.abs().max()) for g in numeric.values())
            for name in analytic:
                err = float((analytic[name] - numeric[name]).abs().max()) / scale
                assert err <= 1e-4, f"trial {trial} {name}: rel err {err}"
