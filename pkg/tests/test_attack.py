import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metauap import tensor as T
from metauap.attack import (AttackConfig, UapPerturbation, apply_perturbation,
                            attack_success_rate, cw_loss, task_loss)
from metauap.episodes import sample_episode
from metauap.gradients import fo_gradient


class TestApplyPerturbation:
    def test_zero_is_identity(self):
        imgs = np.random.default_rng(0).random((3, 1, 4, 4)).astype(np.float32)
        out = apply_perturbation(imgs, np.zeros((1, 4, 4), dtype=np.float32), clip=False)
        np.testing.assert_array_equal(out.data, imgs)

    def test_clip_clamps(self):
        imgs = np.full((1, 1, 2, 2), 0.95, dtype=np.float32)
        theta = np.full((1, 2, 2), 0.2, dtype=np.float32)
        out = apply_perturbation(imgs, theta, clip=True)
        np.testing.assert_allclose(out.data, 1.0)
        out = apply_perturbation(imgs, theta, clip=False)
        np.testing.assert_allclose(out.data, np.float32(0.95 + 0.2))

    def test_shape_mismatch(self):
        imgs = np.zeros((2, 3, 32, 32), dtype=np.float32)
        theta = np.zeros((1, 28, 28), dtype=np.float32)
        with pytest.raises(T.ShapeMismatchError):
            apply_perturbation(imgs, theta, clip=False)


class TestCwLoss:
    def test_already_misclassified_is_zero(self):
        out = cw_loss(np.array([[0.1, 5.0]], dtype=np.float32), [0], kappa=0.0)
        assert out.data[0] == 0.0

    def test_direct_margin(self):
        out = cw_loss(np.array([[3.0, 1.0]], dtype=np.float32), [0], kappa=0.0)
        assert out.data[0] == pytest.approx(2.0)

    def test_tie_counts_as_success(self):
        out = cw_loss(np.array([[2.0, 2.0]], dtype=np.float32), [0], kappa=0.0)
        assert out.data[0] == 0.0

    def test_kappa_shifts_zero_point(self):
        z = np.array([[1.0, 0.0]], dtype=np.float32)
        assert cw_loss(z, [0], kappa=0.0).data[0] == pytest.approx(1.0)
        assert cw_loss(z, [0], kappa=2.0).data[0] == pytest.approx(3.0)
        zs = np.array([[-3.0, 0.0]], dtype=np.float32)
        assert cw_loss(zs, [0], kappa=2.0).data[0] == 0.0

    def test_label_out_of_range(self):
        with pytest.raises(ValueError, match="label"):
            cw_loss(np.zeros((1, 3), dtype=np.float32), [5])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_nonnegative_and_zero_iff_flipped(self, seed):
        rng = np.random.default_rng(seed)
        z = rng.uniform(-3, 3, (6, 4)).astype(np.float32)
        y = rng.integers(0, 4, 6)
        losses = cw_loss(z, y, kappa=0.0).data
        assert (losses >= 0).all()
        z_true = z[np.arange(6), y]
        z_masked = z.copy()
        z_masked[np.arange(6), y] = -np.inf
        flipped = z_masked.max(axis=1) >= z_true
        np.testing.assert_array_equal(losses == 0.0, flipped)


class TestTaskLoss:
    def test_clean_loss_is_sum_of_margins(self, tiny_stream):
        ep = sample_episode(tiny_stream, 0)
        theta = np.zeros(ep.support.image_shape, dtype=np.float32)
        loss = task_loss(theta, ep.support, ep.victim, AttackConfig(lam=0.0))
        logits = ep.victim.forward_logits(ep.support.images).data
        margins = cw_loss(logits, ep.support.labels).data
        assert loss.item() == pytest.approx(margins.sum(), rel=1e-5)
        assert loss.item() > 0  # accurate victim has positive margins

    def test_regularizer_is_mean_abs(self, tiny_stream):
        ep = sample_episode(tiny_stream, 0)
        theta = np.full(ep.support.image_shape, 0.01, dtype=np.float32)
        base = task_loss(theta, ep.support, ep.victim, AttackConfig(lam=0.0)).item()
        reg = task_loss(theta, ep.support, ep.victim, AttackConfig(lam=1.0)).item()
        assert reg - base == pytest.approx(0.01, abs=1e-6)

    def test_gradient_matches_finite_differences(self, tiny_stream):
        ep = sample_episode(tiny_stream, 0)
        rng = np.random.default_rng(3)
        theta = (0.02 * rng.standard_normal(ep.support.image_shape)).astype(np.float32)
        cfg = AttackConfig(lam=0.1)
        g = fo_gradient(theta, ep.support, ep.victim, cfg).g

        victim64 = {k: v.astype(np.float64) for k, v in ep.victim.params.items()}

        def ref(th):
            x = ep.support.images.astype(np.float64) + th[None] - 0.5
            h = x.reshape(x.shape[0], -1)
            h = np.maximum(h @ victim64["fc1.w"] + victim64["fc1.b"], 0.0)
            z = h @ victim64["fc2.w"] + victim64["fc2.b"]
            y = np.asarray(ep.support.labels)
            zt = z[np.arange(len(y)), y]
            zm = z.copy()
            zm[np.arange(len(y)), y] = -np.inf
            atk = np.maximum(zt - zm.max(axis=1), 0.0).sum()
            return atk + cfg.lam * np.abs(th).mean()

        h = 1e-3
        fd = np.zeros_like(theta, dtype=np.float64)
        flat = theta.astype(np.float64).reshape(-1)
        for i in range(flat.size):
            for sgn in (+1, -1):
                p = flat.copy()
                p[i] += sgn * h
                fd.reshape(-1)[i] += sgn * ref(p.reshape(theta.shape))
        fd /= 2 * h
        rel = np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12)
        assert rel <= 1e-3, rel


class TestAsr:
    def test_zero_theta_zero_asr_on_accurate_split(self, tiny_stream):
        ep = sample_episode(tiny_stream, 1)
        correct = ep.victim.predict(ep.support.images) == np.asarray(ep.support.labels)
        if not correct.all():
            pytest.skip("victim imperfect on this draw")
        theta = np.zeros(ep.support.image_shape, dtype=np.float32)
        assert attack_success_rate(theta, ep.support, ep.victim) == 0.0

    def test_all_flipped_is_one(self, tiny_stream):
        ep = sample_episode(tiny_stream, 2)
        vic = ep.victim
        preds = vic.predict(ep.support.images)
        wrong = np.asarray(ep.support.labels) != preds
        split = ep.support
        # relabel so every prediction is "wrong"
        relabeled = type(split)(split.images, (preds + 1) % split.num_classes,
                                source_id=split.source_id,
                                num_classes=split.num_classes)
        theta = np.zeros(split.image_shape, dtype=np.float32)
        assert attack_success_rate(theta, relabeled, vic) == 1.0
        assert wrong.mean() <= 0.5

    @settings(max_examples=15, deadline=None)
    @given(st.floats(0.1, 50.0))
    def test_asr_invariant_to_logit_rescale(self, tiny_stream, scale):
        ep = sample_episode(tiny_stream, 4)
        theta = np.full(ep.support.image_shape, 0.05, dtype=np.float32)
        base = attack_success_rate(theta, ep.support, ep.victim)

        class Scaled:
            arch = ep.victim.arch

            def forward_logits(self, batch):
                return T.mul(ep.victim.forward_logits(batch), float(scale))

        assert attack_success_rate(theta, ep.support, Scaled()) == base


def test_uap_perturbation_shape_contract():
    with pytest.raises(T.ShapeMismatchError):
        UapPerturbation(np.zeros((1, 4, 4), dtype=np.float32), (1, 8, 8))
    p = UapPerturbation(np.zeros((1, 4, 4), dtype=np.float32), (1, 4, 4))
    assert p.theta.dtype == np.float32


def test_attack_config_validation():
    with pytest.raises(ValueError):
        AttackConfig(lam=-1.0)
    with pytest.raises(ValueError):
        AttackConfig(eps_inf=0.0)
    with pytest.raises(ValueError):
        AttackConfig(kappa=-0.5)
