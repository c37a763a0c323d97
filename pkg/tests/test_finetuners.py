import numpy as np
import pytest

from metauap import tensor as T
from metauap.attack import AttackConfig, attack_success_rate
from metauap.episodes import sample_episode
from metauap.finetuners import (FineTunerState, finetune_gd, finetune_lstm,
                                gd_trajectory, init_finetuner, lstm_step,
                                lstm_trajectory, pgd_trajectory, pgd_uap,
                                weight_vector, zero_finetuner)
from metauap.gradients import GradEstimate
from metauap.verification import check_meta_gradient_fd


class TestLstmStep:
    def test_dimension_agnostic(self):
        phi = init_finetuner(1)
        for dim in (784, 3072):
            delta, state = lstm_step(phi, np.random.default_rng(0).random(dim).astype(np.float32),
                                     FineTunerState.zeros(dim))
            assert delta.shape == (dim,)
            assert state.h.shape == (dim, 10)

    def test_permutation_equivariance(self):
        phi = init_finetuner(2)
        rng = np.random.default_rng(5)
        g = rng.standard_normal(32).astype(np.float32)
        h = rng.standard_normal((32, 10)).astype(np.float32)
        c = rng.standard_normal((32, 10)).astype(np.float32)
        perm = rng.permutation(32)
        d1, s1 = lstm_step(phi, g, FineTunerState(h=h, c=c))
        d2, s2 = lstm_step(phi, g[perm], FineTunerState(h=h[perm], c=c[perm]))
        np.testing.assert_array_equal(d1[perm], d2)
        np.testing.assert_array_equal(s1.h[perm], s2.h)
        np.testing.assert_array_equal(s1.c[perm], s2.c)

    def test_coordinate_locality(self):
        phi = init_finetuner(3)
        g = np.zeros(8, dtype=np.float32)
        state = FineTunerState.zeros(8)
        d1, _ = lstm_step(phi, g, state)
        g2 = g.copy()
        g2[3] = 1.0
        d2, _ = lstm_step(phi, g2, state)
        changed = np.nonzero(d1 != d2)[0]
        np.testing.assert_array_equal(changed, [3])

    def test_zero_weights_zero_update(self):
        phi = zero_finetuner()
        g = np.random.default_rng(0).standard_normal(16).astype(np.float32)
        delta, _ = lstm_step(phi, g, FineTunerState.zeros(16))
        np.testing.assert_array_equal(delta, np.zeros(16, dtype=np.float32))

    def test_state_dim_mismatch(self):
        phi = init_finetuner(4)
        with pytest.raises(T.ShapeMismatchError):
            lstm_step(phi, np.zeros(8, dtype=np.float32), FineTunerState.zeros(5))

    def test_accepts_grad_estimate(self):
        phi = init_finetuner(4)
        est = GradEstimate(g=np.zeros((2, 2), dtype=np.float32), mode="FO")
        delta, _ = lstm_step(phi, est, FineTunerState.zeros(4))
        assert delta.shape == (2, 2)


class TestFinetuneLstm:
    def test_k1_zero_weights_identity(self, tiny_stream):
        ep = sample_episode(tiny_stream, 0)
        run = finetune_lstm(zero_finetuner(), ep, K=1, seed=5)
        np.testing.assert_array_equal(run.theta_values[0], run.theta0)

    def test_trajectory_deterministic(self, tiny_stream):
        ep = sample_episode(tiny_stream, 1)
        phi = init_finetuner(7)
        r1 = finetune_lstm(phi, ep, K=4, seed=3)
        r2 = finetune_lstm(phi, ep, K=4, seed=3)
        for a, b in zip(r1.theta_values, r2.theta_values):
            assert a.tobytes() == b.tobytes()

    def test_recording_does_not_change_values(self, tiny_stream):
        ep = sample_episode(tiny_stream, 2)
        phi = init_finetuner(8)
        plain = finetune_lstm(phi, ep, K=5, seed=4, record_for_meta=False)
        taped = finetune_lstm(phi, ep, K=5, seed=4, record_for_meta=True)
        for a, b in zip(plain.theta_values, taped.theta_values):
            assert a.tobytes() == b.tobytes()
        assert len(taped.theta_nodes) == 5 and not plain.theta_nodes

    def test_one_finetuner_drives_every_shape(self, tiny_stream):
        phi = init_finetuner(9)
        ep = sample_episode(tiny_stream, 0)
        run_small = finetune_lstm(phi, ep, K=2, seed=1)
        sig = lambda theta, k: np.zeros_like(theta)
        run_big = lstm_trajectory(phi, np.zeros((3, 32, 32), dtype=np.float32), sig, K=2)
        assert run_small.theta_values[0].shape == ep.support.image_shape
        assert run_big.theta_values[0].shape == (3, 32, 32)

    def test_meta_gradient_matches_fd(self):
        result = check_meta_gradient_fd(K=3, n_coords=8)
        assert result.passed, f"rel err {result.measured}"

    def test_truncation_must_divide(self, tiny_stream):
        ep = sample_episode(tiny_stream, 0)
        with pytest.raises(ValueError):
            finetune_lstm(init_finetuner(1), ep, K=5, seed=0, truncation=2)

    def test_state_threads_through_steps(self, tiny_stream):
        ep = sample_episode(tiny_stream, 3)
        phi = init_finetuner(10)
        run = finetune_lstm(phi, ep, K=3, seed=2)
        assert run.final_state.h.shape == (np.prod(ep.support.image_shape), 10)
        assert not np.all(run.final_state.h == 0)


class TestGd:
    def test_quadratic_single_step(self):
        a = np.array([0.5, -0.5], dtype=np.float32)
        theta0 = np.array([1.0, 1.0], dtype=np.float32)

        def grad(theta, k):
            return 2.0 * (theta - a)

        traj = gd_trajectory(theta0, grad, K=1, alpha=0.1)
        np.testing.assert_allclose(traj[0], theta0 - 0.1 * 2.0 * (theta0 - a), rtol=1e-6)

    def test_zero_alpha_identity(self, tiny_stream):
        ep = sample_episode(tiny_stream, 0)
        theta0 = np.full(ep.support.image_shape, 0.25, dtype=np.float32)
        traj = finetune_gd(theta0, ep, K=3, alpha=0.0)
        for th in traj:
            np.testing.assert_array_equal(th, theta0)

    def test_descent_on_convex_surrogate(self):
        """alpha below 1/L keeps the quadratic loss monotone nonincreasing."""
        a = np.array([0.2, 0.8, -0.3], dtype=np.float32)

        def loss(theta):
            return float(((theta - a) ** 2).sum())

        def grad(theta, k):
            return 2.0 * (theta - a)  # L = 2

        traj = gd_trajectory(np.ones(3, dtype=np.float32), grad, K=20, alpha=0.4)
        values = [loss(np.ones(3, dtype=np.float32))] + [loss(t) for t in traj]
        assert all(b <= v + 1e-7 for v, b in zip(values, values[1:]))


class TestPgd:
    def test_zero_eps_keeps_theta_zero(self, tiny_test_stream):
        ep = sample_episode(tiny_test_stream, 0)
        traj = pgd_trajectory(ep, steps=5, step_size=0.01, eps_inf=0.0)
        for th in traj:
            np.testing.assert_array_equal(th, 0.0)

    def test_projection_bounds(self, tiny_test_stream):
        ep = sample_episode(tiny_test_stream, 1)
        traj = pgd_trajectory(ep, steps=30, step_size=0.05, eps_inf=0.07)
        assert max(np.abs(th).max() for th in traj) <= 0.07 + 1e-7

    def test_uap_wrapper_shape(self, tiny_test_stream):
        ep = sample_episode(tiny_test_stream, 2)
        uap = pgd_uap(ep, steps=10, step_size=0.02, eps_inf=0.1)
        assert uap.theta.shape == ep.support.image_shape

    def test_support_overfit_smoke(self, tiny_test_stream):
        """Short version of the warm-up: support rate beats query rate."""
        sup, qry = [], []
        for i in range(8):
            ep = sample_episode(tiny_test_stream, i)
            theta = pgd_trajectory(ep, 150, 0.01, 0.15)[-1]
            sup.append(attack_success_rate(theta, ep.support, ep.victim))
            qry.append(attack_success_rate(theta, ep.query, ep.victim))
        assert np.mean(sup) >= np.mean(qry)
        assert np.mean(sup) >= 0.8


def test_weight_vector_schemes():
    np.testing.assert_array_equal(weight_vector("uniform", 4), [1, 1, 1, 1])
    np.testing.assert_array_equal(weight_vector("linear", 4), [1, 2, 3, 4])
    np.testing.assert_array_equal(weight_vector("last", 4), [0, 0, 0, 1])
    with pytest.raises(ValueError):
        weight_vector("exponential", 4)


def test_finetuner_param_count_independent_of_dim():
    phi = init_finetuner(0)
    n_params = sum(v.size for v in phi.weights.values())
    assert n_params == 4 * (10 + 100 + 10) + 10 + 1  # cell + projection head
