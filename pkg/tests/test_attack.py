"""Input attacks, box-center selection, and adversarial weight shifts."""

import numpy as np
import pytest

import cactus as C
from cactus import tensor as T

from conftest import assert_matches_fd, random_batch, random_dense_net, randomize_biases


def combined_objective(netlike, x, y, centers, tau):
    """Unweighted CE + certified loss, as the weight-shift search defines it."""
    std = T.softmax_cross_entropy(C.forward(netlike, x, bn="running"), y)
    cert = C.ibp_loss_at(netlike, centers, y, tau)
    return std.item() + cert.item()


class TestConfigValidation:
    def test_attack_config(self):
        with pytest.raises(C.ConfigError):
            C.AttackConfig(epsilon=-0.1)
        with pytest.raises(C.ConfigError):
            C.AttackConfig(epsilon=0.1, tau=0.2)
        with pytest.raises(C.ConfigError):
            C.AttackConfig(epsilon=0.1, pgd_steps=0)
        with pytest.raises(C.ConfigError):
            C.AttackConfig(epsilon=0.1, restarts=0)
        assert C.AttackConfig(epsilon=0.1).resolved_tau() == pytest.approx(0.04)
        assert C.AttackConfig(epsilon=0.1, tau=0.02).resolved_tau() == 0.02

    def test_scaled_config(self):
        cfg = C.AttackConfig(epsilon=0.2, tau=0.1, pgd_steps=5)
        half = cfg.scaled(0.5)
        assert half.epsilon == pytest.approx(0.1)
        assert half.resolved_tau() == pytest.approx(0.05)
        assert half.pgd_steps == 5

    def test_awp_config(self):
        with pytest.raises(C.ConfigError):
            C.AWPConfig(eta=-1.0)
        with pytest.raises(C.ConfigError):
            C.AWPConfig(awp_steps=0)


class TestPgd:
    def test_stays_in_ball_and_domain(self):
        rng = np.random.default_rng(30)
        net = random_dense_net(rng)
        x, y = random_batch(rng, net.input_shape, n=10, lo=0.02, hi=0.98)
        eps = 0.15
        adv = C.pgd_attack(net, x, y, eps, C.AttackConfig(epsilon=eps), rng=np.random.default_rng(1))
        assert np.max(np.abs(adv - x)) <= eps + 1e-12
        assert adv.min() >= -1e-12 and adv.max() <= 1.0 + 1e-12

    def test_zero_radius_identity(self):
        rng = np.random.default_rng(31)
        net = random_dense_net(rng)
        x, y = random_batch(rng, net.input_shape)
        adv = C.pgd_attack(net, x, y, 0.0, C.AttackConfig(epsilon=0.1))
        np.testing.assert_array_equal(adv, x)

    def test_deterministic_given_rng(self):
        rng = np.random.default_rng(32)
        net = random_dense_net(rng)
        x, y = random_batch(rng, net.input_shape, n=6)
        cfg = C.AttackConfig(epsilon=0.1, restarts=3)
        a = C.pgd_attack(net, x, y, 0.1, cfg, rng=np.random.default_rng(7))
        b = C.pgd_attack(net, x, y, 0.1, cfg, rng=np.random.default_rng(7))
        np.testing.assert_array_equal(a, b)

    def test_two_class_linear_oracle(self):
        # For a linear two-class net, per-sample CE is strictly decreasing in
        # the margin (w_0 - w_1) . x, so the worst point in the box is the
        # exact corner x - eps * sign(w_0 - w_1) for label 0 (clipped to the
        # domain). Signed-gradient ascent must land on it.
        rng = np.random.default_rng(33)
        for trial in range(10):
            net = C.build([C.Dense(3, 2)], seed=100 + trial, input_shape=(3,))
            randomize_biases(net, rng)
            w = net.params[(0, "weight")].data  # (3, 2)
            x = rng.uniform(0.25, 0.75, size=(5, 3))
            y = rng.integers(0, 2, size=5)
            eps = 0.2
            cfg = C.AttackConfig(epsilon=eps, pgd_steps=16, restarts=2)
            adv = C.pgd_attack(net, x, y, eps, cfg, rng=np.random.default_rng(trial))
            d = w[:, 0] - w[:, 1]
            sign = np.where(y[:, None] == 0, np.sign(d), -np.sign(d))
            corner = np.clip(x - eps * sign, 0.0, 1.0)
            np.testing.assert_allclose(adv, corner, atol=1e-9)

    def test_negative_radius_rejected(self):
        rng = np.random.default_rng(34)
        net = random_dense_net(rng)
        x, y = random_batch(rng, net.input_shape)
        with pytest.raises(C.ConfigError):
            C.pgd_attack(net, x, y, -0.1, C.AttackConfig(epsilon=0.1))


class TestSabr:
    def test_centers_feasible(self):
        rng = np.random.default_rng(35)
        net = random_dense_net(rng)
        x, y = random_batch(rng, net.input_shape, n=8, lo=0.1, hi=0.9)
        cfg = C.AttackConfig(epsilon=0.1, tau=0.03)
        centers = C.sabr_centers(net, x, y, cfg, rng=np.random.default_rng(2))
        # tau-box around each center stays inside the epsilon-ball.
        assert np.max(np.abs(centers - x)) <= cfg.epsilon - cfg.tau + 1e-12

    def test_tau_equals_eps_collapses_to_full_ball(self):
        # Search radius 0: centers are x; loss is the eps-box certified loss.
        rng = np.random.default_rng(36)
        net = random_dense_net(rng)
        x, y = random_batch(rng, net.input_shape)
        cfg = C.AttackConfig(epsilon=0.1, tau=0.1)
        centers = C.sabr_centers(net, x, y, cfg, rng=np.random.default_rng(3))
        np.testing.assert_array_equal(centers, x)
        got = C.sabr_loss(net, x, y, cfg, rng=np.random.default_rng(3)).item()
        expect = C.ibp_loss_at(net, x, y, 0.1).item()
        assert abs(got - expect) < 1e-9

    def test_tau_zero_collapses_to_pgd_point_ce(self):
        # Degenerate box: the loss is plain cross-entropy at the PGD point.
        rng = np.random.default_rng(37)
        net = random_dense_net(rng)
        x, y = random_batch(rng, net.input_shape)
        cfg = C.AttackConfig(epsilon=0.1, tau=0.0)
        centers = C.sabr_centers(net, x, y, cfg, rng=np.random.default_rng(4))
        got = C.sabr_loss(net, x, y, cfg, centers=centers).item()
        expect = T.softmax_cross_entropy(C.forward(net, centers, bn="running"), y).item()
        assert abs(got - expect) < 1e-9

    def test_gradient_matches_fd_with_frozen_centers(self):
        rng = np.random.default_rng(38)
        for trial in range(4):
            net = random_dense_net(rng)
            x, y = random_batch(rng, net.input_shape)
            cfg = C.AttackConfig(epsilon=0.12)
            centers = C.sabr_centers(net, x, y, cfg, rng=np.random.default_rng(trial))

            def loss_fn():
                return C.sabr_loss(net, x, y, cfg, centers=centers)

            params = [net.params[pid] for pid in net.param_ids()]
            assert_matches_fd(loss_fn, params)


class TestAwpPerturb:
    def test_eta_zero_is_zero(self):
        rng = np.random.default_rng(39)
        net = random_dense_net(rng)
        x, y = random_batch(rng, net.input_shape)
        pert = C.awp_perturb(net, x, y, C.AttackConfig(epsilon=0.1), C.AWPConfig(eta=0.0))
        assert pert.norm_inf() == 0.0

    def test_feasible_and_excluded_roles(self):
        rng = np.random.default_rng(40)
        net = random_dense_net(rng, hidden=(5,))
        x, y = random_batch(rng, net.input_shape)
        eta = 0.07
        pert = C.awp_perturb(
            net, x, y, C.AttackConfig(epsilon=0.1),
            C.AWPConfig(eta=eta, excluded_roles=("bias",)),
            rng=np.random.default_rng(5),
        )
        assert pert.norm_inf() <= eta + 1e-15
        for (idx, role), d in pert.deltas.items():
            if role == "bias":
                assert np.all(d == 0.0)

    def test_single_step_is_sign_gradient(self):
        # k = 1: the shift is exactly eta * sign(gradient of CE + cert at the
        # unperturbed weights), unless that fails to increase the objective.
        rng = np.random.default_rng(41)
        net = random_dense_net(rng, hidden=(4,))
        x, y = random_batch(rng, net.input_shape)
        acfg = C.AttackConfig(epsilon=0.1)
        eta = 0.05
        centers = C.sabr_centers(net, x, y, acfg, rng=np.random.default_rng(6))
        pert = C.awp_perturb(net, x, y, acfg, C.AWPConfig(eta=eta), centers=centers)

        params = [net.params[pid] for pid in net.param_ids()]
        with T.Tape() as tape:
            for p in params:
                tape.watch(p)
            loss = T.add(
                T.softmax_cross_entropy(C.forward(net, x, bn="running"), y),
                C.ibp_loss_at(net, centers, y, acfg.resolved_tau()),
            )
        grads = tape.gradient(loss)
        tau = acfg.resolved_tau()
        base = combined_objective(net, x, y, centers, tau)
        shifted = combined_objective(C.WeightShiftView(net, pert.deltas), x, y, centers, tau)
        if pert.norm_inf() > 0.0:
            for pid in net.param_ids():
                expect = eta * np.sign(grads[net.params[pid]].data)
                np.testing.assert_allclose(pert.deltas[pid], expect, atol=1e-15)
            assert shifted > base
        else:
            assert shifted == pytest.approx(base)

    def test_monotone_single_weight(self):
        # One perturbable weight, objective strictly increasing in it ->
        # the shift saturates at +eta.
        net = C.build([C.Dense(1, 2)], seed=0, input_shape=(1,))
        net.params[(0, "weight")].data = np.array([[1.0, -1.0]])
        net.params[(0, "bias")].data = np.array([0.0, 0.0])
        x = np.array([[1.0]])
        y = np.array([1])  # raising w_00 raises logit 0 and the loss for label 1
        acfg = C.AttackConfig(epsilon=0.0, tau=0.0)
        pert = C.awp_perturb(net, x, y, acfg, C.AWPConfig(eta=0.25, excluded_roles=("bias",)))
        assert pert.deltas[(0, "weight")][0, 0] == pytest.approx(0.25)

    def test_never_worse_than_unperturbed(self):
        # Fallback: if no iterate improves the objective, the zero shift is
        # returned, so the achieved objective never drops below the base.
        rng = np.random.default_rng(42)
        for trial in range(8):
            net = random_dense_net(rng)
            x, y = random_batch(rng, net.input_shape)
            acfg = C.AttackConfig(epsilon=0.08)
            centers = C.sabr_centers(net, x, y, acfg, rng=np.random.default_rng(trial))
            pert = C.awp_perturb(
                net, x, y, acfg, C.AWPConfig(eta=0.1, awp_steps=3), centers=centers
            )
            tau = acfg.resolved_tau()
            base = combined_objective(net, x, y, centers, tau)
            got = combined_objective(C.WeightShiftView(net, pert.deltas), x, y, centers, tau)
            assert got >= base - 1e-12

    def test_sign_ascent_near_grid_max(self):
        # Two free weights: one signed-gradient step reaches >= 90% of the
        # exhaustive grid maximum (resolution eta/100) of the same objective.
        rng = np.random.default_rng(43)
        eta = 0.2
        for trial in range(5):
            net = C.build([C.Dense(1, 2)], seed=200 + trial, input_shape=(1,))
            randomize_biases(net, rng)
            x = rng.uniform(0.2, 0.8, size=(3, 1))
            y = rng.integers(0, 2, size=3)
            acfg = C.AttackConfig(epsilon=0.05)
            centers = C.sabr_centers(net, x, y, acfg, rng=np.random.default_rng(trial))
            tau = acfg.resolved_tau()
            pert = C.awp_perturb(
                net, x, y, acfg,
                C.AWPConfig(eta=eta, excluded_roles=("bias",)),
                centers=centers,
            )
            achieved = combined_objective(C.WeightShiftView(net, pert.deltas), x, y, centers, tau)

            w = net.params[(0, "weight")]
            orig = w.data.copy()
            grid = np.linspace(-eta, eta, 201)
            best = -np.inf
            for d0 in grid:
                for d1 in grid:
                    w.data = orig + np.array([[d0, d1]])
                    val = combined_objective(net, x, y, centers, tau)
                    best = max(best, val)
            w.data = orig
            assert achieved >= 0.9 * best


class TestAwpLoss:
    def test_eta_zero_equals_unperturbed_combination(self):
        rng = np.random.default_rng(44)
        net = random_dense_net(rng)
        x, y = random_batch(rng, net.input_shape)
        acfg = C.AttackConfig(epsilon=0.1)
        centers = C.sabr_centers(net, x, y, acfg, rng=np.random.default_rng(8))
        lam = 0.6
        got = C.awp_loss(net, x, y, lam, acfg, C.AWPConfig(eta=0.0), centers=centers).item()
        std = T.softmax_cross_entropy(C.forward(net, x, bn="running"), y).item()
        cert = C.ibp_loss_at(net, centers, y, acfg.resolved_tau()).item()
        assert abs(got - (lam * std + (1 - lam) * cert)) < 1e-12

    def test_parts_decomposition(self):
        rng = np.random.default_rng(45)
        net = random_dense_net(rng)
        x, y = random_batch(rng, net.input_shape)
        acfg = C.AttackConfig(epsilon=0.1)
        lam = 0.3
        loss, std, cert, pert, centers = C.awp_loss(
            net, x, y, lam, acfg, C.AWPConfig(eta=0.05),
            rng=np.random.default_rng(9), return_parts=True,
        )
        assert abs(loss.item() - (lam * std + (1 - lam) * cert)) < 1e-12
        assert pert.norm_inf() <= 0.05 + 1e-15
        assert centers.shape == x.shape

    def test_lambda_one_skips_certified_term(self):
        rng = np.random.default_rng(46)
        net = random_dense_net(rng)
        x, y = random_batch(rng, net.input_shape)
        acfg = C.AttackConfig(epsilon=0.1)
        loss, std, cert, pert, _ = C.awp_loss(
            net, x, y, 1.0, acfg, C.AWPConfig(eta=0.05),
            rng=np.random.default_rng(10), return_parts=True,
        )
        assert cert == 0.0
        assert abs(loss.item() - std) < 1e-15

    def test_gradient_matches_fd_with_frozen_shift(self):
        rng = np.random.default_rng(47)
        for trial in range(3):
            net = random_dense_net(rng)
            x, y = random_batch(rng, net.input_shape)
            acfg = C.AttackConfig(epsilon=0.1)
            awp = C.AWPConfig(eta=0.04)
            centers = C.sabr_centers(net, x, y, acfg, rng=np.random.default_rng(trial))
            pert = C.awp_perturb(net, x, y, acfg, awp, centers=centers)

            def loss_fn():
                return C.awp_loss(
                    net, x, y, 0.55, acfg, awp, perturbation=pert, centers=centers
                )

            params = [net.params[pid] for pid in net.param_ids()]
            assert_matches_fd(loss_fn, params)
