"""Training loop: schedule, set-averaged loss, optimizer, metrics, resume."""

import os

import numpy as np
import pytest

import cactus as C
from cactus import tensor as T

from conftest import assert_matches_fd, random_batch, random_dense_net, randomize_biases


def tiny_problem(seed=0, n=96, hidden=(6,)):
    ds = C.make_synthetic("blobs", n=n, noise=0.05, seed=seed)
    layers = C.preset_layers("mlp", ds.input_shape, n_classes=2, hidden=hidden)
    net = C.build(layers, seed=seed, input_shape=ds.input_shape)
    return ds, net


class TestSchedule:
    def test_warmup_then_ramp_then_constant(self):
        cfg = C.TrainConfig(warmup_iters=250, ramp_iters=250, lambda_final=0.75)
        for it in (1, 100, 250):
            lam, scale = C.schedule(it, cfg)
            assert lam == 1.0 and scale == 0.0
        lam, scale = C.schedule(375, cfg)  # halfway up the ramp
        assert lam == pytest.approx(0.875)
        assert scale == pytest.approx(0.5)
        lam, scale = C.schedule(500, cfg)
        assert lam == pytest.approx(0.75)
        assert scale == pytest.approx(1.0)
        lam, scale = C.schedule(10_000, cfg)
        assert lam == pytest.approx(0.75) and scale == 1.0

    def test_zero_ramp_jumps(self):
        cfg = C.TrainConfig(warmup_iters=3, ramp_iters=0, lambda_final=0.6)
        assert C.schedule(3, cfg) == (1.0, 0.0)
        assert C.schedule(4, cfg) == (0.6, 1.0)

    def test_zero_warmup_starts_ramping(self):
        cfg = C.TrainConfig(warmup_iters=0, ramp_iters=10, lambda_final=0.5)
        lam, scale = C.schedule(1, cfg)
        assert scale == pytest.approx(0.1)
        assert lam == pytest.approx(1.0 - 0.05)


class TestCompressionSetValidation:
    def test_rejects_empty_and_missing_identity(self):
        with pytest.raises(C.ConfigError):
            C.CompressionSet([])
        with pytest.raises(C.ConfigError):
            C.CompressionSet([C.Prune(ratio=0.5)])

    def test_fixed_strategy_needs_ratios(self):
        with pytest.raises(C.ConfigError):
            C.CompressionSet([C.Identity(), C.Prune()])
        C.CompressionSet([C.Identity(), C.Prune(ratio=0.5)])  # fine
        C.CompressionSet([C.Identity(), C.Prune()], strategy=C.Sampled())  # fine

    def test_grad_snapshot_detection(self):
        assert not C.CompressionSet([C.Identity(), C.Prune(ratio=0.3)]).needs_grad_snapshot()
        cset = C.CompressionSet([C.Identity(), C.Prune(ratio=0.3, score="grad_mag")])
        assert cset.needs_grad_snapshot()


class TestStrategies:
    def test_sampled_uniform_range(self):
        s = C.Sampled(0.2, 0.6)
        rng = np.random.default_rng(0)
        draws = [s.draw(rng) for _ in range(200)]
        assert all(0.2 <= d <= 0.6 for d in draws)
        assert max(draws) - min(draws) > 0.2  # actually varies

    def test_sampled_choices(self):
        s = C.Sampled(choices=(0.3, 0.7))
        rng = np.random.default_rng(1)
        draws = {s.draw(rng) for _ in range(50)}
        assert draws == {0.3, 0.7}

    def test_progressive_endpoints(self):
        p = C.Progressive(0.2, 0.8)
        assert p.at(0, 5) == pytest.approx(0.2)
        assert p.at(4, 5) == pytest.approx(0.8)
        assert p.at(2, 5) == pytest.approx(0.5)
        assert p.at(0, 1) == pytest.approx(0.2)  # single epoch stays at start

    def test_refresh_draws_and_masks(self):
        rng_net = np.random.default_rng(70)
        net = random_dense_net(rng_net, hidden=(6,))
        cset = C.CompressionSet([C.Identity(), C.Prune()], strategy=C.Sampled(0.4, 0.5))
        cset.refresh(net, rng=np.random.default_rng(2))
        prune = cset.elements[1]
        assert prune.mask is not None
        assert 0.4 <= prune.last_ratio <= 0.5
        assert prune.mask.spec.ratio == prune.last_ratio

    def test_progressive_refresh_uses_epoch(self):
        rng_net = np.random.default_rng(71)
        net = random_dense_net(rng_net, hidden=(6,))
        cset = C.CompressionSet([C.Identity(), C.Prune()], strategy=C.Progressive(0.1, 0.9))
        cset.refresh(net, rng=np.random.default_rng(3), epoch=0, total_epochs=3)
        assert cset.elements[1].last_ratio == pytest.approx(0.1)
        cset.refresh(net, rng=np.random.default_rng(3), epoch=2, total_epochs=3)
        assert cset.elements[1].last_ratio == pytest.approx(0.9)


class TestCombinedLoss:
    def test_lambda_mixes_parts_linearly(self):
        rng = np.random.default_rng(72)
        net = random_dense_net(rng)
        x, y = random_batch(rng, net.input_shape)
        acfg = C.AttackConfig(epsilon=0.1)
        centers = C.sabr_centers(net, x, y, acfg, rng=np.random.default_rng(4))
        parts = C.combined_loss(net, x, y, 0.5, acfg, centers=centers, return_parts=True)
        assert parts.loss.item() == pytest.approx(0.5 * parts.std + 0.5 * parts.cert, abs=1e-12)
        # Same centers, different weighting: recompute both endpoints.
        low = C.combined_loss(net, x, y, 0.0, acfg, centers=centers)
        high = C.combined_loss(net, x, y, 1.0, acfg, centers=centers)
        assert low.item() == pytest.approx(parts.cert, abs=1e-12)
        assert high.item() == pytest.approx(parts.std, abs=1e-12)

    def test_lambda_one_skips_certified_term(self):
        rng = np.random.default_rng(73)
        net = random_dense_net(rng)
        x, y = random_batch(rng, net.input_shape)
        acfg = C.AttackConfig(epsilon=0.1)
        parts = C.combined_loss(net, x, y, 1.0, acfg, rng=np.random.default_rng(5), return_parts=True)
        assert parts.cert == 0.0
        expect = T.softmax_cross_entropy(C.forward(net, x, bn="running"), y).item()
        assert parts.loss.item() == pytest.approx(expect, abs=1e-12)


class TestCactusLoss:
    def build_set_and_refresh(self, net, rng):
        cset = C.CompressionSet(
            [C.Identity(), C.Prune(ratio=0.5)], strategy=C.Fixed()
        )
        cset.refresh(net, rng=rng)
        return cset

    def test_rejects_bad_lambda_and_unrefreshed_mask(self):
        rng = np.random.default_rng(74)
        net = random_dense_net(rng)
        x, y = random_batch(rng, net.input_shape)
        acfg = C.AttackConfig(epsilon=0.1)
        cset = C.CompressionSet([C.Identity(), C.Prune(ratio=0.5)])
        with pytest.raises(C.ConfigError):
            C.cactus_loss(net, cset, x, y, 1.5, acfg)
        with pytest.raises(C.ConfigError):
            C.cactus_loss(net, cset, x, y, 0.5, acfg, rng=np.random.default_rng(0))

    def test_equals_mean_of_element_losses(self):
        # Set-averaged objective vs. independently computed element losses.
        rng = np.random.default_rng(75)
        net = random_dense_net(rng, hidden=(5,))
        x, y = random_batch(rng, net.input_shape)
        acfg = C.AttackConfig(epsilon=0.08)
        cset = self.build_set_and_refresh(net, np.random.default_rng(6))
        res = C.cactus_loss(net, cset, x, y, 0.5, acfg, rng=np.random.default_rng(7))
        # Recompute each element independently with the frozen selections.
        identity_loss = C.combined_loss(
            net, x, y, 0.5, acfg, centers=res.selections[0]
        ).item()
        view = C.apply_mask(net, cset.elements[1].mask)
        prune_loss = C.combined_loss(
            view, x, y, 0.5, acfg, centers=res.selections[1], bn="running"
        ).item()
        by_hand = 0.5 * (identity_loss + prune_loss)
        assert abs(res.loss.item() - by_hand) <= 1e-9
        assert res.element_losses == pytest.approx([identity_loss, prune_loss], abs=1e-12)

    def test_gradient_is_mean_of_element_gradients(self):
        rng = np.random.default_rng(76)
        net = random_dense_net(rng, hidden=(4,))
        x, y = random_batch(rng, net.input_shape)
        acfg = C.AttackConfig(epsilon=0.06)
        cset = self.build_set_and_refresh(net, np.random.default_rng(8))
        seed_res = C.cactus_loss(net, cset, x, y, 0.5, acfg, rng=np.random.default_rng(9))
        sels = seed_res.selections
        params = [net.params[pid] for pid in net.param_ids()]

        def total_fn():
            return C.cactus_loss(net, cset, x, y, 0.5, acfg, selections=sels).loss

        with T.Tape() as tape:
            for p in params:
                tape.watch(p)
            loss = total_fn()
        total_grads = tape.gradient(loss)

        per_element = []
        for keep in (0, 1):
            with T.Tape() as tape:
                for p in params:
                    tape.watch(p)
                if keep == 0:
                    l = C.combined_loss(net, x, y, 0.5, acfg, centers=sels[0])
                else:
                    view = C.apply_mask(net, cset.elements[1].mask)
                    l = C.combined_loss(view, x, y, 0.5, acfg, centers=sels[1], bn="running")
            per_element.append(tape.gradient(l))
        for p in params:
            mean_g = 0.5 * (per_element[0][p].data + per_element[1][p].data)
            np.testing.assert_allclose(total_grads[p].data, mean_g, atol=1e-12)
        # And the aggregate matches finite differences.
        assert_matches_fd(total_fn, params)

    def test_quant_proxy_element_contributes_awp_loss(self):
        rng = np.random.default_rng(77)
        net = random_dense_net(rng, hidden=(4,))
        x, y = random_batch(rng, net.input_shape)
        acfg = C.AttackConfig(epsilon=0.08)
        cset = C.CompressionSet([C.Identity(), C.QuantProxy(C.AWPConfig(eta=0.05))])
        res = C.cactus_loss(net, cset, x, y, 0.5, acfg, rng=np.random.default_rng(10))
        centers, pert = res.selections[1]
        expect = C.awp_loss(
            net, x, y, 0.5, acfg, C.AWPConfig(eta=0.05), perturbation=pert, centers=centers
        ).item()
        assert res.element_losses[1] == pytest.approx(expect, abs=1e-12)


class TestRefreshSet:
    def test_grad_mag_requires_batch(self):
        rng = np.random.default_rng(78)
        net = random_dense_net(rng)
        cset = C.CompressionSet(
            [C.Identity(), C.Prune(ratio=0.4, score="grad_mag")]
        )
        with pytest.raises(C.ConfigError):
            C.refresh_set(net, cset, None, rng=np.random.default_rng(0))

    def test_grad_mag_snapshot_used(self):
        rng = np.random.default_rng(79)
        net = random_dense_net(rng, hidden=(5,))
        x, y = random_batch(rng, net.input_shape)
        cset = C.CompressionSet([C.Identity(), C.Prune(ratio=0.4, score="grad_mag")])
        C.refresh_set(
            net, cset, (x, y), lam=1.0, attack_cfg=C.AttackConfig(epsilon=0.05),
            rng=np.random.default_rng(1),
        )
        mask = cset.elements[1].mask
        assert mask is not None and mask.spec.score == "grad_mag"
        zeros = sum(int((mask.masks[pid] == 0).sum()) for pid in C.target_param_ids(net))
        assert zeros > 0


class TestAdam:
    def test_single_step_closed_form(self):
        net = C.build([C.Dense(1, 1)], seed=0, input_shape=(1,))
        w = net.params[(0, "weight")]
        b = net.params[(0, "bias")]
        w.data = np.array([[2.0]])
        b.data = np.array([1.0])
        opt = C.Adam(net, lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0)
        g = {(0, "weight"): np.array([[0.5]]), (0, "bias"): np.array([-0.25])}
        opt.step(g)
        # First step: mhat = g, vhat = g^2, update = lr * g / (|g| + eps).
        assert w.data[0, 0] == pytest.approx(2.0 - 0.1 * 0.5 / (0.5 + 1e-8))
        assert b.data[0] == pytest.approx(1.0 + 0.1 * 0.25 / (0.25 + 1e-8))

    def test_weight_decay_added_to_gradient(self):
        net = C.build([C.Dense(1, 1)], seed=0, input_shape=(1,))
        w = net.params[(0, "weight")]
        w.data = np.array([[4.0]])
        net.params[(0, "bias")].data = np.array([0.0])
        opt = C.Adam(net, lr=0.1, weight_decay=0.5)
        zero = {(0, "weight"): np.array([[0.0]]), (0, "bias"): np.array([0.0])}
        opt.step(zero)
        eff = 0.5 * 4.0  # decay * weight
        assert w.data[0, 0] == pytest.approx(4.0 - 0.1 * eff / (eff + 1e-8))

    def test_state_arrays_roundtrip(self):
        rng = np.random.default_rng(80)
        net = random_dense_net(rng, hidden=(4,))
        opt = C.Adam(net, lr=0.01)
        g = {pid: rng.normal(size=p.data.shape) for pid, p in net.params.items()}
        opt.step(g)
        opt.step(g)
        arrays = opt.state_arrays()
        clone = C.Adam(net, lr=0.01)
        clone.load_state_arrays(arrays, opt.t)
        for pid in net.param_ids():
            np.testing.assert_array_equal(clone.m[pid], opt.m[pid])
            np.testing.assert_array_equal(clone.v[pid], opt.v[pid])
        with pytest.raises(C.ConfigError):
            clone.load_state_arrays({"adam_m": arrays["adam_m"][:-1], "adam_v": arrays["adam_v"]}, 2)


class TestTrainLoop:
    def test_learns_separable_blobs(self):
        ds, net = tiny_problem(seed=1)
        cfg = C.TrainConfig(
            epochs=12, batch_size=32, lr=1e-2, warmup_iters=10**6, seed=1,
            attack=C.AttackConfig(epsilon=0.05),
        )
        res = C.train(net, ds.x_train, ds.y_train, cfg, C.CompressionSet([C.Identity()]))
        assert res.rows[-1]["train_acc"] == 1.0
        net.mode = "eval"
        pred = C.predict(net, ds.x_test)
        assert np.mean(pred == ds.y_test) == 1.0

    def test_metric_rows_follow_schedule(self):
        ds, net = tiny_problem(seed=2)
        cfg = C.TrainConfig(
            epochs=2, batch_size=24, lr=1e-3, warmup_iters=3, ramp_iters=4,
            lambda_final=0.75, seed=2, attack=C.AttackConfig(epsilon=0.1),
        )
        res = C.train(net, ds.x_train, ds.y_train, cfg, C.CompressionSet([C.Identity()]))
        by_iter = {r["iter"]: r for r in res.rows}
        assert by_iter[1]["lambda"] == 1.0 and by_iter[1]["eps"] == 0.0
        assert by_iter[3]["lambda"] == 1.0
        assert by_iter[5]["lambda"] == pytest.approx(1.0 - 0.25 * 2 / 4)
        assert by_iter[5]["eps"] == pytest.approx(0.1 * 2 / 4)
        assert by_iter[8]["lambda"] == pytest.approx(0.75)
        assert by_iter[8]["eps"] == pytest.approx(0.1)
        # During warmup the certified term is skipped entirely.
        assert by_iter[1]["loss_cert"] == 0.0
        assert by_iter[8]["loss_cert"] > 0.0

    def test_deterministic_and_csv_format(self, tmp_path):
        ds, net1 = tiny_problem(seed=3)
        _, net2 = tiny_problem(seed=3)
        cfg = C.TrainConfig(
            epochs=2, batch_size=32, lr=1e-3, warmup_iters=2, ramp_iters=2, seed=3,
            attack=C.AttackConfig(epsilon=0.1),
        )
        cset1 = C.CompressionSet([C.Identity(), C.Prune()], strategy=C.Sampled())
        cset2 = C.CompressionSet([C.Identity(), C.Prune()], strategy=C.Sampled())
        out1, out2 = tmp_path / "a", tmp_path / "b"
        r1 = C.train(net1, ds.x_train, ds.y_train, cfg, cset1, out_dir=str(out1))
        r2 = C.train(net2, ds.x_train, ds.y_train, cfg, cset2, out_dir=str(out2))
        csv1 = (out1 / "metrics.csv").read_text()
        csv2 = (out2 / "metrics.csv").read_text()
        assert csv1 == csv2  # bit-identical
        lines = csv1.strip().split("\n")
        assert lines[0] == ",".join(r1.header)
        assert r1.header[:7] == ["iter", "epoch", "lambda", "eps", "loss_total", "loss_std", "loss_cert"]
        assert r1.header[7:] == ["elem_0", "elem_1", "train_acc"]
        # Floats are written with repr so they parse back bit-exactly.
        first = lines[1].split(",")
        assert first[0] == "1" and first[1] == "0"
        for tok, col in zip(first, r1.header):
            if col in ("iter", "epoch"):
                int(tok)
            else:
                assert repr(float(tok)) == tok
        row0 = r1.rows[0]
        assert float(first[4]) == row0["loss_total"]

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_raises(self):
        ds, net = tiny_problem(seed=4)
        net.params[(0, "weight")].data = np.full_like(
            net.params[(0, "weight")].data, 1e308
        )
        cfg = C.TrainConfig(epochs=1, batch_size=32, lr=1e-3, seed=4,
                            attack=C.AttackConfig(epsilon=0.1))
        with pytest.raises(C.DivergenceError):
            C.train(net, ds.x_train, ds.y_train, cfg, C.CompressionSet([C.Identity()]))

    def test_empty_data_rejected(self):
        _, net = tiny_problem(seed=5)
        cfg = C.TrainConfig(epochs=1, seed=5, attack=C.AttackConfig(epsilon=0.1))
        with pytest.raises(C.ConfigError):
            C.train(net, np.zeros((0, 2)), np.zeros(0, dtype=np.int64), cfg,
                    C.CompressionSet([C.Identity()]))

    def test_per_element_updates_steps_per_element(self, tmp_path):
        ds, net = tiny_problem(seed=6, n=64)
        cfg = C.TrainConfig(
            epochs=1, batch_size=32, lr=1e-3, seed=6, per_element_updates=True,
            warmup_iters=0, ramp_iters=0, attack=C.AttackConfig(epsilon=0.05),
        )
        cset = C.CompressionSet([C.Identity(), C.Prune(ratio=0.5)])
        res = C.train(net, ds.x_train, ds.y_train, cfg, cset, out_dir=str(tmp_path))
        ckpt = C.load_checkpoint(res.checkpoints[-1])
        # 64 samples / batch 32 = 2 iterations, 2 elements -> 4 optimizer steps.
        assert ckpt.meta["adam_t"] == 4
        assert ckpt.meta["iteration"] == 2

    def test_resume_is_bit_identical(self, tmp_path):
        ds, net_full = tiny_problem(seed=7)
        _, net_half = tiny_problem(seed=7)
        cfg = C.TrainConfig(
            epochs=4, batch_size=32, lr=1e-3, warmup_iters=2, ramp_iters=2, seed=7,
            checkpoint_every=1, attack=C.AttackConfig(epsilon=0.1),
        )
        cset_a = C.CompressionSet([C.Identity(), C.Prune()], strategy=C.Sampled())
        cset_b = C.CompressionSet([C.Identity(), C.Prune()], strategy=C.Sampled())
        full_dir, half_dir, resume_dir = (
            tmp_path / "full", tmp_path / "half", tmp_path / "resume"
        )
        full = C.train(net_full, ds.x_train, ds.y_train, cfg, cset_a, out_dir=str(full_dir))

        half_cfg = C.TrainConfig(
            epochs=2, batch_size=32, lr=1e-3, warmup_iters=2, ramp_iters=2, seed=7,
            checkpoint_every=1, attack=C.AttackConfig(epsilon=0.1),
        )
        C.train(net_half, ds.x_train, ds.y_train, half_cfg, cset_b, out_dir=str(half_dir))
        ckpt = C.load_checkpoint(str(half_dir / "ckpt_epoch2.ckpt"))
        cset_c = C.CompressionSet([C.Identity(), C.Prune()], strategy=C.Sampled())
        resumed = C.resume_train(ckpt, cfg, ds.x_train, ds.y_train, cset_c, out_dir=str(resume_dir))

        tail = [r for r in full.rows if r["epoch"] >= 2]
        assert len(resumed.rows) == len(tail)
        for a, b in zip(tail, resumed.rows):
            assert a == b
        # Final checkpoints agree byte for byte.
        full_bytes = (full_dir / "ckpt_epoch4.ckpt").read_bytes()
        resume_bytes = (resume_dir / "ckpt_epoch4.ckpt").read_bytes()
        assert full_bytes == resume_bytes

    def test_resume_rejects_foreign_checkpoint(self, tmp_path):
        ds, net = tiny_problem(seed=8, n=48)
        path = tmp_path / "plain.ckpt"
        C.save_checkpoint(str(path), net, meta={})
        cfg = C.TrainConfig(epochs=2, seed=8, attack=C.AttackConfig(epsilon=0.1))
        with pytest.raises(C.ConfigError):
            C.resume_train(
                C.load_checkpoint(str(path)), cfg, ds.x_train, ds.y_train,
                C.CompressionSet([C.Identity()]),
            )
