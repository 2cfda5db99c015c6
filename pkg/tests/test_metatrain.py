"""Training machinery: inner loops, losses, schedules, checkpoints."""

import dataclasses

import numpy as np
import pytest

from bhmaml import autodiff as ad
from bhmaml import metatrain as mt
from bhmaml import nn
from bhmaml.autodiff import Tensor
from bhmaml.episodes import make_synthetic, sample_episode
from bhmaml.errors import ConfigError, NumericalError


def tiny_cfg(method="bhmaml_g", **kw):
    base = dict(
        method=method, n_way=3, k_shot=1, n_query=5, encoder="mlp", input_shape=(2,),
        enc_hidden=16, emb=8, hyper_width=16, c_dim=8, flow_hidden=8, flow_steps=4,
        p_samples=2, gamma_max=1e-3, gamma_warmup_epochs=4, lr=0.01,
        milestones=(2, 4), epochs=2, episodes_per_epoch=8, batch_tasks=2,
        val_episodes=4, inner_lr=0.3, inner_steps=2, seed=0,
    )
    base.update(kw)
    return mt.TrainConfig(**base)


@pytest.fixture(scope="module")
def blobs():
    return make_synthetic("blobs", 12, 2, 24, 0.1, seed=0)


class TestConfig:
    def test_validation(self):
        with pytest.raises(ConfigError):
            tiny_cfg(method="unknown").validate()
        with pytest.raises(ConfigError):
            tiny_cfg(p_samples=0).validate()
        with pytest.raises(ConfigError):
            tiny_cfg(lr_decay=1.5).validate()
        with pytest.raises(ConfigError):
            tiny_cfg(milestones=(5, 3)).validate()

    def test_json_round_trip(self):
        cfg = tiny_cfg()
        again = mt.TrainConfig.from_json(cfg.to_json())
        assert again == cfg

    def test_presets_match_hyperparameter_tables(self):
        g = mt.preset("omniglot_emnist_1shot_g")
        assert (g.lr, g.hyper_width, g.milestones, g.gamma_max, g.p_samples, g.epochs) == (
            0.01, 512, (51, 550), 1e-3, 5, 2048,
        )
        cub = mt.preset("cub_1shot_g")
        assert (cub.lr, cub.hyper_width, cub.gamma_max, cub.epochs) == (0.01, 512, 1e-4, 4000)
        mini = mt.preset("mini_imagenet_1shot_g")
        assert (mini.lr, mini.milestones, mini.p_samples) == (0.001, (101, 1100), 7)
        cnf = mt.preset("cub_1shot_cnf")
        assert (cnf.gamma_max, cnf.lr) == (1e-6, 0.001)


class TestSchedules:
    def test_gamma_ramp(self):
        cfg = tiny_cfg(gamma_max=1e-4, gamma_warmup_epochs=10)
        assert mt.anneal_gamma(0, cfg) == 0.0
        assert mt.anneal_gamma(5, cfg) == pytest.approx(5e-5)
        assert mt.anneal_gamma(10, cfg) == 1e-4
        assert mt.anneal_gamma(1000, cfg) == 1e-4

    def test_gamma_warmup_defaults_to_first_milestone(self):
        cfg = tiny_cfg(gamma_warmup_epochs=None, milestones=(8, 20))
        assert cfg.warmup() == 8

    def test_lr_schedule_exact(self):
        cfg = tiny_cfg(lr=0.01, milestones=(3, 7), lr_decay=0.3)
        for epoch in range(10):
            passed = sum(m <= epoch for m in (3, 7))
            assert mt.lr_at(epoch, cfg) == 0.01 * 0.3**passed


class TestMamlInner:
    def test_zero_step_size_is_identity(self, blobs):
        cfg = tiny_cfg(method="maml")
        state = mt.build_model(cfg, np.random.default_rng(1))
        ep = sample_episode(blobs, "train", 3, 1, 5, np.random.default_rng(2))
        adapted = mt.maml_inner(state, cfg, ep.support_x, ep.support_y, alpha=0.0, steps=3)
        np.testing.assert_array_equal(adapted.head["weight"].data, state.theta.head["weight"].data)

    def test_quadratic_hand_gradient(self):
        # one gradient step on L = (w - 2)^2 from w = 0 at alpha = 0.25 gives 1.0
        w = Tensor(0.0, requires_grad=True)
        diff = ad.sub(w, Tensor(2.0))
        (g,) = ad.backward(ad.mul(diff, diff), [w])
        w_new = ad.sub(w, ad.mul(g, Tensor(0.25)))
        assert w_new.data == 1.0

    def test_first_order_updates_only_head_by_default(self, blobs):
        cfg = tiny_cfg(method="maml")
        state = mt.build_model(cfg, np.random.default_rng(3))
        ep = sample_episode(blobs, "train", 3, 1, 5, np.random.default_rng(4))
        adapted = mt.maml_inner(state, cfg, ep.support_x, ep.support_y)
        assert adapted.encoder["fc1/weight"] is state.theta.encoder["fc1/weight"]
        assert not np.array_equal(adapted.head["weight"].data, state.theta.head["weight"].data)

    def test_second_order_meta_gradient_matches_fd(self):
        """Meta-gradient of the post-adaptation loss on a 2-parameter toy."""
        rng = np.random.default_rng(5)
        x_s, y_s = rng.standard_normal((4, 1)), rng.standard_normal((4, 1))
        x_q, y_q = rng.standard_normal((6, 1)), rng.standard_normal((6, 1))
        w0 = Tensor(np.array([[0.3]]), requires_grad=True)
        b0 = Tensor(np.array([0.1]), requires_grad=True)
        alpha = 0.2

        def outer():
            w, b = w0, b0
            for _ in range(2):
                err = ad.sub(nn.linear(Tensor(x_s), w, b), Tensor(y_s))
                loss = ad.reduce_mean(ad.mul(err, err))
                gw, gb = ad.backward(loss, [w, b], create_graph=True)
                w = ad.sub(w, ad.mul(gw, Tensor(alpha)))
                b = ad.sub(b, ad.mul(gb, Tensor(alpha)))
            err = ad.sub(nn.linear(Tensor(x_q), w, b), Tensor(y_q))
            return ad.reduce_mean(ad.mul(err, err))

        err = ad.grad_check(outer, [w0, b0], eps=1e-5)
        assert err < 1e-5

    def test_second_order_episode_loss_runs(self, blobs):
        cfg = tiny_cfg(method="maml", second_order=True)
        state = mt.build_model(cfg, np.random.default_rng(6))
        ep = sample_episode(blobs, "train", 3, 1, 5, np.random.default_rng(7))
        loss = mt.episode_loss(state, cfg, ep, 0.0, np.random.default_rng(8))
        grads = ad.backward(loss, [state.theta.head["weight"]])
        assert np.isfinite(grads[0].data).all()


class TestHyperMamlUpdate:
    def test_zero_init_final_layer_is_identity_update(self, blobs):
        cfg = tiny_cfg(method="hypermaml")
        state = mt.build_model(cfg, np.random.default_rng(9))
        ep = sample_episode(blobs, "train", 3, 1, 5, np.random.default_rng(10))
        from bhmaml.targetnet import flatten_head

        flat = mt.hypermaml_update(state, ep)
        np.testing.assert_array_equal(flat.data, flatten_head(state.theta.head).data)

    def test_update_touches_only_head(self, blobs):
        cfg = tiny_cfg(method="hypermaml")
        state = mt.build_model(cfg, np.random.default_rng(11))
        enc_before = {n: t.data.copy() for n, t in state.theta.encoder.items()}
        ep = sample_episode(blobs, "train", 3, 1, 5, np.random.default_rng(12))
        mt.hypermaml_update(state, ep)
        for n, t in state.theta.encoder.items():
            np.testing.assert_array_equal(t.data, enc_before[n])

    def test_agrees_with_gaussian_at_sigma_floor(self, blobs):
        """hypermaml == bhmaml_g with sigma at floor, frozen eps = 0, gamma = 0."""
        cfg_g = tiny_cfg(method="bhmaml_g", p_samples=1)
        state_g = mt.build_model(cfg_g, np.random.default_rng(13))
        rng = np.random.default_rng(14)
        for t in state_g.phi.tensors():
            t.data = rng.standard_normal(t.shape) * 0.2
        # force sigma to the floor; derive the point hypernet from the mu slice
        emb = cfg_g.emb
        w3, b3 = state_g.phi["fc3/weight"], state_g.phi["fc3/bias"]
        w3.data[:, emb + 1 :] = 0.0
        b3.data[emb + 1 :] = -40.0
        cfg_p = dataclasses.replace(cfg_g, method="hypermaml")
        state_p = mt.build_model(cfg_p, np.random.default_rng(13))
        for n, t in state_p.phi.items():
            if n == "fc3/weight":
                t.data = w3.data[:, : emb + 1].copy()
            elif n == "fc3/bias":
                t.data = b3.data[: emb + 1].copy()
            else:
                t.data = state_g.phi[n].data.copy()
        for n, t in state_p.theta.encoder.items():
            t.data = state_g.theta.encoder[n].data.copy()
        for n, t in state_p.theta.head.items():
            t.data = state_g.theta.head[n].data.copy()
        d = state_g.net.head_dim
        for i in range(20):
            ep = sample_episode(blobs, "train", 3, 1, 5, np.random.default_rng(100 + i))
            lg = mt.episode_loss(state_g, cfg_g, ep, 0.0, None, noise=np.zeros((1, d)))
            lp = mt.episode_loss(state_p, cfg_p, ep, 0.0, np.random.default_rng(0))
            assert abs(lg.item() - lp.item()) < 1e-6


class TestEpisodeLoss:
    def test_untrained_loss_is_log_n_plus_kl(self, blobs):
        """Zero universal head and zero-init hypernetwork: the posterior mean
        gives uniform logits, so the frozen-noise loss is ln N + gamma*KL."""
        cfg = tiny_cfg(method="bhmaml_g", n_way=3)
        state = mt.build_model(cfg, np.random.default_rng(15))
        state.theta.head["weight"].data[:] = 0.0
        state.theta.head["bias"].data[:] = 0.0
        ep = sample_episode(blobs, "train", 3, 1, 5, np.random.default_rng(16))
        gamma = 1e-3
        d = state.net.head_dim
        loss = mt.episode_loss(state, cfg, ep, gamma, None,
                               noise=np.zeros((cfg.p_samples, d)))
        from bhmaml import posteriors as po
        from bhmaml.hypernet import enhance, hyper_forward
        from bhmaml.targetnet import flatten_head

        es = enhance(ep, state.net, state.theta, state.stats)
        out = hyper_forward(es, state.phi, "gaussian", cfg.emb)
        kl = po.gaussian_kl(po.gaussian_from_hyper(flatten_head(state.theta.head),
                                                   out.mu, out.rho)).item()
        assert abs(loss.item() - (np.log(3) + gamma * kl)) < 1e-12

    def test_loss_decreases_on_separable_blobs(self, blobs):
        """Means over windows of 10 optimizer steps decrease monotonically."""
        cfg = tiny_cfg(method="bhmaml_g", p_samples=2)
        state = mt.build_model(cfg, np.random.default_rng(18))
        params = [t for _, t in mt.named_parameters(state)]
        opt = mt.Adam(params, 0.003)
        data_rng = np.random.default_rng(19)
        noise_rng = np.random.default_rng(20)
        losses = []
        for _ in range(50):
            total = None
            for _ in range(4):
                ep = sample_episode(blobs, "train", 3, 1, 5, data_rng)
                loss = mt.episode_loss(state, cfg, ep, 0.0, noise_rng)
                total = loss if total is None else ad.add(total, loss)
            total = ad.mul(total, Tensor(0.25))
            grads = ad.backward(total, params)
            opt.step(grads)
            losses.append(total.item())
        w = np.array(losses).reshape(5, 10).mean(axis=1)
        assert (np.diff(w) < 0).all()

    def test_support_likelihood_target(self, blobs):
        cfg = tiny_cfg(method="bhmaml_g")
        state = mt.build_model(cfg, np.random.default_rng(21))
        ep = sample_episode(blobs, "train", 3, 1, 5, np.random.default_rng(22))
        d = state.net.head_dim
        noise = np.zeros((cfg.p_samples, d))
        l_q = mt.episode_loss(state, cfg, ep, 0.0, None, noise=noise, likelihood="query")
        l_s = mt.episode_loss(state, cfg, ep, 0.0, None, noise=noise, likelihood="support")
        assert l_q.item() != l_s.item()


class TestTrain:
    def test_bitwise_deterministic_checkpoints(self, blobs):
        cfg = tiny_cfg()
        b1 = mt.checkpoint_bytes(mt.train(cfg, blobs))
        b2 = mt.checkpoint_bytes(mt.train(cfg, blobs))
        assert b1 == b2

    def test_checkpoint_round_trip_bit_exact(self, blobs, tmp_path):
        ck = mt.train(tiny_cfg(method="bhmaml_cnf"), blobs)
        path = str(tmp_path / "model.ckpt")
        mt.save_checkpoint(ck, path)
        again = mt.load_checkpoint(path)
        assert mt.checkpoint_bytes(again) == mt.checkpoint_bytes(ck)
        for (n1, t1), (n2, t2) in zip(
            mt.named_parameters(ck.state), mt.named_parameters(again.state)
        ):
            assert n1 == n2
            np.testing.assert_array_equal(t1.data, t2.data)

    def test_method_field_presence(self, blobs):
        for method, has_phi, has_eta in (
            ("maml", False, False), ("hypermaml", True, False),
            ("bhmaml_g", True, False), ("bhmaml_cnf", True, True),
        ):
            ck = mt.train(tiny_cfg(method=method, epochs=1, episodes_per_epoch=4), blobs)
            assert (ck.state.phi is not None) == has_phi
            assert (ck.state.eta is not None) == has_eta

    def test_corrupted_magic_rejected(self, blobs):
        from bhmaml.errors import FormatError

        blob = mt.checkpoint_bytes(mt.train(tiny_cfg(epochs=1, episodes_per_epoch=4), blobs))
        with pytest.raises(FormatError):
            mt.checkpoint_from_bytes(b"XXXX" + blob[4:])

    def test_dataset_not_mutated(self, blobs):
        before = {c: arr.copy() for c, arr in blobs.classes.items()}
        mt.train(tiny_cfg(epochs=1, episodes_per_epoch=4), blobs)
        for c, arr in blobs.classes.items():
            np.testing.assert_array_equal(arr, before[c])

    def test_nonfinite_loss_aborts_with_snapshot(self, blobs, tmp_path, monkeypatch):
        cfg = tiny_cfg(epochs=1, episodes_per_epoch=2, batch_tasks=1)
        real = mt.episode_loss

        def poisoned(*args, **kwargs):
            out = real(*args, **kwargs)
            out.data = np.array(np.nan)
            return out

        monkeypatch.setattr(mt, "episode_loss", poisoned)
        out_dir = str(tmp_path / "run")
        with pytest.raises(NumericalError, match="epoch 0"):
            mt.train(cfg, blobs, out_dir=out_dir)
        assert (tmp_path / "run" / "diagnostic.ckpt").exists()

    def test_input_shape_mismatch(self, blobs):
        with pytest.raises(ConfigError):
            mt.train(tiny_cfg(input_shape=(5,)), blobs)
