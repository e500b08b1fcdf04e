"""Local training procedures: the composite objective, path
rectification, prototype computation, and the baselines."""
import dataclasses

import numpy as np
import pytest

from fedsim import algorithms as alg
from fedsim import data as dat
from fedsim import nn
from fedsim import protocol as proto
from fedsim.diag import grad_check_report, quadratic_oracle_report


def tiny_model(seed=0, input_dim=4, hidden=(6, 5), classes=2):
    return nn.init_mlp(input_dim, hidden, classes, np.random.default_rng(seed))


def make_client(shard, seed=0, cid=0):
    return proto.ClientState(
        id=cid, shard=np.asarray(shard),
        data_rng=np.random.default_rng(seed),
        surrogate_rng=np.random.default_rng(seed + 1000))


def toy_batches(seed=0, classes=2):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((6, 4))
    y = rng.integers(0, classes, size=6)
    xs = rng.standard_normal((8, 4))
    ys = np.repeat(np.arange(classes), 8 // classes)
    return (x, y), (xs, ys)


class TestLocalPrototypes:
    def test_degenerate_surrogate_with_identity_extractor(self):
        means = np.abs(np.random.default_rng(0).standard_normal((3, 4))) + 0.1
        spec = dat.SurrogateSpec(3, 4, means, class_std=0.0, n_per_class=5, seed=0)
        surrogate = dat.gen_surrogate(spec)
        model = nn.MlpModel(extractor=[(np.eye(4), np.zeros(4))],
                            classifier=(np.ones((4, 3)), np.zeros(3)))
        protos = alg.compute_local_prototypes(model, surrogate)
        assert np.allclose(protos.means, means, atol=1e-15)

    def test_zero_extractor_gives_zero_prototypes(self):
        model = tiny_model(classes=3)
        for w, b in model.extractor:
            w[:] = 0.0
            b[:] = 0.0
        surrogate = dat.gen_surrogate(dat.make_surrogate_spec(3, 4, seed=1, n_per_class=4))
        protos = alg.compute_local_prototypes(model, surrogate)
        assert np.array_equal(protos.means, np.zeros((3, model.embed_dim)))

    def test_two_points_give_midpoint(self):
        feats = np.array([[1.0, 3.0], [3.0, 5.0], [2.0, 2.0], [4.0, 4.0]])
        surrogate = dat.LabeledDataset(feats, np.array([0, 0, 1, 1]), 2)
        model = nn.MlpModel(extractor=[(np.eye(2), np.zeros(2))],
                            classifier=(np.ones((2, 2)), np.zeros(2)))
        protos = alg.compute_local_prototypes(model, surrogate)
        assert np.array_equal(protos.means, [[2.0, 4.0], [3.0, 3.0]])

    def test_missing_class_rejected(self):
        ds = dat.LabeledDataset(np.zeros((3, 2)), np.array([0, 0, 2]), 3)
        with pytest.raises(ValueError, match="missing class"):
            alg.compute_local_prototypes(tiny_model(input_dim=2, classes=3), ds)


class TestCompositeObjective:
    def test_ablation_reduces_to_plain_cross_entropy(self):
        model = tiny_model(seed=1)
        local, surr = toy_batches(seed=2)
        hyper = alg.FedGpsHyper(lambda1=0.0, lambda2=0.0, surrogate_ce=0.0)
        loss_a, grad_a = alg.fedgps_loss_and_grad(model, local, surr, None, hyper)
        loss_b, grad_b = alg.ce_loss_and_grad(model, local[0], local[1], hyper.lambda3)
        assert loss_a == loss_b
        assert np.array_equal(grad_a, grad_b)

    def test_stage1_zero_under_perfect_alignment(self):
        # identical local and surrogate batches through any extractor give
        # identical per-class embedding means, so the stage-1 term vanishes
        model = tiny_model(seed=3)
        rng = np.random.default_rng(4)
        x = rng.standard_normal((8, 4))
        y = np.repeat(np.arange(2), 4)
        base = alg.fedgps_loss_and_grad(
            model, (x, y), (x, y), None,
            alg.FedGpsHyper(lambda1=0.0, lambda2=0.0, lambda3=0.0))[0]
        with_stage1 = alg.fedgps_loss_and_grad(
            model, (x, y), (x, y), None,
            alg.FedGpsHyper(lambda1=0.7, lambda2=0.0, lambda3=0.0))[0]
        assert with_stage1 == pytest.approx(base, abs=1e-12)

    def test_gradient_matches_finite_differences_everywhere(self):
        report = grad_check_report()
        assert report["passed"], report
        assert report["max_rel_error"] < 1e-4

    def test_nan_raises_diverged(self):
        model = tiny_model(seed=5)
        x = np.full((2, 4), np.nan)
        with pytest.raises(alg.DivergedError):
            alg.ce_loss_and_grad(model, x, np.array([0, 1]))

    def test_zero_prototypes_allowed(self):
        model = tiny_model(seed=6)
        local, surr = toy_batches(seed=7)
        hyper = alg.FedGpsHyper()
        loss, grad = alg.fedgps_loss_and_grad(model, local, surr,
                                              np.zeros((2, model.embed_dim)), hyper)
        assert np.isfinite(loss) and np.all(np.isfinite(grad))


class TestRectifiedGradient:
    def closure(self, x, y):
        def fn(m):
            return alg.ce_loss_and_grad(m, x, y, 1e-4)
        return fn

    def test_zero_lambda_is_unperturbed(self):
        model = tiny_model(seed=8)
        local, _ = toy_batches(seed=9)
        fn = self.closure(*local)
        base = fn(model)[1]
        out = alg.rectified_gradient(model, np.ones(model.num_params), 0.0, fn)
        assert np.array_equal(out, base)

    def test_tiny_norm_falls_back(self):
        model = tiny_model(seed=10)
        local, _ = toy_batches(seed=11)
        fn = self.closure(*local)
        out = alg.rectified_gradient(model, np.full(model.num_params, 1e-15), 0.5, fn)
        assert np.array_equal(out, fn(model)[1])

    def test_scale_invariance_bit_exact(self):
        # direction entries have power-of-two magnitudes so that scaling by
        # s is itself lossless; the normalization must then be bit-stable
        model = tiny_model(seed=12)
        local, _ = toy_batches(seed=13)
        fn = self.closure(*local)
        rng = np.random.default_rng(14)
        delta = np.ldexp(rng.choice([-1.0, 1.0], model.num_params),
                         rng.integers(-3, 9, model.num_params))
        base = alg.rectified_gradient(model, delta, 0.5, fn)
        for s in (0.1, 1.0, 10.0, 1e6, 7.3):
            assert np.array_equal(base, alg.rectified_gradient(model, s * delta, 0.5, fn))

    def test_quadratic_closure_closed_form(self):
        # f(theta) = 0.5 theta' A theta, delta = e1, lambda_g = 0.5:
        # the rectified gradient is exactly A (theta + 0.5 e1)
        model = tiny_model(seed=15)
        dim = model.num_params
        rng = np.random.default_rng(16)
        a_mat = rng.standard_normal((dim, dim))
        a_mat = a_mat + a_mat.T

        def quad(m):
            theta = nn.flatten(m)
            return 0.5 * float(theta @ a_mat @ theta), a_mat @ theta

        e1 = np.zeros(dim)
        e1[0] = 1.0
        out = alg.rectified_gradient(model, e1, 0.5, quad)
        expected = a_mat @ (nn.flatten(model) + 0.5 * e1)
        assert np.array_equal(out, expected)

    def test_perturb_restore_bit_exact(self):
        model = tiny_model(seed=17)
        before = nn.flatten(model)
        local, _ = toy_batches(seed=18)
        alg.rectified_gradient(model, np.random.default_rng(19).standard_normal(model.num_params),
                               0.5, self.closure(*local))
        assert np.array_equal(nn.flatten(model), before)


class TestQuadraticOracle:
    def test_identity_and_contraction(self):
        report = quadratic_oracle_report(dim=5, lambda_g=0.5, seed=0)
        assert report["max_identity_err"] <= 1e-10
        assert report["contraction_norm"] < 1.0
        for row in report["rows"]:
            if row["d0"] > 0:
                assert row["d_new"] < row["d0"]


def run_local(algo_fn, seed=0, **kw):
    ds = dat.gen_blobs(3, 4, 30, 2.0, 0.5, seed=21)
    model = tiny_model(seed=20, classes=3)
    theta = nn.flatten(model)
    client = make_client(np.arange(45), seed=seed)
    return algo_fn(client, model, theta, ds, **kw), theta


class TestBaselines:
    def test_zero_lr_rejected_but_tiny_lr_freezes(self):
        with pytest.raises(ValueError):
            alg.FedGpsHyper(eta_l=0.0)

    def test_fedgps_zero_lr_limit_gives_zero_delta(self):
        # eta_l must be positive; verify the delta scales to ~0 as lr -> 0
        ds = dat.gen_blobs(2, 4, 10, 2.0, 0.5, seed=22)
        surrogate = dat.gen_surrogate(dat.make_surrogate_spec(2, 4, seed=23, n_per_class=4))
        model = tiny_model(seed=24)
        hyper = alg.FedGpsHyper(eta_l=1e-300, local_epochs=2, batch_size=4)
        delta, _ = alg.fedgps_local_train(make_client(np.arange(20)), model,
                                          nn.flatten(model), None, ds, surrogate,
                                          np.zeros((2, model.embed_dim)), hyper)
        assert np.max(np.abs(delta)) < 1e-290

    def test_fedprox_mu_zero_equals_fedavg(self):
        hyper = alg.FedGpsHyper(local_epochs=2, batch_size=8, prox_mu=0.0)
        (d_prox, _), _ = run_local(
            lambda c, m, t, ds: (alg.fedprox_local_train(c, m, t, ds, hyper), None))
        (d_avg, _), _ = run_local(
            lambda c, m, t, ds: (alg.fedavg_local_train(c, m, t, ds, hyper), None))
        assert np.array_equal(d_prox, d_avg)

    def test_fedprox_pulls_toward_anchor(self):
        tight = alg.FedGpsHyper(local_epochs=3, batch_size=8, prox_mu=10.0)
        loose = alg.FedGpsHyper(local_epochs=3, batch_size=8, prox_mu=0.0)
        (d_tight, _), _ = run_local(
            lambda c, m, t, ds: (alg.fedprox_local_train(c, m, t, ds, tight), None))
        (d_loose, _), _ = run_local(
            lambda c, m, t, ds: (alg.fedprox_local_train(c, m, t, ds, loose), None))
        assert np.linalg.norm(d_tight) < np.linalg.norm(d_loose)

    def test_scaffold_zero_variates_first_step_matches_fedavg(self):
        hyper = alg.FedGpsHyper(local_epochs=1, batch_size=64)  # one full-batch step
        ds = dat.gen_blobs(3, 4, 10, 2.0, 0.5, seed=25)
        model = tiny_model(seed=26, classes=3)
        theta = nn.flatten(model)
        zeros = np.zeros_like(theta)
        d_scaf, _ = alg.scaffold_local_train(make_client(np.arange(30), seed=1), model,
                                             theta, ds, hyper, zeros, zeros)
        d_avg = alg.fedavg_local_train(make_client(np.arange(30), seed=1), model,
                                       theta, ds, hyper)
        assert np.array_equal(d_scaf, d_avg)

    def test_scaffold_control_update_option_ii(self):
        hyper = alg.FedGpsHyper(local_epochs=2, batch_size=16)
        ds = dat.gen_blobs(3, 4, 16, 2.0, 0.5, seed=27)
        model = tiny_model(seed=28, classes=3)
        theta = nn.flatten(model)
        c_server = np.random.default_rng(29).standard_normal(theta.size) * 1e-3
        c_client = np.random.default_rng(30).standard_normal(theta.size) * 1e-3
        delta, c_new = alg.scaffold_local_train(make_client(np.arange(48), seed=2),
                                                model, theta, ds, hyper,
                                                c_server, c_client)
        steps = 2 * int(np.ceil(48 / 16))
        expected = c_client - c_server + (-delta) / (steps * hyper.eta_l)
        assert np.allclose(c_new, expected, atol=1e-12)

    def test_fedavgm_zero_beta_is_plain_aggregation(self):
        deltas = {0: np.ones(4), 1: np.full(4, 3.0)}
        a = proto.ServerState(global_params=np.zeros(4), eta_g=1.0)
        alg.fedavgm_server_update(a, deltas, np.zeros(4), beta=0.0)
        b = proto.ServerState(global_params=np.zeros(4), eta_g=1.0)
        proto.aggregate(b, deltas)
        assert np.array_equal(a.global_params, b.global_params)

    def test_fedavgm_velocity_accumulates(self):
        server = proto.ServerState(global_params=np.zeros(2), eta_g=1.0)
        v = np.zeros(2)
        v = alg.fedavgm_server_update(server, {0: np.ones(2)}, v, beta=0.9)
        v = alg.fedavgm_server_update(server, {0: np.ones(2)}, v, beta=0.9)
        assert np.allclose(v, [1.9, 1.9])
        assert np.allclose(server.global_params, [2.9, 2.9])


class TestFedGpsLocalTrain:
    def test_caches_delta_and_returns_prototypes(self):
        ds = dat.gen_blobs(2, 4, 20, 2.0, 0.5, seed=31)
        surrogate = dat.gen_surrogate(dat.make_surrogate_spec(2, 4, seed=32, n_per_class=6))
        model = tiny_model(seed=33)
        client = make_client(np.arange(40), seed=3)
        hyper = alg.FedGpsHyper(batch_size=8)
        delta, protos = alg.fedgps_local_train(client, model, nn.flatten(model),
                                               None, ds, surrogate,
                                               np.zeros((2, model.embed_dim)),
                                               hyper, round_index=4)
        assert np.array_equal(client.last_delta, delta)
        assert client.last_participation_round == 4
        assert protos.means.shape == (2, model.embed_dim)

    def test_nsg_sign_flip_changes_trajectory(self):
        ds = dat.gen_blobs(2, 4, 20, 2.0, 0.5, seed=34)
        surrogate = dat.gen_surrogate(dat.make_surrogate_spec(2, 4, seed=35, n_per_class=6))
        model = tiny_model(seed=36)
        nsg = np.random.default_rng(37).standard_normal(model.num_params)
        out = {}
        for sign in (1.0, -1.0):
            hyper = alg.FedGpsHyper(batch_size=8, nsg_sign=sign)
            delta, _ = alg.fedgps_local_train(make_client(np.arange(40), seed=4),
                                              model, nn.flatten(model), nsg, ds,
                                              surrogate, np.zeros((2, model.embed_dim)),
                                              hyper)
            out[sign] = delta
        assert not np.array_equal(out[1.0], out[-1.0])


class TestProxObjectiveGradient:
    def test_proximal_loss_matches_finite_differences(self):
        # the proximal objective CE + (mu/2)||theta - anchor||^2 must be
        # gradient-consistent like every other assembled loss
        model = tiny_model(seed=40, classes=3)
        anchor = nn.flatten(model) + 0.05
        rng = np.random.default_rng(41)
        x = rng.standard_normal((6, 4))
        y = rng.integers(0, 3, size=6)
        mu = 0.125

        def loss_fn(m, batch):
            loss, grad = alg.ce_loss_and_grad(m, batch[0], batch[1], 1e-5)
            diff = nn.flatten(m) - anchor
            return loss + 0.5 * mu * float(diff @ diff), grad + mu * diff

        err = nn.finite_diff_check(model, (x, y), loss_fn, epsilon=1e-5,
                                   num_coords=64, rng=np.random.default_rng(42))
        assert err < 1e-4
