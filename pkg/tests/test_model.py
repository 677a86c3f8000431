import math

import numpy as np
import pytest
from scipy import stats

from vaells.errors import ConfigurationError, DimensionError, DomainError
from vaells.linalg import mat_exp
from vaells.model import (AnchorSet, Hyperparameters, InferredCoefficients, ModelState,
                          PhaseWeights, PosteriorNoise, evaluate_objective, full_objective,
                          laplace_inverse_transform, log_likelihood_term, log_prior,
                          log_variational_posterior, sample_posterior)
from vaells.transport import TransportDictionary

from conftest import linear_autoencoder, rotation_generator, toy_hp, toy_model


def ks_laplace_pvalue(seed, n=10_000):
    rng = np.random.default_rng(seed)
    u = rng.uniform(-0.5, 0.5, n)
    u = u[np.abs(u) < 0.5]
    return stats.kstest(laplace_inverse_transform(u, 1.0), stats.laplace(0, 1).cdf).pvalue


def linear_model(hp, anchors_points, anchor_labels=None, psi=None):
    enc, dec, E = linear_autoencoder(hp.data_dim, hp.latent_dim)
    labels = np.zeros(len(anchors_points), int) if anchor_labels is None else anchor_labels
    dictionary = TransportDictionary(rotation_generator()[None] if psi is None else psi)
    return ModelState(enc, dec, dictionary, AnchorSet(anchors_points, labels)), E


class TestHyperparameters:
    def test_swiss_roll_defaults(self):
        hp = Hyperparameters.swiss_roll()
        assert (hp.batch_size, hp.train_steps, hp.num_operators, hp.anchors_per_class) == (30, 3000, 1, 4)
        assert (hp.net_update_steps, hp.psi_update_steps) == (20, 20)
        assert (hp.zeta1, hp.zeta5, hp.zeta_q, hp.zeta_p, hp.gamma_post) == (0.01, 0.01, 1e-6, 5e-5, 0.001)
        assert hp.closest_anchor_only

    def test_validation(self):
        with pytest.raises(ConfigurationError):
            Hyperparameters(zeta1=-1.0)
        with pytest.raises(ConfigurationError):
            Hyperparameters(batch_size=0)
        with pytest.raises(ConfigurationError):
            Hyperparameters(lr_psi_start=1.0, lr_psi_max=0.1)
        with pytest.raises(ConfigurationError):
            Hyperparameters(decoder_output="tanh")

    def test_latent_normalizer_example(self):
        hp = Hyperparameters(gamma_post=0.001, num_operators=1, laplace_scale=1.0, latent_dim=2)
        assert hp.log_normalizer_latent() == pytest.approx(11.2845, abs=5e-5)
        expected = -math.log(2 * math.pi) - 2 * math.log(0.001) + math.log(0.5)
        assert hp.log_normalizer_latent() == pytest.approx(expected, rel=1e-15)


class TestLaplace:
    def test_examples(self):
        np.testing.assert_array_equal(laplace_inverse_transform(np.zeros(3), 1.0), np.zeros(3))
        assert laplace_inverse_transform(np.array([0.25]), 1.0)[0] == pytest.approx(math.log(2), rel=1e-15)
        assert laplace_inverse_transform(np.array([-0.25]), 2.0)[0] == pytest.approx(-2 * math.log(2), rel=1e-15)

    def test_odd_symmetry(self, rng):
        u = rng.uniform(-0.49, 0.49, 50)
        np.testing.assert_array_equal(laplace_inverse_transform(-u, 0.7), -laplace_inverse_transform(u, 0.7))

    def test_domain_errors(self):
        with pytest.raises(DomainError):
            laplace_inverse_transform(np.array([0.5]), 1.0)
        with pytest.raises(DomainError):
            laplace_inverse_transform(np.array([0.1]), 0.0)

    def test_ks_against_laplace(self):
        passes = sum(ks_laplace_pvalue(seed) > 0.01 for seed in range(5))
        assert passes >= 4


class TestSamplePosterior:
    def test_collapse_to_encoding(self, rng):
        hp = toy_hp()
        model = toy_model(hp, rng)
        x = rng.standard_normal(4)
        z, c_hat, eps = sample_posterior(model, x, hp, rng, b=1e-300, gamma=0.0)
        np.testing.assert_array_equal(z, model.encode(x))

    def test_rotation_preserves_norm(self, rng):
        hp = toy_hp(gamma_post=0.0, latent_scale=3.0)
        model = toy_model(hp, rng)
        model.dictionary = TransportDictionary(rotation_generator()[None])
        X = rng.standard_normal((20, 4))
        z, _, _ = sample_posterior(model, X, hp, rng)
        np.testing.assert_allclose(np.linalg.norm(z, axis=1), np.linalg.norm(model.encode(X), axis=1),
                                   atol=1e-9)

    def test_deterministic(self, rng):
        hp = toy_hp()
        model = toy_model(hp, rng)
        x = rng.standard_normal(4)
        a = sample_posterior(model, x, hp, np.random.default_rng(3))
        b = sample_posterior(model, x, hp, np.random.default_rng(3))
        for p, q in zip(a, b):
            np.testing.assert_array_equal(p, q)

    def test_formula(self, rng):
        hp = toy_hp(gamma_post=0.1)
        model = toy_model(hp, rng)
        x = rng.standard_normal(4)
        z, c_hat, eps = sample_posterior(model, x, hp, rng)
        expected = mat_exp(model.dictionary.generator(c_hat)) @ model.encode(x) + 0.1 * eps
        np.testing.assert_allclose(z, expected, rtol=1e-14)


class TestDensityTerms:
    def test_likelihood_example(self):
        hp = toy_hp(data_dim=2, latent_dim=2)
        model, E = linear_model(hp, np.zeros((1, 2)))
        x = np.array([0.0, 0.0])
        # decoder is E @ z; choose z so that the residual has squared norm 4
        z = np.linalg.solve(E, np.array([2.0, 0.0]))
        assert log_likelihood_term(model, x, z, 0.5) == pytest.approx(math.log(2 * math.pi) + 2, abs=1e-12)
        assert log_likelihood_term(model, x, z, 0.5) == pytest.approx(3.8379, abs=5e-5)

    def test_likelihood_zero_residual_and_scaling(self):
        hp = toy_hp()
        model, E = linear_model(hp, np.zeros((1, 4)))
        z = np.array([0.3, -0.2])
        x = E @ z
        zeta1 = 0.01
        sigma = (2 * zeta1) ** -0.5
        c1 = 2 * math.log(2 * math.pi) + 4 * math.log(sigma)
        assert log_likelihood_term(model, x, z, zeta1) == pytest.approx(c1, rel=1e-13)
        d = np.array([0.1, 0.2, 0.0, -0.3])
        one = log_likelihood_term(model, x + d, z, zeta1) - c1
        two = log_likelihood_term(model, x + 2 * d, z, zeta1) - c1
        assert two == pytest.approx(4 * one, rel=1e-12)

    def test_posterior_at_encoding_is_normalizer(self, rng):
        hp = toy_hp()
        model, E = linear_model(hp, np.zeros((1, 4)))
        x = E @ np.array([0.5, 0.1])
        value, c = log_variational_posterior(model, model.encode(x), x, hp, rng)
        assert np.abs(c).max() < 1e-6
        assert value == pytest.approx(hp.log_normalizer_latent(), abs=1e-6)

    def test_posterior_planted_rotation(self, rng):
        hp = toy_hp()
        model, E = linear_model(hp, np.zeros((1, 4)))
        mu = np.array([0.6, 0.2])
        x = E @ mu
        z = mat_exp(0.7 * rotation_generator()) @ mu
        value, c = log_variational_posterior(model, z, x, hp, rng)
        grid = np.linspace(-3, 3, 60001)
        objective = [np.sum((z - mat_exp(g * rotation_generator()) @ mu) ** 2) + hp.zeta_q * abs(g)
                     for g in grid]
        cc = grid[int(np.argmin(objective))]
        r = z - mat_exp(cc * rotation_generator()) @ mu
        best = hp.log_normalizer_latent() - hp.zeta2 * r @ r - hp.zeta3 * abs(cc)
        assert abs(c[0] - 0.7) < 1e-3
        assert value == pytest.approx(best, abs=2e-4)

    def test_prior_single_anchor_at_z(self, rng):
        hp = toy_hp()
        _, _, E = linear_autoencoder(4, 2)
        model, _ = linear_model(hp, (E @ np.array([0.4, 0.3]))[None])
        z = model.encode(model.anchors.points[0])
        assert log_prior(model, z, 0, hp, rng) == pytest.approx(hp.log_normalizer_latent(), abs=1e-6)

    def test_prior_sum_mode_identical_anchors(self, rng):
        # a zero-width restart box gives every anchor the same start, hence the same optimum
        hp = toy_hp(closest_anchor_only=False, init_low=-1e-12, init_high=1e-12)
        _, _, E = linear_autoencoder(4, 2)
        a = E @ np.array([0.4, 0.3])
        z = mat_exp(0.5 * rotation_generator()) @ np.array([0.4, 0.3])
        single, _ = linear_model(hp, a[None])
        many, _ = linear_model(hp, np.stack([a] * 5))
        v1 = log_prior(single, z, 0, hp, np.random.default_rng(0))
        v5 = log_prior(many, z, 0, hp, np.random.default_rng(0))
        assert v5 == pytest.approx(v1, abs=1e-9)

    def test_prior_large_gap_is_finite(self, rng):
        hp = toy_hp(closest_anchor_only=False, zeta4=1e5)
        _, _, E = linear_autoencoder(4, 2)
        # the rotation cannot change the radius, so the second anchor leaves a fixed residual
        near = E @ np.array([0.4, 0.3])
        far = E @ np.array([0.4 * 1.2, 0.3 * 1.2])
        model, _ = linear_model(hp, np.stack([near, far]))
        z = model.encode(near)
        v = log_prior(model, z, 0, hp, rng)
        assert math.isfinite(v)
        assert v == pytest.approx(hp.log_normalizer_latent() - math.log(2), abs=1e-6)

    def test_prior_sum_mode_permutation_invariant(self, rng):
        hp = toy_hp(closest_anchor_only=False)
        pts = rng.standard_normal((4, 4))
        model = toy_model(hp, rng, n_anchors=4)
        model.anchors = AnchorSet(pts, np.zeros(4, int))
        perm = model.copy()
        perm.anchors = AnchorSet(pts[[2, 0, 3, 1]], np.zeros(4, int))
        z = rng.standard_normal(2)
        # a zero-width restart box makes every anchor's inference start from the same point
        hp1 = toy_hp(closest_anchor_only=False, num_restarts=1, init_low=-1e-12, init_high=1e-12)
        a = log_prior(model, z, 0, hp1, np.random.default_rng(9))
        b = log_prior(perm, z, 0, hp1, np.random.default_rng(9))
        assert a == pytest.approx(b, rel=1e-12)

    def test_prior_missing_class(self, rng):
        hp = toy_hp()
        model = toy_model(hp, rng)
        with pytest.raises(ConfigurationError):
            log_prior(model, np.zeros(2), 7, hp, rng)


def _param_groups(model):
    return {"encoder": model.encoder.arrays(), "decoder": model.decoder.arrays(),
            "anchors": [model.anchors.points], "psi": [model.dictionary.operators]}


def _analytic(res):
    return {"encoder": res.grad_encoder, "decoder": res.grad_decoder,
            "anchors": [res.grad_anchors], "psi": [res.grad_psi]}


class TestFullObjective:
    @pytest.mark.parametrize("closest", [True, False])
    def test_gradients_match_finite_differences(self, closest):
        rng = np.random.default_rng(0)
        hp = toy_hp(closest_anchor_only=closest, gamma_post=0.05, samples_per_point=2, zeta1=0.3)
        model = toy_model(hp, rng)
        X = rng.standard_normal((3, 4))
        keys = np.zeros(3, int)
        noise = PosteriorNoise.draw(rng, 3, 2, 1, 2)
        base = evaluate_objective(model, X, keys, noise, hp, np.random.default_rng(1))
        coeffs = base.coefficients
        analytic = _analytic(base)
        h = 1e-6
        for group, arrays in _param_groups(model).items():
            for i, A in enumerate(arrays):
                fd = np.zeros_like(A)
                for idx in np.ndindex(A.shape):
                    old = A[idx]
                    A[idx] = old + h
                    fp = evaluate_objective(model, X, keys, noise, hp, coefficients=coeffs, grad=False).value
                    A[idx] = old - h
                    fm = evaluate_objective(model, X, keys, noise, hp, coefficients=coeffs, grad=False).value
                    A[idx] = old
                    fd[idx] = (fp - fm) / (2 * h)
                g = analytic[group][i]
                err = np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12)
                assert err < 1e-4, (group, i, err)

    def test_latent_scale_gradients(self):
        rng = np.random.default_rng(4)
        hp = toy_hp(latent_scale=2.5, gamma_post=0.02)
        model = toy_model(hp, rng)
        X = rng.standard_normal((2, 4))
        keys = np.zeros(2, int)
        noise = PosteriorNoise.draw(rng, 2, 1, 1, 2)
        base = evaluate_objective(model, X, keys, noise, hp, np.random.default_rng(1))
        P = model.dictionary.operators
        fd = np.zeros_like(P)
        for idx in np.ndindex(P.shape):
            old = P[idx]
            P[idx] = old + 1e-6
            fp = evaluate_objective(model, X, keys, noise, hp, coefficients=base.coefficients, grad=False).value
            P[idx] = old - 1e-6
            fm = evaluate_objective(model, X, keys, noise, hp, coefficients=base.coefficients, grad=False).value
            P[idx] = old
            fd[idx] = (fp - fm) / 2e-6
        assert np.linalg.norm(base.grad_psi - fd) / np.linalg.norm(fd) < 1e-4

    def test_eta_only_degenerate_model(self):
        hp = toy_hp(gamma_post=0.0, eta=0.37)
        _, _, E = linear_autoencoder(4, 2)
        anchor = E @ np.array([0.3, 0.1])
        model, _ = linear_model(hp, anchor[None], psi=np.array([[[0.2, 0.1], [-0.4, 0.3]]]))
        X = anchor[None]
        # u = 0 and gamma = 0 put the sample on the encoding, which is also the anchor
        noise = PosteriorNoise(np.zeros((1, 1, 1)), np.zeros((1, 1, 2)))
        # supply the exact optimum (zero coefficients) so no inference tolerance leaks in
        zero = InferredCoefficients(np.zeros((1, 1)), np.zeros((1, 1)), np.zeros(1, int),
                                    np.zeros(1, int), np.zeros(2, int))
        res = evaluate_objective(model, X, [0], noise, hp, coefficients=zero)
        assert res.transopt == 0.0
        frob = 0.5 * 0.37 * np.sum(model.dictionary.operators ** 2)
        assert res.terms["recon"] < 1e-28
        assert res.value == pytest.approx(frob, abs=1e-9)
        assert res.terms["frobenius"] == pytest.approx(frob, rel=1e-15)

    def test_prior_weight_zero_removes_prior_path(self, rng):
        hp = toy_hp(gamma_post=0.05)
        model = toy_model(hp, rng)
        X = rng.standard_normal((3, 4))
        noise = PosteriorNoise.draw(rng, 3, 1, 1, 2)
        base = evaluate_objective(model, X, np.zeros(3, int), noise, hp, np.random.default_rng(0),
                                  weights=PhaseWeights(1.0, 0.0))
        assert np.all(base.grad_anchors == 0)
        # changing the anchor leaves the weighted objective and its network gradients unchanged
        other = model.copy()
        other.anchors = AnchorSet(other.anchors.points + 0.5, other.anchors.labels)
        moved = evaluate_objective(other, X, np.zeros(3, int), noise, hp,
                                   weights=PhaseWeights(1.0, 0.0), coefficients=base.coefficients)
        assert moved.value == pytest.approx(base.value, rel=1e-14)
        for a, b in zip(moved.grad_decoder, base.grad_decoder):
            np.testing.assert_array_equal(a, b)

    def test_supplied_coefficients_reproduce_evaluation(self, rng):
        hp = toy_hp(gamma_post=0.05)
        model = toy_model(hp, rng)
        X = rng.standard_normal((3, 4))
        noise = PosteriorNoise.draw(rng, 3, 1, 1, 2)
        a = evaluate_objective(model, X, np.zeros(3, int), noise, hp, np.random.default_rng(0))
        b = evaluate_objective(model, X, np.zeros(3, int), noise, hp.__class__(**{**hp.__dict__, "zeta_q": 0.5}),
                               coefficients=a.coefficients)
        # the inference weight changes only where terms are evaluated, not the formula
        assert b.value == pytest.approx(a.value, rel=1e-14)
        np.testing.assert_array_equal(a.grad_psi, b.grad_psi)

    def test_full_objective_records_noise_and_seed(self, rng):
        hp = toy_hp()
        model = toy_model(hp, rng)
        X = rng.standard_normal((3, 4))
        res = full_objective(model, X, np.zeros(3, int), hp, np.random.default_rng(5))
        again = evaluate_objective(model, X, np.zeros(3, int), res.extras["noise"], hp,
                                   np.random.default_rng(res.extras["inference_seed"]))
        assert again.value == res.value
        assert set(res.extras["per_sample"]) == {"recon", "posterior_fidelity", "posterior_sparsity", "prior"}

    def test_empty_batch_and_mismatch(self, rng):
        hp = toy_hp()
        model = toy_model(hp, rng)
        with pytest.raises(ConfigurationError):
            full_objective(model, np.zeros((0, 4)), [], hp, rng)
        noise = PosteriorNoise.draw(rng, 2, 1, 1, 2)
        with pytest.raises(DimensionError):
            evaluate_objective(model, np.zeros((3, 4)), np.zeros(3, int), noise, hp, rng)

    def test_recon_only_has_no_transport_terms(self, rng):
        hp = toy_hp()
        model = toy_model(hp, rng)
        X = rng.standard_normal((3, 4))
        noise = PosteriorNoise.draw(rng, 3, 1, 1, 2)
        res = evaluate_objective(model, X, np.zeros(3, int), noise, hp, rng, recon_only=True,
                                 b=1e-6, gamma=0.0)
        assert res.transopt == 0.0
        assert set(res.terms) == {"recon", "frobenius"}
        np.testing.assert_array_equal(res.grad_anchors, 0)
        recon = np.sum((X - model.decode(model.encode(X))) ** 2, axis=1)
        np.testing.assert_allclose(res.extras["per_sample"]["recon"], recon, rtol=1e-6)
