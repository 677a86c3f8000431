import numpy as np
import pytest
from scipy import stats

from vaells.errors import ConfigurationError, DimensionError
from vaells.evaluation import (GridSpec, estimated_log_likelihood, likelihood_hyperparameters,
                               log_weights, posterior_contour, prior_samples, reconstruction_mse,
                               training_diagnostics, write_key_values)
from vaells.linalg import mat_exp
from vaells.model import (AnchorSet, ModelState, PosteriorNoise, laplace_inverse_transform,
                          log_likelihood_term, log_prior, log_variational_posterior)
from vaells.train import LogRow, TrainingLog
from vaells.transport import TransportDictionary

from conftest import linear_autoencoder, rotation_generator, toy_hp, toy_model


def rotation_model(hp, anchor_latents, labels=None):
    enc, dec, E = linear_autoencoder(hp.data_dim, hp.latent_dim)
    lat = np.atleast_2d(anchor_latents)
    labels = np.zeros(len(lat), int) if labels is None else labels
    psi = TransportDictionary(rotation_generator()[None])
    return ModelState(enc, dec, psi, AnchorSet(lat @ E.T, labels)), E


class TestLogLikelihood:
    @pytest.mark.parametrize("closest", [True, False])
    def test_log_weights_match_density_terms(self, closest):
        hp = toy_hp(gamma_post=0.05, laplace_scale=0.3, closest_anchor_only=closest, num_restarts=3)
        model, E = rotation_model(hp, [[0.5, 0.0], [0.0, -0.5], [0.3, 0.3]])
        X = np.array([[0.4, 0.3], [-0.2, 0.45]]) @ E.T + 0.01
        keys = np.zeros(2, int)
        K = 3
        lw = log_weights(model, X, keys, hp, K, np.random.default_rng(11))
        # redraw the same variates and score each sample with the single-point functions
        noise = PosteriorNoise.draw(np.random.default_rng(11), 2, K, 1, 2)
        ev = likelihood_hyperparameters(hp)
        ref = np.zeros((2, K))
        for n in range(2):
            mu = model.encode(X[n])
            for k in range(K):
                c = laplace_inverse_transform(noise.u[n, k], hp.laplace_scale)
                z = mat_exp(model.dictionary.generator(c)) @ mu + hp.gamma_post * noise.eps[n, k]
                rng = np.random.default_rng(0)
                log_q, _ = log_variational_posterior(model, z, X[n], ev, rng)
                ref[n, k] = (-log_likelihood_term(model, X[n], z, ev.zeta1) + log_prior(model, z, 0, ev, rng)
                             - log_q)
        np.testing.assert_allclose(lw, ref, rtol=1e-6)

    def test_likelihood_weights(self):
        hp = toy_hp(gamma_post=0.01, laplace_scale=0.5)
        ev = likelihood_hyperparameters(hp)
        assert ev.zeta2 == ev.zeta4 == pytest.approx(5000.0)
        assert ev.zeta3 == ev.zeta5 == 2.0
        assert ev.zeta_q == hp.zeta_q and ev.zeta_p == hp.zeta_p

    def test_single_sample_is_mean_weight(self, rng):
        hp = toy_hp(gamma_post=0.05)
        model = toy_model(hp, rng)
        X = rng.standard_normal((7, 4))
        keys = np.zeros(7, int)
        est = estimated_log_likelihood(model, X, keys, hp, num_points=7, num_samples=1,
                                       rng=np.random.default_rng(2), chunk=50)
        r = np.random.default_rng(2)
        rows = np.sort(r.choice(7, size=7, replace=False))
        lw = log_weights(model, X[rows], keys[rows], hp, 1, r)
        assert est == pytest.approx(lw.mean(), rel=1e-12)

    def test_deterministic_and_bounded_by_k(self, rng):
        hp = toy_hp(gamma_post=0.05)
        model = toy_model(hp, rng)
        X = rng.standard_normal((12, 4))
        keys = np.zeros(12, int)
        a = estimated_log_likelihood(model, X, keys, hp, 12, 5, np.random.default_rng(3), chunk=5)
        b = estimated_log_likelihood(model, X, keys, hp, 12, 5, np.random.default_rng(3), chunk=5)
        assert a == b
        k1 = np.mean([estimated_log_likelihood(model, X, keys, hp, 12, 1, np.random.default_rng(s))
                      for s in range(10)])
        k20 = np.mean([estimated_log_likelihood(model, X, keys, hp, 12, 20, np.random.default_rng(s))
                       for s in range(10)])
        assert k20 >= k1

    def test_errors(self, rng):
        hp = toy_hp(gamma_post=0.05)
        model = toy_model(hp, rng)
        X = rng.standard_normal((4, 4))
        with pytest.raises(ConfigurationError):
            estimated_log_likelihood(model, X, np.zeros(4, int), hp, num_points=5)
        with pytest.raises(ConfigurationError):
            estimated_log_likelihood(model, X[:, :3], np.zeros(4, int), hp, num_points=2)
        with pytest.raises(ConfigurationError):
            estimated_log_likelihood(model, X, np.zeros(4, int), toy_hp(num_operators=2), num_points=2)
        with pytest.raises(ConfigurationError):
            estimated_log_likelihood(model, X, np.zeros(4, int), toy_hp(gamma_post=0.0), num_points=2)


class TestMse:
    def test_exact_autoencoder(self):
        hp = toy_hp()
        model, E = rotation_model(hp, [[0.1, 0.2]])
        X = np.random.default_rng(0).standard_normal((30, 2)) @ E.T
        assert reconstruction_mse(model, X) < 1e-30

    def test_constant_decoder(self, rng):
        hp = toy_hp()
        model = toy_model(hp, rng)
        cbar = np.array([0.5, -1.0, 2.0, 0.0])
        model.decoder.weights[-1][:] = 0.0
        model.decoder.biases[-1][:] = cbar
        X = rng.standard_normal((9, 4))
        expected = np.mean(np.sum((X - cbar) ** 2, axis=1) / 4)
        assert reconstruction_mse(model, X) == pytest.approx(expected, rel=1e-14)

    def test_permutation_invariant(self, rng):
        hp = toy_hp()
        model = toy_model(hp, rng)
        X = rng.standard_normal((16, 4))
        assert reconstruction_mse(model, X[rng.permutation(16)]) == pytest.approx(reconstruction_mse(model, X),
                                                                                  rel=1e-14)


class TestContour:
    def test_encoding_cell_and_additivity(self, rng, tmp_path):
        hp = toy_hp()
        model, E = rotation_model(hp, [[0.1, 0.2]])
        x = np.array([0.6, 0.2]) @ E.T
        mu = model.encode(x)
        grid = posterior_contour(model, x, hp, GridSpec.around(mu, 0.25, 11), rng)
        np.testing.assert_allclose(grid.total, grid.constant + grid.fidelity + grid.sparsity, atol=1e-9, rtol=0)
        assert grid.constant == pytest.approx(hp.log_normalizer_latent())
        i = j = 5
        assert abs(grid.fidelity[i, j]) < 1e-12
        assert abs(grid.sparsity[i, j]) < 1e-5
        assert grid.argmax_cell() == (5, 5)
        grid.write_csv(tmp_path / "c.csv")
        lines = (tmp_path / "c.csv").read_text().splitlines()
        assert lines[0] == "z1,z2,fidelity,sparsity,total" and len(lines) == 122

    def test_rotation_orbit_has_zero_fidelity(self, rng):
        hp = toy_hp()
        model, E = rotation_model(hp, [[0.1, 0.2]])
        x = np.array([0.5, 0.0]) @ E.T
        grid = posterior_contour(model, x, hp, GridSpec((-0.6, 0.6), (-0.6, 0.6), 13), rng)
        Z1, Z2 = np.meshgrid(grid.z1, grid.z2)
        on_circle = np.isclose(np.hypot(Z1, Z2), 0.5, atol=1e-12)
        assert on_circle.any()
        assert np.all(np.abs(grid.fidelity[on_circle]) < 1e-8)

    def test_requires_two_dims(self, rng):
        hp = toy_hp(latent_dim=3)
        model = toy_model(hp, rng)
        with pytest.raises(DimensionError):
            posterior_contour(model, np.zeros(4), hp, GridSpec((0, 1), (0, 1), 3), rng)


class TestPriorSamples:
    def test_collapse_onto_anchors(self, rng):
        hp = toy_hp()
        model = toy_model(hp, rng, n_anchors=3, labels=np.array([0, 1, 0]))
        Z, tags = prior_samples(model, 0, 50, 0.0, 0.0, rng, hp)
        assert set(tags.tolist()) <= {0, 2}
        np.testing.assert_array_equal(Z, model.encode(model.anchors.points)[tags])

    def test_tags_uniform_chi_square(self):
        hp = toy_hp()
        rng = np.random.default_rng(0)
        model = toy_model(hp, rng, n_anchors=4, labels=np.zeros(4, int))
        _, tags = prior_samples(model, 0, 10_000, 0.5, 0.1, rng, hp)
        counts = np.bincount(tags, minlength=4)
        assert stats.chisquare(counts).pvalue > 0.01

    def test_seeded_and_errors(self, rng):
        hp = toy_hp()
        model = toy_model(hp, rng)
        a = prior_samples(model, 0, 5, 1.0, 0.1, np.random.default_rng(1), hp)
        b = prior_samples(model, 0, 5, 1.0, 0.1, np.random.default_rng(1), hp)
        np.testing.assert_array_equal(a[0], b[0])
        with pytest.raises(ConfigurationError):
            prior_samples(model, 3, 5, 1.0, 0.1, rng, hp)
        with pytest.raises(ConfigurationError):
            prior_samples(model, 0, 5, -1.0, 0.1, rng, hp)


def make_log(accepted_flags, iters=4.0):
    log = TrainingLog()
    step = 0
    for flag in accepted_flags:
        phase = "net" if flag is None else "psi"
        log.append(LogRow(step, phase, 0.0, 0, 0, 0, 0, 0, 0, flag, 1e-3, iters, int(iters)), 0.01)
        step += 1
    return log


class TestDiagnostics:
    def test_all_accepted(self):
        s = training_diagnostics(make_log([None, True, True, None, True]))
        assert s.rejected_fraction == 0.0 and s.psi_steps == 3 and not s.suspect
        assert s.wall_time_total == pytest.approx(0.05)

    def test_suspect_threshold(self):
        assert training_diagnostics(make_log([True, False, False])).suspect
        assert not training_diagnostics(make_log([True, False])).suspect

    def test_frobenius_from_dictionary(self, rng):
        psi = TransportDictionary(rng.standard_normal((3, 2, 2)))
        s = training_diagnostics(make_log([True]), psi)
        np.testing.assert_allclose(s.frobenius_norms, [np.linalg.norm(P) for P in psi.operators], rtol=1e-15)

    def test_empty_log(self):
        with pytest.raises(ConfigurationError):
            training_diagnostics(TrainingLog())

    def test_key_value_csv(self, tmp_path):
        s = training_diagnostics(make_log([True, False]))
        write_key_values(tmp_path / "d.csv", s.as_rows())
        lines = (tmp_path / "d.csv").read_text().splitlines()
        assert lines[0] == "key,value"
        assert "rejected_fraction,0.5" in lines and "suspect,0" in lines
