"""VAE whose latent posterior and prior are transport-operator manifold models.

Notation used in code: ``mu = f(x)`` is the encoding, ``u_i = f(a_i)`` an
encoded anchor, ``c_hat`` a Laplace draw, ``c_post``/``c_pair`` inferred
coefficients.  Everything transport-related happens in *scaled* latent
coordinates ``s * z`` with ``s = latent_scale``; the decoder sees unscaled
``z``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
import math

import numpy as np

from .errors import ConfigurationError, DimensionError, DomainError, NumericFailure
from .linalg import expm_adjoint_frechet, logsumexp, mat_exp
from .nets import AdamState, MlpParams, MlpSpec, init_mlp, mlp_backward, mlp_forward
from .transport import InferenceSettings, TransportDictionary, frobenius_penalty, infer_coefficients_batch


@dataclass
class Hyperparameters:
    """Every training knob.  Defaults reproduce the swiss-roll table."""

    zeta1: float = 0.01
    zeta2: float = 1.0
    zeta3: float = 1.0
    zeta4: float = 1.0
    zeta5: float = 0.01
    zeta_q: float = 1e-6
    zeta_p: float = 5e-5
    eta: float = 0.01
    gamma_post: float = 0.001
    laplace_scale: float = 1.0
    num_operators: int = 1
    anchors_per_class: int = 4
    samples_per_point: int = 1
    lr_net: float = 1e-4
    lr_anchor: float = 1e-4
    lr_psi_start: float = 5e-5
    lr_psi_max: float = 0.05
    lr_decay: float = 1.1
    batch_size: int = 30
    train_steps: int = 3000
    warmup_steps: int = 0
    net_update_steps: int = 20
    psi_update_steps: int = 20
    prior_weight_during_net_steps: float = 0.01
    recon_weight_during_psi_steps: float = 0.001
    latent_scale: float = 1.0
    closest_anchor_only: bool = True
    num_restarts: int = 2
    latent_dim: int = 2
    data_dim: int = 20
    hidden_units: int = 512
    decoder_output: str = "identity"
    dict_init_std: float = 0.01
    inference_fidelity: float = 1.0
    inference_max_iterations: int = 200
    inference_tolerance: float = 1e-6
    init_low: float = -0.1
    init_high: float = 0.1
    warmup_laplace_scale: float = 1e-6

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("zeta1", "zeta2", "zeta3", "zeta4", "zeta5", "zeta_q", "zeta_p", "eta",
                     "gamma_post", "lr_net", "lr_anchor", "prior_weight_during_net_steps",
                     "recon_weight_during_psi_steps", "warmup_steps", "net_update_steps",
                     "psi_update_steps", "train_steps", "dict_init_std"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("num_operators", "anchors_per_class", "samples_per_point", "batch_size",
                     "num_restarts", "latent_dim", "data_dim", "hidden_units"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("laplace_scale", "latent_scale", "lr_psi_start", "lr_decay",
                     "inference_fidelity", "inference_tolerance", "warmup_laplace_scale"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.lr_psi_start > self.lr_psi_max:
            raise ConfigurationError("lr_psi_start must not exceed lr_psi_max")
        if not self.init_low < self.init_high:
            raise ConfigurationError("init_low must be < init_high")
        if self.decoder_output not in ("identity", "sigmoid"):
            raise ConfigurationError(f"decoder_output must be identity or sigmoid, got {self.decoder_output!r}")

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def swiss_roll(cls, **overrides) -> "Hyperparameters":
        return cls(**overrides)

    @classmethod
    def concentric_circles(cls, **overrides) -> "Hyperparameters":
        base = dict(train_steps=4000, lr_net=0.005, lr_anchor=1e-4, lr_psi_start=4e-4,
                    lr_psi_max=0.1, zeta_p=5e-6, net_update_steps=0, psi_update_steps=0,
                    prior_weight_during_net_steps=1.0, recon_weight_during_psi_steps=1.0,
                    num_restarts=1, num_operators=4, anchors_per_class=3,
                    closest_anchor_only=False)
        base.update(overrides)
        return cls(**base)

    def inference_settings(self, sparsity: float, fidelity: float | None = None) -> InferenceSettings:
        return InferenceSettings(
            sparsity_weight=sparsity,
            fidelity_weight=self.inference_fidelity if fidelity is None else fidelity,
            max_iterations=self.inference_max_iterations,
            gradient_tolerance=self.inference_tolerance,
            num_restarts=self.num_restarts,
            init_low=self.init_low,
            init_high=self.init_high,
        )

    def log_normalizer_latent(self, gamma: float | None = None, b: float | None = None) -> float:
        """``C2 = -(d/2) ln 2pi - d ln gamma + M ln(1/(2b))``."""
        gamma = self.gamma_post if gamma is None else gamma
        b = self.laplace_scale if b is None else b
        d, M = self.latent_dim, self.num_operators
        return -0.5 * d * math.log(2 * math.pi) - d * math.log(gamma) + M * math.log(1.0 / (2.0 * b))


@dataclass
class AnchorSet:
    """Anchor points in input space, each tagged with the group it serves.

    A group is a class label, or a sample id when every training point has
    its own anchors (rotated glyphs).  Only trainable sets are updated.
    """

    points: np.ndarray  # (N_a, D)
    labels: np.ndarray  # (N_a,) int
    trainable: bool = True

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.labels.shape[0] != self.points.shape[0]:
            raise DimensionError("one label per anchor point required")

    def __len__(self):
        return self.points.shape[0]

    def indices_for(self, label: int) -> np.ndarray:
        idx = np.nonzero(self.labels == label)[0]
        if idx.size == 0:
            raise ConfigurationError(f"no anchors for class/group {label}")
        return idx

    def copy(self) -> "AnchorSet":
        return AnchorSet(self.points.copy(), self.labels.copy(), self.trainable)


@dataclass
class ModelState:
    encoder: MlpParams
    decoder: MlpParams
    dictionary: TransportDictionary
    anchors: AnchorSet
    adam_encoder: AdamState | None = None
    adam_decoder: AdamState | None = None
    adam_anchors: AdamState | None = None

    def __post_init__(self):
        d = self.dictionary.latent_dim
        if self.encoder.output_dim != d or self.decoder.input_dim != d:
            raise DimensionError("encoder output, decoder input and dictionary must share latent dim")
        if self.anchors.points.shape[1] != self.encoder.input_dim:
            raise DimensionError("anchors must live in the encoder's input space")
        if self.adam_encoder is None:
            self.adam_encoder = AdamState.zeros_like(self.encoder.arrays())
        if self.adam_decoder is None:
            self.adam_decoder = AdamState.zeros_like(self.decoder.arrays())
        if self.adam_anchors is None:
            self.adam_anchors = AdamState.zeros_like([self.anchors.points])

    @classmethod
    def initialize(cls, hp: Hyperparameters, anchors: AnchorSet, rng) -> "ModelState":
        enc = init_mlp(MlpSpec.two_layer(hp.data_dim, hp.hidden_units, hp.latent_dim), rng)
        dec = init_mlp(MlpSpec.two_layer(hp.latent_dim, hp.hidden_units, hp.data_dim,
                                         hp.decoder_output), rng)
        psi = TransportDictionary.random(hp.num_operators, hp.latent_dim, rng, hp.dict_init_std)
        return cls(enc, dec, psi, anchors.copy())

    def copy(self) -> "ModelState":
        return ModelState(self.encoder.copy(), self.decoder.copy(), self.dictionary.copy(),
                          self.anchors.copy(), self.adam_encoder, self.adam_decoder,
                          self.adam_anchors)

    def encode(self, x) -> np.ndarray:
        return mlp_forward(self.encoder, x)[0]

    def decode(self, z) -> np.ndarray:
        return mlp_forward(self.decoder, z)[0]


def laplace_inverse_transform(u, b: float) -> np.ndarray:
    """Map uniforms on (-1/2, 1/2) to Laplace(0, b): ``-b sgn(u) ln(1 - 2|u|)``."""
    u = np.asarray(u, dtype=np.float64)
    if b <= 0:
        raise DomainError(f"Laplace scale must be positive, got {b}")
    if np.any(np.abs(u) >= 0.5) or not np.all(np.isfinite(u)):
        raise DomainError("uniform variates must satisfy |u| < 1/2")
    return -b * np.sign(u) * np.log1p(-2.0 * np.abs(u))


def _draw_uniform(rng, shape) -> np.ndarray:
    # open interval (-1/2, 1/2): rng.uniform is half-open on the left
    u = rng.uniform(-0.5, 0.5, size=shape)
    return np.where(u == -0.5, 0.0, u)


def sample_posterior(model: ModelState, x, hp: Hyperparameters, rng, b: float | None = None,
                     gamma: float | None = None):
    """Reparameterized draw ``z = T(c_hat) f(x) + gamma * eps``.

    Works on one input ``(D,)`` or a batch ``(N, D)``.  Returns
    ``(z, c_hat, eps)``.
    """
    b = hp.laplace_scale if b is None else b
    gamma = hp.gamma_post if gamma is None else gamma
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    mu = np.atleast_2d(model.encode(x))
    n = mu.shape[0]
    u = _draw_uniform(rng, (n, model.dictionary.num_operators))
    eps = rng.standard_normal((n, model.dictionary.latent_dim))
    c_hat = laplace_inverse_transform(u, b)
    z = _transport_sample(model.dictionary, mu, c_hat, eps, gamma, hp.latent_scale)
    if single:
        return z[0], c_hat[0], eps[0]
    return z, c_hat, eps


def _transport_sample(dictionary, start, c_hat, eps, gamma, scale):
    T = mat_exp(dictionary.generator(c_hat))
    return (np.einsum("nij,nj->ni", T, scale * start) + gamma * eps) / scale


def log_likelihood_term(model: ModelState, x, z, zeta1: float) -> float:
    """``C1 + zeta1 |x - g(z)|^2``, i.e. ``-log p(x|z)`` with sigma = (2 zeta1)^-1/2."""
    x = np.asarray(x, dtype=np.float64)
    r = x - model.decode(z)
    D = x.shape[-1]
    sigma = (2.0 * zeta1) ** -0.5
    c1 = 0.5 * D * math.log(2 * math.pi) + D * math.log(sigma)
    return c1 + zeta1 * float(np.sum(r * r, axis=-1))


def _pair_residuals(dictionary, C, Z, U):
    T = mat_exp(dictionary.generator(C))
    return Z - np.einsum("kij,kj->ki", T, U), T


def log_variational_posterior(model: ModelState, z, x, hp: Hyperparameters, rng):
    """Max-approximated ``log q(z|x)``; returns ``(value, c_star)``."""
    s = hp.latent_scale
    mu = model.encode(np.asarray(x, dtype=np.float64))
    zs, mus = s * np.asarray(z, dtype=np.float64), s * mu
    res = infer_coefficients_batch(model.dictionary, zs[None], mus[None],
                                   hp.inference_settings(hp.zeta_q), rng)
    c = res.coefficients[0]
    r, _ = _pair_residuals(model.dictionary, c[None], zs[None], mus[None])
    value = hp.log_normalizer_latent() - hp.zeta2 * float(r[0] @ r[0]) - hp.zeta3 * float(np.abs(c).sum())
    return value, c


def log_prior(model: ModelState, z, class_label: int, hp: Hyperparameters, rng) -> float:
    """Anchor-mixture prior ``log p(z)`` for one latent point of a class."""
    idx = model.anchors.indices_for(class_label)
    s = hp.latent_scale
    U = s * model.encode(model.anchors.points[idx])
    Z = np.repeat(s * np.asarray(z, dtype=np.float64)[None], len(idx), axis=0)
    res = infer_coefficients_batch(model.dictionary, Z, U, hp.inference_settings(hp.zeta_p), rng)
    r, _ = _pair_residuals(model.dictionary, res.coefficients, Z, U)
    energy = hp.zeta4 * np.einsum("ki,ki->k", r, r) + hp.zeta5 * np.abs(res.coefficients).sum(axis=1)
    c2 = hp.log_normalizer_latent()
    if hp.closest_anchor_only:
        return c2 - float(energy.min())
    return -math.log(len(idx)) + c2 + logsumexp(-energy)


# ---------------------------------------------------------------------------
# batched objective


@dataclass
class PosteriorNoise:
    """Parameter-free variates of the reparameterized posterior draw."""

    u: np.ndarray  # (B, S, M) uniforms on (-1/2, 1/2)
    eps: np.ndarray  # (B, S, d) standard normals

    @classmethod
    def draw(cls, rng, batch: int, samples: int, num_operators: int, latent_dim: int) -> "PosteriorNoise":
        u = _draw_uniform(rng, (batch, samples, num_operators))
        eps = rng.standard_normal((batch, samples, latent_dim))
        return cls(u, eps)


@dataclass
class InferredCoefficients:
    """Coefficients from one objective evaluation, reusable as constants."""

    posterior: np.ndarray  # (n, M), one row per (point, sample)
    pairs: np.ndarray  # (P, M), one row per (sample row, anchor) pair
    pair_rows: np.ndarray  # (P,) sample row of each pair
    pair_anchors: np.ndarray  # (P,) anchor index of each pair
    iterations: np.ndarray  # CG iterations, posterior problems then pairs


@dataclass
class PhaseWeights:
    recon: float = 1.0
    prior: float = 1.0


@dataclass
class ObjectiveResult:
    value: float  # weighted objective, constants dropped, Frobenius included
    transopt: float  # posterior + prior portion, unweighted
    terms: dict  # unweighted batch means of each term
    coefficients: InferredCoefficients
    grad_encoder: list | None = None
    grad_decoder: list | None = None
    grad_anchors: np.ndarray | None = None
    grad_psi: np.ndarray | None = None
    extras: dict = field(default_factory=dict)


def _pairs_for(keys, anchors: AnchorSet):
    rows, anc = [], []
    for n, k in enumerate(keys):
        idx = anchors.indices_for(int(k))
        rows.append(np.full(idx.size, n))
        anc.append(idx)
    return np.concatenate(rows), np.concatenate(anc)


def evaluate_objective(model: ModelState, X, keys, noise: PosteriorNoise, hp: Hyperparameters,
                       rng=None, weights: PhaseWeights | None = None,
                       coefficients: InferredCoefficients | None = None, grad: bool = True,
                       recon_only: bool = False, b: float | None = None,
                       gamma: float | None = None) -> ObjectiveResult:
    """Sampled negative ELBO for a batch with fixed noise.

    Coefficients are inferred unless supplied; either way they enter the
    gradient as constants.  ``recon_only`` drops the posterior and prior
    terms (warm-up).  ``b``/``gamma`` override the sampling scales.
    """
    weights = weights or PhaseWeights()
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    keys = np.asarray(keys, dtype=np.int64).reshape(-1)
    B = X.shape[0]
    S = noise.u.shape[1]
    psi = model.dictionary
    M, d = psi.num_operators, psi.latent_dim
    if noise.u.shape != (B, S, M) or noise.eps.shape != (B, S, d) or keys.shape[0] != B:
        raise DimensionError("noise/keys do not match the batch")
    s = hp.latent_scale
    b = hp.laplace_scale if b is None else b
    gamma = hp.gamma_post if gamma is None else gamma
    n = B * S

    mu, enc_cache = mlp_forward(model.encoder, X)
    mu_t = s * np.repeat(mu, S, axis=0)  # (n, d) scaled
    x_rep = np.repeat(X, S, axis=0)
    key_rep = np.repeat(keys, S)
    c_hat = laplace_inverse_transform(noise.u.reshape(n, M), b)
    A_hat = psi.generator(c_hat)
    T_hat = mat_exp(A_hat)
    z_t = np.einsum("nij,nj->ni", T_hat, mu_t) + gamma * noise.eps.reshape(n, d)
    z = z_t / s
    xr, dec_cache = mlp_forward(model.decoder, z)
    resid_x = x_rep - xr
    recon = np.einsum("ni,ni->n", resid_x, resid_x)
    frob, frob_grad = frobenius_penalty(psi, hp.eta)

    terms = {"recon": float(recon.mean()), "frobenius": frob}
    dz_t = np.zeros((n, d))
    dmu_t = np.zeros((n, d))
    psi_grad = frob_grad.copy() if grad else None
    adj_A, adj_G, adj_c = [A_hat], [None], [c_hat]

    if recon_only:
        per_sample = weights.recon * hp.zeta1 * recon
        transopt = 0.0
        coeffs = coefficients or InferredCoefficients(
            np.zeros((n, M)), np.zeros((0, M)), np.zeros(0, np.int64), np.zeros(0, np.int64),
            np.zeros(0, np.int64))
        U_t = None
        pair_rows = pair_anchors = np.zeros(0, np.int64)
    else:
        pair_rows, pair_anchors = _pairs_for(key_rep, model.anchors)
        used = np.unique(pair_anchors)
        U_used, anc_cache = mlp_forward(model.encoder, model.anchors.points[used])
        U_t = np.zeros((len(model.anchors), d))
        U_t[used] = s * U_used
        if coefficients is None:
            if rng is None:
                raise ValueError("rng is required when coefficients must be inferred")
            P = pair_rows.size
            Zall = np.concatenate([z_t, z_t[pair_rows]])
            Sall = np.concatenate([mu_t, U_t[pair_anchors]])
            sparsity = np.concatenate([np.full(n, hp.zeta_q), np.full(P, hp.zeta_p)])
            res = infer_coefficients_batch(psi, Zall, Sall, hp.inference_settings(hp.zeta_q), rng,
                                           sparsity=sparsity)
            coeffs = InferredCoefficients(res.coefficients[:n], res.coefficients[n:], pair_rows,
                                          pair_anchors, res.iterations)
        else:
            coeffs = coefficients
            if coeffs.pairs.shape[0] != pair_rows.size or not np.array_equal(coeffs.pair_anchors, pair_anchors):
                raise DimensionError("supplied coefficients do not match this batch's anchor pairs")
        c_q, c_a = coeffs.posterior, coeffs.pairs
        A_q = psi.generator(c_q)
        T_q = mat_exp(A_q)
        r_q = z_t - np.einsum("nij,nj->ni", T_q, mu_t)
        post_fid = np.einsum("ni,ni->n", r_q, r_q)
        post_sp = np.abs(c_q).sum(axis=1)
        A_a = psi.generator(c_a)
        T_a = mat_exp(A_a)
        u_pair = U_t[pair_anchors]
        r_a = z_t[pair_rows] - np.einsum("kij,kj->ki", T_a, u_pair)
        energy = hp.zeta4 * np.einsum("ki,ki->k", r_a, r_a) + hp.zeta5 * np.abs(c_a).sum(axis=1)

        # per-row prior value and responsibility of each pair
        prior = np.empty(n)
        resp = np.zeros(pair_rows.size)
        order = np.argsort(pair_rows, kind="stable")
        bounds = np.searchsorted(pair_rows[order], np.arange(n + 1))
        for row in range(n):
            sel = order[bounds[row]:bounds[row + 1]]
            e = energy[sel]
            if hp.closest_anchor_only:
                j = int(np.argmin(e))
                prior[row] = e[j]
                resp[sel[j]] = 1.0
            else:
                m = e.min()
                w = np.exp(-(e - m))
                tot = w.sum()
                prior[row] = m - math.log(tot)
                resp[sel] = w / tot
        per_sample = (weights.recon * hp.zeta1 * recon - hp.zeta2 * post_fid - hp.zeta3 * post_sp
                      + weights.prior * prior)
        transopt = float(np.mean(-hp.zeta2 * post_fid - hp.zeta3 * post_sp + prior))
        terms.update(posterior_fidelity=float(post_fid.mean()), posterior_sparsity=float(post_sp.mean()),
                     prior=float(prior.mean()))
        if grad:
            wpair = (weights.prior * resp * 2.0 * hp.zeta4)[:, None] * r_a  # dE/dz_t per pair
            dz_t += -2.0 * hp.zeta2 * r_q
            np.add.at(dz_t, pair_rows, wpair)
            dmu_t += 2.0 * hp.zeta2 * np.einsum("nji,nj->ni", T_q, r_q)
            du_pair = -np.einsum("kji,kj->ki", T_a, wpair)
            dU_t = np.zeros((len(model.anchors), d))
            np.add.at(dU_t, pair_anchors, du_pair)
            adj_A += [A_q, A_a]
            adj_G += [2.0 * hp.zeta2 * r_q[:, :, None] * mu_t[:, None, :],
                      -wpair[:, :, None] * u_pair[:, None, :]]
            adj_c += [c_q, c_a]

    value = float(per_sample.mean()) + frob
    if not math.isfinite(value):
        raise NumericFailure(f"non-finite objective; terms={terms}")
    result = ObjectiveResult(value=value, transopt=transopt, terms=terms, coefficients=coeffs)
    result.extras["per_sample"] = {"recon": recon} if recon_only else {
        "recon": recon, "posterior_fidelity": post_fid, "posterior_sparsity": post_sp, "prior": prior}
    if not grad:
        return result

    inv_n = 1.0 / n
    dxr = weights.recon * hp.zeta1 * (-2.0) * resid_x
    dec_grads, dz = mlp_backward(model.decoder, dec_cache, dxr * inv_n)
    dz_t = dz / s + dz_t * inv_n
    dmu_t = dmu_t * inv_n + np.einsum("nji,nj->ni", T_hat, dz_t)
    adj_G[0] = dz_t[:, :, None] * mu_t[:, None, :]
    if len(adj_G) > 1:
        adj_G[1] = adj_G[1] * inv_n
        adj_G[2] = adj_G[2] * inv_n
    dA = expm_adjoint_frechet(np.concatenate(adj_A), np.concatenate(adj_G))
    psi_grad += np.einsum("km,kij->mij", np.concatenate(adj_c), dA)

    dmu = s * dmu_t.reshape(B, S, d).sum(axis=1)
    enc_grads, _ = mlp_backward(model.encoder, enc_cache, dmu)
    grad_anchors = np.zeros_like(model.anchors.points)
    if U_t is not None:
        dU = s * dU_t[used] * inv_n
        enc_a, dA_in = mlp_backward(model.encoder, anc_cache, dU)
        enc_grads = [g1 + g2 for g1, g2 in zip(enc_grads, enc_a)]
        grad_anchors[used] = dA_in
    result.grad_encoder = enc_grads
    result.grad_decoder = dec_grads
    result.grad_anchors = grad_anchors
    result.grad_psi = psi_grad
    return result


def full_objective(model: ModelState, X, keys, hp: Hyperparameters, rng,
                   weights: PhaseWeights | None = None, grad: bool = True) -> ObjectiveResult:
    """Draw posterior noise, infer coefficients, evaluate objective and gradients.

    Restart initializations come from a child generator whose seed is kept
    in ``extras["inference_seed"]`` so a re-evaluation can repeat them.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[0] == 0:
        raise ConfigurationError("empty batch")
    noise = PosteriorNoise.draw(rng, X.shape[0], hp.samples_per_point,
                                model.dictionary.num_operators, model.dictionary.latent_dim)
    seed = int(rng.integers(2**63))
    res = evaluate_objective(model, X, keys, noise, hp, np.random.default_rng(seed), weights, grad=grad)
    res.extras["noise"] = noise
    res.extras["inference_seed"] = seed
    return res
