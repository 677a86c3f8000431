"""Metrics: importance-weighted log-likelihood, reconstruction error, posterior
contours, prior sampling and training-run diagnostics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigurationError, DimensionError
from .model import (Hyperparameters, ModelState, PosteriorNoise, _transport_sample,
                    evaluate_objective, laplace_inverse_transform, _draw_uniform)
from .train import TrainingLog
from .transport import infer_coefficients_batch, transform


def _fmt(v) -> str:
    return format(float(v), ".17g")


def _check_model(model: ModelState, X, hp: Hyperparameters):
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != model.encoder.input_dim:
        raise ConfigurationError(f"data has {X.shape[1]} columns, model expects {model.encoder.input_dim}")
    if hp.latent_dim != model.dictionary.latent_dim or hp.num_operators != model.dictionary.num_operators:
        raise ConfigurationError("hyperparameters do not match the model's latent_dim/num_operators")
    return X


def likelihood_hyperparameters(hp: Hyperparameters) -> Hyperparameters:
    """Weights tied to the sampling scales, as the likelihood estimate requires."""
    z2 = 0.5 / hp.gamma_post ** 2
    z3 = 1.0 / hp.laplace_scale
    return replace(hp, zeta2=z2, zeta4=z2, zeta3=z3, zeta5=z3, inference_fidelity=1.0)


def log_weights(model: ModelState, X, keys, hp: Hyperparameters, num_samples: int, rng) -> np.ndarray:
    """``log p(x|z) + log p(z) - log q(z|x)`` for ``num_samples`` draws per row: shape (N, K)."""
    X = _check_model(model, X, hp)
    keys = np.asarray(keys, dtype=np.int64).reshape(-1)
    if hp.gamma_post <= 0:
        raise ConfigurationError("likelihood estimation needs gamma_post > 0")
    ev = likelihood_hyperparameters(hp)
    N, K = X.shape[0], num_samples
    noise = PosteriorNoise.draw(rng, N, K, hp.num_operators, hp.latent_dim)
    res = evaluate_objective(model, X, keys, noise, ev, rng, grad=False)
    ps = res.extras["per_sample"]
    D = X.shape[1]
    sigma = (2.0 * ev.zeta1) ** -0.5
    c1 = 0.5 * D * math.log(2 * math.pi) + D * math.log(sigma)
    c2 = ev.log_normalizer_latent()
    log_px = -(c1 + ev.zeta1 * ps["recon"])
    log_q = c2 - ev.zeta2 * ps["posterior_fidelity"] - ev.zeta3 * ps["posterior_sparsity"]
    log_pz = c2 - ps["prior"]
    if not ev.closest_anchor_only:
        counts = np.array([model.anchors.indices_for(int(k)).size for k in np.repeat(keys, K)])
        log_pz = log_pz - np.log(counts)
    return (log_px + log_pz - log_q).reshape(N, K)


def estimated_log_likelihood(model: ModelState, X, keys, hp: Hyperparameters, num_points: int = 500,
                             num_samples: int = 100, rng=None, chunk: int = 50) -> float:
    """Importance-weighted estimate of the mean ``log p(x)`` over ``num_points`` rows.

    Rows are drawn without replacement; all normalizing constants are kept.
    """
    X = _check_model(model, X, hp)
    keys = np.asarray(keys, dtype=np.int64).reshape(-1)
    if not 1 <= num_points <= X.shape[0]:
        raise ConfigurationError(f"num_points must be in [1, {X.shape[0]}]")
    if num_samples < 1:
        raise ConfigurationError("num_samples must be >= 1")
    rng = np.random.default_rng(0) if rng is None else rng
    rows = np.sort(rng.choice(X.shape[0], size=num_points, replace=False))
    totals = []
    for start in range(0, num_points, chunk):
        sel = rows[start:start + chunk]
        lw = log_weights(model, X[sel], keys[sel], hp, num_samples, rng)
        totals.append(logsumexp(lw, axis=1) - math.log(num_samples))
    return float(np.mean(np.concatenate(totals)))


def reconstruction_mse(model: ModelState, X) -> float:
    """Mean over rows of ``|x - g(f(x))|^2 / D`` (no sampling)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    r = X - model.decode(model.encode(X))
    return float(np.mean(np.sum(r * r, axis=1) / X.shape[1]))


# --- posterior contours -------------------------------------------------------

@dataclass
class GridSpec:
    z1_range: tuple[float, float]
    z2_range: tuple[float, float]
    resolution: int

    @classmethod
    def around(cls, centre, half_width: float, resolution: int) -> "GridSpec":
        c = np.asarray(centre, dtype=np.float64)
        return cls((c[0] - half_width, c[0] + half_width), (c[1] - half_width, c[1] + half_width),
                   resolution)


@dataclass
class ContourGrid:
    """Per-cell terms of ``log q(z|x)`` on a regular 2-D grid (rows follow z2)."""

    z1: np.ndarray  # (R,)
    z2: np.ndarray  # (R,)
    fidelity: np.ndarray  # (R, R)
    sparsity: np.ndarray  # (R, R)
    total: np.ndarray  # (R, R)
    constant: float
    encoding: np.ndarray

    def argmax_cell(self) -> tuple[int, int]:
        return tuple(int(i) for i in np.unravel_index(np.argmax(self.total), self.total.shape))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["z1", "z2", "fidelity", "sparsity", "total"])
            for i, b in enumerate(self.z2):
                for j, a in enumerate(self.z1):
                    w.writerow([_fmt(a), _fmt(b), _fmt(self.fidelity[i, j]),
                                _fmt(self.sparsity[i, j]), _fmt(self.total[i, j])])


def posterior_contour(model: ModelState, x, hp: Hyperparameters, grid: GridSpec, rng) -> ContourGrid:
    """Evaluate both terms of the max-approximated ``log q(z|x)`` at every grid cell."""
    if model.dictionary.latent_dim != 2:
        raise DimensionError("posterior contours need a 2-D latent space")
    if grid.resolution < 2:
        raise ConfigurationError("grid resolution must be >= 2")
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    mu = model.encode(x)
    z1 = np.linspace(*grid.z1_range, grid.resolution)
    z2 = np.linspace(*grid.z2_range, grid.resolution)
    Z = np.stack(np.meshgrid(z1, z2), axis=-1).reshape(-1, 2)
    s = hp.latent_scale
    res = infer_coefficients_batch(model.dictionary, s * Z, np.repeat(s * mu[None], len(Z), axis=0),
                                   hp.inference_settings(hp.zeta_q), rng)
    C = res.coefficients
    r = s * Z - np.einsum("kij,j->ki", transform(model.dictionary, C), s * mu)
    fid = -hp.zeta2 * np.einsum("ki,ki->k", r, r)
    sp = -hp.zeta3 * np.abs(C).sum(axis=1)
    c2 = hp.log_normalizer_latent()
    shape = (grid.resolution, grid.resolution)
    return ContourGrid(z1, z2, fid.reshape(shape), sp.reshape(shape), (c2 + fid + sp).reshape(shape),
                       c2, mu)


# --- prior sampling -----------------------------------------------------------

def prior_samples(model: ModelState, class_label: int, n: int, b_vis: float, gamma_vis: float, rng,
                  hp: Hyperparameters):
    """Draw ``n`` latent points from the anchor-mixture prior of one class.

    Each draw picks a class anchor uniformly and transports its encoding
    with Laplace(``b_vis``) coefficients plus ``gamma_vis`` Gaussian noise.
    ``b_vis = 0`` means no transport.  Returns ``(Z, anchor_index)``.
    """
    idx = model.anchors.indices_for(class_label)
    if n < 1:
        raise ConfigurationError("n must be >= 1")
    if b_vis < 0 or gamma_vis < 0:
        raise ConfigurationError("b_vis and gamma_vis must be >= 0")
    tags = idx[rng.integers(0, idx.size, size=n)]
    M, d = model.dictionary.num_operators, model.dictionary.latent_dim
    u = _draw_uniform(rng, (n, M))
    eps = rng.standard_normal((n, d))
    c = laplace_inverse_transform(u, b_vis) if b_vis > 0 else np.zeros((n, M))
    U = model.encode(model.anchors.points)[tags]
    return _transport_sample(model.dictionary, U, c, eps, gamma_vis, hp.latent_scale), tags


# --- diagnostics --------------------------------------------------------------

@dataclass
class DiagnosticsSummary:
    steps: int
    psi_steps: int
    rejected_fraction: float
    infer_iters_mean: float
    infer_iters_p95: float
    wall_time_total: float
    wall_time_step_mean: float
    wall_time_step_p95: float
    frobenius_norms: list
    suspect: bool

    def as_rows(self) -> list[tuple[str, object]]:
        rows = [("steps", self.steps), ("psi_steps", self.psi_steps),
                ("rejected_fraction", self.rejected_fraction),
                ("infer_iters_mean", self.infer_iters_mean), ("infer_iters_p95", self.infer_iters_p95),
                ("wall_time_total", self.wall_time_total),
                ("wall_time_step_mean", self.wall_time_step_mean),
                ("wall_time_step_p95", self.wall_time_step_p95)]
        rows += [(f"frobenius_{m}", v) for m, v in enumerate(self.frobenius_norms)]
        rows.append(("suspect", int(self.suspect)))
        return rows


SUSPECT_REJECTED_FRACTION = 0.5


def training_diagnostics(log: TrainingLog, dictionary=None) -> DiagnosticsSummary:
    """Signals that flag a run whose dictionary failed to fit the data.

    A run is ``suspect`` when more than half of its dictionary steps were
    rejected.  Frobenius norms come from ``dictionary`` when given, else
    from the norms the trainer stored at the end of the run.
    """
    if len(log) == 0:
        raise ConfigurationError("training log is empty")
    acc = [r.accepted for r in log.rows if r.accepted is not None]
    rejected = 1.0 - float(np.mean(acc)) if acc else 0.0
    iters = log.column("infer_iters_mean").astype(float)
    active = iters[[r.phase != "warmup" for r in log.rows]]
    if active.size == 0:
        active = np.zeros(1)
    wt = np.asarray(log.wall_times, dtype=float)
    wt = wt[np.isfinite(wt)]
    if dictionary is not None:
        norms = [float(v) for v in np.sqrt((dictionary.operators ** 2).sum(axis=(1, 2)))]
    else:
        norms = list(log.final_frobenius)
    return DiagnosticsSummary(
        steps=len(log), psi_steps=len(acc), rejected_fraction=rejected,
        infer_iters_mean=float(active.mean()), infer_iters_p95=float(np.percentile(active, 95)),
        wall_time_total=float(wt.sum()) if wt.size else float("nan"),
        wall_time_step_mean=float(wt.mean()) if wt.size else float("nan"),
        wall_time_step_p95=float(np.percentile(wt, 95)) if wt.size else float("nan"),
        frobenius_norms=norms, suspect=rejected > SUSPECT_REJECTED_FRACTION)


def write_key_values(path, rows) -> None:
    """Metric table as ``key,value`` rows."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["key", "value"])
        for k, v in rows:
            w.writerow([k, v if isinstance(v, (str, int, np.integer)) else _fmt(v)])
