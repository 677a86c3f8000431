"""Transport operator manifold model.

A dictionary of ``M`` generators ``Psi_m`` (each ``d x d``) moves a latent
point ``z0`` to ``expm(sum_m Psi_m c_m) @ z0``.  Coefficients linking two
points are found by minimizing ``fidelity * |z - T(c) mu|^2 + sparsity *
sum|c|`` with Polak-Ribiere nonlinear conjugate gradient.

Coefficient inference is vectorized: :func:`infer_coefficients_batch`
solves many independent problems in lock-step, each with its own line
search, which is what the trainer uses.  :func:`infer_coefficients` is the
single-pair front end.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, NumericFailure, NumericInputError
from .linalg import expm_2x2, expm_adjoint_frechet, expm_frechet_2x2, mat_exp

# Generators with a larger 1-norm are treated as an infinite objective in
# the line search instead of being exponentiated.
MAX_GENERATOR_NORM = 1e4

# Step sizes tried together in the first batched line-search evaluation.
LADDER_DOUBLINGS = 4
LADDER_HALVINGS = 12


@dataclass
class TransportDictionary:
    """``M`` transport operators stored as one ``(M, d, d)`` array."""

    operators: np.ndarray

    def __post_init__(self):
        ops = np.asarray(self.operators, dtype=np.float64)
        if ops.ndim != 3 or ops.shape[1] != ops.shape[2]:
            raise DimensionError(f"operators must have shape (M, d, d), got {ops.shape}")
        if not np.all(np.isfinite(ops)):
            raise NumericInputError("transport operators have non-finite entries")
        self.operators = ops

    @property
    def num_operators(self) -> int:
        return self.operators.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.operators.shape[1]

    @classmethod
    def random(cls, num_operators: int, latent_dim: int, rng, std: float = 0.01):
        return cls(rng.normal(0.0, std, size=(num_operators, latent_dim, latent_dim)))

    def copy(self) -> "TransportDictionary":
        return TransportDictionary(self.operators.copy())

    def generator(self, c: np.ndarray) -> np.ndarray:
        """``sum_m Psi_m c_m``; ``c`` may be ``(M,)`` or a stack ``(..., M)``."""
        c = np.asarray(c, dtype=np.float64)
        if c.shape[-1] != self.num_operators:
            raise DimensionError(
                f"coefficient length {c.shape[-1]} != dictionary size {self.num_operators}")
        return np.tensordot(c, self.operators, axes=([-1], [0]))


@dataclass
class InferenceSettings:
    """Knobs for coefficient inference.

    ``init_low``/``init_high`` bound the uniform restart initialization and
    ``l1_smoothing`` is the epsilon in ``sqrt(c^2 + eps)``.
    """

    sparsity_weight: float = 1e-6
    fidelity_weight: float = 1.0
    max_iterations: int = 200
    gradient_tolerance: float = 1e-6
    num_restarts: int = 1
    init_low: float = -0.1
    init_high: float = 0.1
    l1_smoothing: float = 1e-8
    armijo: float = 1e-4
    shrink: float = 0.5
    max_halvings: int = 40
    max_doublings: int = 30

    def __post_init__(self):
        if self.gradient_tolerance <= 0 or self.l1_smoothing <= 0:
            raise ValueError("tolerances must be positive")
        if self.num_restarts < 1:
            raise ValueError("num_restarts must be >= 1")
        if not self.init_low < self.init_high:
            raise ValueError("init_low must be < init_high")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")


@dataclass
class InferenceResult:
    """Best-of-restarts solutions for a batch of K problems."""

    coefficients: np.ndarray  # (K, M)
    objective: np.ndarray  # (K,), exact |c| in the sparsity term
    iterations: np.ndarray  # (K,), CG iterations summed over restarts
    restart_objectives: np.ndarray  # (K, R)
    history: list = field(default_factory=list)  # per-iteration (K*R,) values


def transform(dictionary: TransportDictionary, c) -> np.ndarray:
    """``T(c) = expm(sum_m Psi_m c_m)``."""
    return mat_exp(dictionary.generator(c))


def apply_transport(dictionary: TransportDictionary, c, z0) -> np.ndarray:
    z0 = np.asarray(z0, dtype=np.float64)
    if z0.shape[-1] != dictionary.latent_dim:
        raise DimensionError(f"z0 has dim {z0.shape[-1]}, dictionary expects {dictionary.latent_dim}")
    return np.einsum("...ij,...j->...i", transform(dictionary, c), z0)


class _Problem:
    """Vectorized smoothed objective for a stack of inference problems."""

    def __init__(self, psi, Z, MU, fidelity, sparsity, eps):
        self.psi = psi
        # inference dominates training time; 2-D latents use the closed form
        self.closed_form = psi.shape[-1] == 2
        self.expm = expm_2x2 if self.closed_form else mat_exp
        self.Z = Z
        self.MU = MU
        self.fidelity = fidelity
        self.sparsity = sparsity
        self.eps = eps

    def value(self, C, idx, smooth=True):
        A = np.tensordot(C, self.psi, axes=([-1], [0]))
        norms = np.abs(A).sum(axis=-2).max(axis=-1)
        out = np.full(C.shape[0], np.inf)
        ok = np.nonzero(norms <= MAX_GENERATOR_NORM)[0]
        if ok.size:
            T = self.expm(A[ok])
            r = self.Z[idx[ok]] - np.einsum("kij,kj->ki", T, self.MU[idx[ok]])
            l1 = np.sqrt(C[ok] ** 2 + self.eps) if smooth else np.abs(C[ok])
            out[ok] = (self.fidelity[idx[ok]] * np.einsum("ki,ki->k", r, r)
                       + self.sparsity[idx[ok]] * l1.sum(axis=-1))
        return out

    def value_and_grad(self, C, idx):
        A = np.tensordot(C, self.psi, axes=([-1], [0]))
        mu = self.MU[idx]
        fw = self.fidelity[idx]
        sw = self.sparsity[idx]
        if self.closed_form:
            # derivative of T along each operator, (K, M, 2, 2)
            T, dT = expm_frechet_2x2(A[:, None], self.psi[None])
            T = T[:, 0]
            r = self.Z[idx] - np.einsum("kij,kj->ki", T, mu)
            g = (-2.0 * fw)[:, None] * np.einsum("ki,kmij,kj->km", r, dT, mu)
        else:
            T = mat_exp(A)
            r = self.Z[idx] - np.einsum("kij,kj->ki", T, mu)
            G = (-2.0 * fw)[:, None, None] * r[:, :, None] * mu[:, None, :]
            g = np.einsum("kij,mij->km", expm_adjoint_frechet(A, G), self.psi)
        root = np.sqrt(C ** 2 + self.eps)
        f = fw * np.einsum("ki,ki->k", r, r) + sw * root.sum(axis=-1)
        return f, g + sw[:, None] * C / root


def _try_steps(prob, C, direction, idx, rows, base, factors):
    """Objective at ``C + base * factor * direction`` for every listed factor."""
    M = C.shape[1]
    trial = base[:, None] * factors[None, :]
    pts = C[rows, None, :] + trial[:, :, None] * direction[rows, None, :]
    vals = prob.value(pts.reshape(-1, M), np.repeat(idx[rows], factors.size))
    return trial, vals.reshape(rows.size, factors.size)


def _replay_expansion(live, trial, vals, armijo_ok, step, f_new, rows=None):
    """Advance doubling problems through precomputed columns; return survivors."""
    out = live if rows is None else rows[live]
    for k in range(trial.shape[1]):
        if live.size == 0:
            break
        better = armijo_ok[live, k] & (vals[live, k] < f_new[out])
        live, out = live[better], out[better]
        step[out] = trial[live, k]
        f_new[out] = vals[live, k]
    return out


def _replay_backtrack(live, trial, vals, armijo_ok, step, f_new, rows=None):
    """Accept the first Armijo column per problem; return problems still failing."""
    out = live if rows is None else rows[live]
    for k in range(trial.shape[1]):
        if live.size == 0:
            break
        good = armijo_ok[live, k]
        step[out[good]] = trial[live[good], k]
        f_new[out[good]] = vals[live[good], k]
        live, out = live[~good], out[~good]
    return out


def _line_search(prob, C, f, g, direction, alpha0, idx, s, refine=True):
    """Armijo backtracking with forward expansion, per problem.

    Returns accepted step sizes (0 where no decrease was found) and the
    objective at the new points.
    """
    slope = np.einsum("km,km->k", g, direction)

    def thresh(rows, trial):
        return f[rows, None] + s.armijo * trial * slope[rows, None]

    # Candidate steps are evaluated speculatively in batched calls and the
    # sequential backtracking/expansion rules are then replayed on the
    # results, which picks the same step as trying them one at a time.
    ups = min(s.max_doublings, LADDER_DOUBLINGS)
    downs = min(s.max_halvings, LADDER_HALVINGS)
    everyone = np.arange(C.shape[0])
    factors = np.concatenate([2.0 ** np.arange(ups + 1), s.shrink ** np.arange(1, downs + 1)])
    trial, vals = _try_steps(prob, C, direction, idx, everyone, alpha0, factors)
    armijo_ok = vals <= thresh(everyone, trial)

    ok = armijo_ok[:, 0]
    f_new = np.where(ok, vals[:, 0], f)
    step = np.where(ok, alpha0, 0.0)

    # expansion: keep doubling while Armijo holds and the value improves
    up = slice(1, ups + 1)
    grow = _replay_expansion(np.nonzero(ok)[0], trial[:, up], vals[:, up], armijo_ok[:, up], step, f_new)
    if grow.size and s.max_doublings > ups:
        more = 2.0 ** np.arange(1, s.max_doublings - ups + 1)
        t2, v2 = _try_steps(prob, C, direction, idx, grow, step[grow], more)
        _replay_expansion(np.arange(grow.size), t2, v2, v2 <= thresh(grow, t2), step, f_new, rows=grow)

    # backtracking: first halving that satisfies Armijo
    shrink = _replay_backtrack(np.nonzero(~ok)[0], trial[:, ups + 1:], vals[:, ups + 1:],
                               armijo_ok[:, ups + 1:], step, f_new)
    if shrink.size and s.max_halvings > downs:
        more = s.shrink ** np.arange(1, s.max_halvings - downs + 1)
        t2, v2 = _try_steps(prob, C, direction, idx, shrink, alpha0[shrink] * s.shrink ** downs, more)
        _replay_backtrack(np.arange(shrink.size), t2, v2, v2 <= thresh(shrink, t2), step, f_new, rows=shrink)

    # one quadratic-model refinement through (0, f, slope) and (step, f_new);
    # stops Armijo steps from bouncing across a valley floor
    moved = np.nonzero(step > 0)[0]
    if refine and moved.size:
        a = step[moved]
        curv = f_new[moved] - f[moved] - slope[moved] * a
        with np.errstate(divide="ignore", invalid="ignore"):
            a_q = -slope[moved] * a * a / (2.0 * curv)
        use = (curv > 0) & np.isfinite(a_q) & (np.abs(a_q - a) > 1e-3 * a)
        cand = moved[use]
        if cand.size:
            aq = a_q[use]
            ft = prob.value(C[cand] + aq[:, None] * direction[cand], idx[cand])
            better = ft < f_new[cand]
            step[cand[better]] = aq[better]
            f_new[cand[better]] = ft[better]
    return step, f_new


def _conjugate_gradient(prob, C, idx, s, history=None):
    P, M = C.shape
    iterations = np.zeros(P, dtype=np.int64)
    with np.errstate(over="ignore", invalid="ignore"):
        f, g = prob.value_and_grad(C, idx)
        bad = np.nonzero(~np.isfinite(f))[0]
        if bad.size:
            raise NumericFailure(f"non-finite objective at restart start (problem {int(bad[0])})")
        direction = -g
        alpha = np.ones(P)
        active = np.arange(P)
        since_restart = np.zeros(P, dtype=np.int64)
        if history is not None:
            history.append(f.copy())
        for _ in range(s.max_iterations):
            gnorm = np.sqrt(np.einsum("km,km->k", g[active], g[active]))
            active = active[gnorm > s.gradient_tolerance]
            if active.size == 0:
                break
            ga, da = g[active], direction[active]
            downhill = np.einsum("km,km->k", ga, da) < 0
            da = np.where(downhill[:, None], da, -ga)
            step, f_new = _line_search(prob, C[active], f[active], ga, da,
                                       alpha[active], idx[active], s)
            moved = step > 0
            iterations[active] += 1
            if not np.all(np.isfinite(f_new)):
                raise NumericFailure("non-finite objective accepted by line search")
            C[active] = C[active] + step[:, None] * da
            f[active] = f_new
            alpha[active] = np.where(moved, step, alpha[active])
            active = active[moved]
            if history is not None:
                history.append(f.copy())
            if active.size == 0:
                break
            # stalled problems drop out; the rest get a fresh gradient
            _, g_new = prob.value_and_grad(C[active], idx[active])
            g_old = g[active]
            beta = np.einsum("km,km->k", g_new, g_new - g_old) / np.maximum(
                np.einsum("km,km->k", g_old, g_old), 1e-300)
            beta = np.maximum(beta, 0.0)
            since_restart[active] += 1
            reset = since_restart[active] >= M
            beta[reset] = 0.0
            since_restart[active[reset]] = 0
            direction[active] = -g_new + beta[:, None] * da[moved]
            g[active] = g_new
    return C, f, iterations


def infer_coefficients_batch(dictionary: TransportDictionary, Z, MU, settings: InferenceSettings,
                             rng, sparsity=None, fidelity=None, history=False) -> InferenceResult:
    """Infer transport coefficients for K independent (z, mu) pairs.

    Parameters
    ----------
    Z, MU : ndarray, shape (K, d)
        Targets and starting points.
    sparsity, fidelity : float or ndarray (K,), optional
        Per-problem weights; default to the settings values.
    history : bool
        Record the objective of every problem after each CG iteration.
    """
    psi = dictionary.operators
    M, d = psi.shape[0], psi.shape[1]
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    MU = np.atleast_2d(np.asarray(MU, dtype=np.float64))
    if Z.shape != MU.shape or Z.shape[-1] != d:
        raise DimensionError(f"Z {Z.shape} and MU {MU.shape} must both be (K, {d})")
    if not (np.all(np.isfinite(Z)) and np.all(np.isfinite(MU))):
        raise NumericInputError("inference endpoints have non-finite entries")
    K = Z.shape[0]
    R = settings.num_restarts
    sw = np.broadcast_to(np.asarray(settings.sparsity_weight if sparsity is None else sparsity,
                                    dtype=np.float64), (K,)).copy()
    fw = np.broadcast_to(np.asarray(settings.fidelity_weight if fidelity is None else fidelity,
                                    dtype=np.float64), (K,)).copy()
    prob = _Problem(psi, Z, MU, fw, sw, settings.l1_smoothing)
    # restart-major layout: row r*K + k is restart r of problem k
    C0 = rng.uniform(settings.init_low, settings.init_high, size=(R, K, M)).reshape(R * K, M)
    idx = np.tile(np.arange(K), R)
    trace = [] if history else None
    try:
        C, _, iters = _conjugate_gradient(prob, C0, idx, settings, trace)
    except NumericFailure as exc:
        raise NumericFailure(f"coefficient inference failed: {exc}") from exc
    with np.errstate(over="ignore", invalid="ignore"):
        exact = prob.value(C, idx, smooth=False).reshape(R, K)
    bad = ~np.isfinite(exact)
    if np.any(bad):
        r, k = np.argwhere(bad)[0]
        raise NumericFailure(f"non-finite objective in restart {r} of problem {k}")
    best = np.argmin(exact, axis=0)
    C = C.reshape(R, K, M)
    return InferenceResult(
        coefficients=C[best, np.arange(K)],
        objective=exact[best, np.arange(K)],
        iterations=iters.reshape(R, K).sum(axis=0),
        restart_objectives=exact.T.copy(),
        history=trace or [],
    )


def infer_coefficients(dictionary: TransportDictionary, z, mu, settings: InferenceSettings, rng):
    """Coefficients ``c*`` moving ``mu`` onto ``z``; returns ``(c*, objective)``."""
    z = np.asarray(z, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    if z.shape != (dictionary.latent_dim,) or mu.shape != z.shape:
        raise DimensionError(f"z {z.shape} and mu {mu.shape} must be ({dictionary.latent_dim},)")
    res = infer_coefficients_batch(dictionary, z[None], mu[None], settings, rng)
    return res.coefficients[0], float(res.objective[0])


def dictionary_gradient(dictionary: TransportDictionary, c, z, mu, fidelity_weight: float) -> np.ndarray:
    """Gradient of ``fidelity_weight * |z - T(c) mu|^2`` w.r.t. each operator.

    ``c`` is held fixed.  Accepts single vectors or stacks ``(K, ...)``; for
    stacks the per-pair gradients are summed.
    """
    c = np.asarray(c, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    d = dictionary.latent_dim
    if z.shape[-1] != d or mu.shape != z.shape or c.shape[-1] != dictionary.num_operators:
        raise DimensionError("dimension mismatch between c, z, mu and the dictionary")
    c2, z2, mu2 = np.atleast_2d(c), np.atleast_2d(z), np.atleast_2d(mu)
    A = dictionary.generator(c2)
    T = mat_exp(A)
    r = z2 - np.einsum("kij,kj->ki", T, mu2)
    G = -2.0 * fidelity_weight * r[:, :, None] * mu2[:, None, :]
    dA = expm_adjoint_frechet(A, G)
    return np.einsum("km,kij->mij", c2, dA)


def frobenius_penalty(dictionary: TransportDictionary, eta: float):
    """``(eta/2) sum_m |Psi_m|_F^2`` and its gradient ``eta * Psi``."""
    psi = dictionary.operators
    return 0.5 * eta * float(np.sum(psi * psi)), eta * psi


def orbit(dictionary: TransportDictionary, operator_index: int, z0, num_steps: int,
          extent: float = 1.0) -> np.ndarray:
    """Points ``expm(Psi_m * extent * t / T) z0`` for ``t = 0..T``.

    ``extent`` stretches (or, when negative, reverses) the flow time.
    ``num_steps = 0`` yields just ``z0``.
    """
    if not 0 <= operator_index < dictionary.num_operators:
        raise IndexError(f"operator index {operator_index} outside [0, {dictionary.num_operators})")
    if num_steps < 0:
        raise ValueError("num_steps must be >= 0")
    z0 = np.asarray(z0, dtype=np.float64)
    if z0.shape != (dictionary.latent_dim,):
        raise DimensionError(f"z0 must have shape ({dictionary.latent_dim},)")
    if num_steps == 0:
        return z0[None].copy()
    t = np.arange(num_steps + 1) / num_steps * extent
    return _flow_points(t[:, None, None] * dictionary.operators[operator_index], z0)


def _flow_points(generators, z0) -> np.ndarray:
    with np.errstate(over="ignore", invalid="ignore"):
        pts = mat_exp(generators) @ z0
    pts[0] = z0
    if not np.all(np.isfinite(pts)):
        raise NumericFailure("transported points overflowed; shorten the flow or check the dictionary")
    return pts


def interpolate_path(dictionary: TransportDictionary, c_star, z0, num_steps: int) -> np.ndarray:
    """Points ``expm(t * sum_m Psi_m c*_m) z0`` for ``t`` in ``0, 1/n, ..., 1``."""
    if num_steps < 1:
        raise ValueError("num_steps must be >= 1")
    c_star = np.asarray(c_star, dtype=np.float64)
    z0 = np.asarray(z0, dtype=np.float64)
    if z0.shape != (dictionary.latent_dim,):
        raise DimensionError(f"z0 must have shape ({dictionary.latent_dim},)")
    t = np.arange(num_steps + 1) / num_steps
    return _flow_points(t[:, None, None] * dictionary.generator(c_star), z0)
