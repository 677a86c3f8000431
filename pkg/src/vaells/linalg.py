"""Dense matrix kernels: matrix exponential, its Frechet derivative, logsumexp.

All routines accept a single ``(n, n)`` matrix or a stack ``(..., n, n)``.
Stacks are processed elementwise: every matrix gets its own Pade order and
number of squarings, so a result never depends on which other matrices
happen to share the stack.
"""

from __future__ import annotations

import numpy as np
from scipy.special import logsumexp as _scipy_logsumexp

from .errors import DimensionError, NumericInputError

__all__ = ["mat_exp", "expm_2x2", "expm_frechet_2x2", "mat_exp_frechet", "expm_adjoint_frechet", "logsumexp"]

# Higham (2005) backward-error thresholds on the 1-norm for each Pade order.
_THETA = {
    3: 1.495585217958292e-2,
    5: 2.539398330063230e-1,
    7: 9.504178996162932e-1,
    9: 2.097847961257068e0,
    13: 5.371920351148152e0,
}

_PADE = {
    3: (120.0, 60.0, 12.0, 1.0),
    5: (30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0),
    7: (17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0),
    9: (17643225600.0, 8821612800.0, 2075673600.0, 302702400.0, 30270240.0,
        2162160.0, 110880.0, 3960.0, 90.0, 1.0),
    13: (64764752532480000.0, 32382376266240000.0, 7771770303897600.0,
         1187353796428800.0, 129060195264000.0, 10559470521600.0,
         670442572800.0, 33522128640.0, 1323241920.0, 40840800.0, 960960.0,
         16380.0, 182.0, 1.0),
}


def _check_square(A: np.ndarray, name: str = "A") -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim < 2 or A.shape[-1] != A.shape[-2]:
        raise DimensionError(f"{name} must be square, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise NumericInputError(f"{name} has non-finite entries")
    return A


def _pade_low(A: np.ndarray, m: int) -> tuple[np.ndarray, np.ndarray]:
    b = _PADE[m]
    n = A.shape[-1]
    ident = np.broadcast_to(np.eye(n), A.shape)
    A2 = A @ A
    powers = [ident, A2]
    for _ in range((m - 1) // 2 - 1):
        powers.append(powers[-1] @ A2)
    U = sum(b[2 * k + 1] * P for k, P in enumerate(powers))
    V = sum(b[2 * k] * P for k, P in enumerate(powers))
    return A @ U, V


def _pade13(A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    b = _PADE[13]
    n = A.shape[-1]
    ident = np.broadcast_to(np.eye(n), A.shape)
    A2 = A @ A
    A4 = A2 @ A2
    A6 = A4 @ A2
    U = A @ (A6 @ (b[13] * A6 + b[11] * A4 + b[9] * A2)
             + b[7] * A6 + b[5] * A4 + b[3] * A2 + b[1] * ident)
    V = (A6 @ (b[12] * A6 + b[10] * A4 + b[8] * A2)
         + b[6] * A6 + b[4] * A4 + b[2] * A2 + b[0] * ident)
    return U, V


def _expm_stack(A: np.ndarray) -> np.ndarray:
    """Scaling and squaring on a flat ``(K, n, n)`` stack, no validation."""
    K, n, _ = A.shape
    out = np.empty_like(A)
    if K == 0:
        return out
    norms = np.abs(A).sum(axis=1).max(axis=1)
    order = np.full(K, 13)
    for m in (9, 7, 5, 3):
        order[norms <= _THETA[m]] = m
    squarings = np.zeros(K, dtype=np.int64)
    big = norms > _THETA[13]
    if np.any(big):
        squarings[big] = np.ceil(np.log2(norms[big] / _THETA[13])).astype(np.int64)
    scale = np.ldexp(1.0, -squarings)[:, None, None]
    for m in (3, 5, 7, 9, 13):
        sel = np.nonzero(order == m)[0]
        if sel.size == 0:
            continue
        As = A[sel] * scale[sel]
        U, V = _pade13(As) if m == 13 else _pade_low(As, m)
        out[sel] = np.linalg.solve(V - U, V + U)
    for k in range(int(squarings.max())):
        sel = np.nonzero(squarings > k)[0]
        out[sel] = out[sel] @ out[sel]
    return out


def mat_exp(A: np.ndarray) -> np.ndarray:
    """Matrix exponential by scaling and squaring with a Pade approximant.

    Parameters
    ----------
    A : ndarray, shape (n, n) or (..., n, n)
        Finite square matrix or stack of them.

    Returns
    -------
    ndarray of the same shape holding ``expm(A)``.
    """
    A = _check_square(A)
    shape = A.shape
    return _expm_stack(A.reshape(-1, shape[-1], shape[-1])).reshape(shape)

def _closed_form_2x2(A: np.ndarray):
    """Scalars of the 2x2 closed form: ``expm(A) = S_ch I + S_sh (A - tI)``.

    With ``t = tr(A)/2`` and ``q = ((a - d)/2)^2 + bc`` the shifted matrix
    ``B = A - tI`` satisfies ``B^2 = qI``.  Hence ``S_ch = e^t cosh(sqrt q)``
    and ``S_sh = e^t sinh(sqrt q)/sqrt q`` (trigonometric when ``q < 0``,
    Taylor series when ``|q|`` is tiny).  Also returns ``S_dsh``, the
    derivative of ``S_sh`` with respect to ``q``.
    """
    a, b, c, d = A[..., 0, 0], A[..., 0, 1], A[..., 1, 0], A[..., 1, 1]
    t = 0.5 * (a + d)
    p = 0.5 * (a - d)
    q = p * p + b * c
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        root = np.sqrt(np.abs(q))
        ch = 1.0 + q / 2.0 + q * q / 24.0
        sh = 1.0 + q / 6.0 + q * q / 120.0
        neg = q < -1e-6
        ch = np.where(neg, np.cos(root), ch)
        sh = np.where(neg, np.sin(root) / root, sh)
        pos = q > 1e-6
        ch = np.where(pos, np.cosh(root), ch)
        sh = np.where(pos, np.sinh(root) / root, sh)
        et = np.exp(t)
        s_ch = et * ch
        s_sh = et * sh
        # large real root: combine exponents so e^t and cosh cannot overflow apart
        far = q > 1.0
        hi, lo = np.exp(t + root), np.exp(t - root)
        s_ch = np.where(far, 0.5 * (hi + lo), s_ch)
        s_sh = np.where(far, 0.5 * (hi - lo) / root, s_sh)
        # d(sh)/dq = (ch - sh) / (2q); series where that difference cancels
        s_dsh = np.where(np.abs(q) < 1e-2,
                         et * (1.0 / 6.0 + q / 60.0 + q ** 2 / 1680.0 + q ** 3 / 90720.0
                               + q ** 4 / 7983360.0),
                         (s_ch - s_sh) / (2.0 * q))
    return t, p, q, s_ch, s_sh, s_dsh


def _assemble_2x2(shape, diag, scale, B00, B01, B10):
    out = np.empty(shape)
    out[..., 0, 0] = diag + scale * B00
    out[..., 1, 1] = diag - scale * B00
    out[..., 0, 1] = scale * B01
    out[..., 1, 0] = scale * B10
    return out


def expm_2x2(A: np.ndarray) -> np.ndarray:
    """Closed-form exponential of a stack of 2x2 matrices.

    Only elementwise array operations are involved, which makes this much
    cheaper than the Pade route for the large stacks of tiny matrices met in
    coefficient inference.  No input validation is done.
    """
    A = np.asarray(A, dtype=np.float64)
    _, p, _, s_ch, s_sh, _ = _closed_form_2x2(A)
    with np.errstate(over="ignore", invalid="ignore"):
        return _assemble_2x2(A.shape, s_ch, s_sh, p, A[..., 0, 1], A[..., 1, 0])


def expm_frechet_2x2(A: np.ndarray, E: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``(expm(A), L(A, E))`` for stacks of 2x2 matrices, by differentiating the closed form.

    ``A`` and ``E`` broadcast against each other.  With ``dt = tr(E)/2`` and
    ``dq = 2 p dp + b E_10 + c E_01`` the derivative is
    ``dt expm(A) + (S_sh/2) dq I + S_dsh dq B + S_sh (E - dt I)``.
    """
    A = np.asarray(A, dtype=np.float64)
    E = np.asarray(E, dtype=np.float64)
    shape = np.broadcast_shapes(A.shape, E.shape)
    t, p, q, s_ch, s_sh, s_dsh = _closed_form_2x2(A)
    b, c = A[..., 0, 1], A[..., 1, 0]
    e00, e01, e10, e11 = E[..., 0, 0], E[..., 0, 1], E[..., 1, 0], E[..., 1, 1]
    dt = 0.5 * (e00 + e11)
    dp = 0.5 * (e00 - e11)
    dq = 2.0 * p * dp + b * e10 + c * e01
    with np.errstate(over="ignore", invalid="ignore"):
        expA = _assemble_2x2(A.shape, s_ch, s_sh, p, b, c)
        lin = s_dsh * dq
        L = _assemble_2x2(shape, dt * s_ch + 0.5 * s_sh * dq, 1.0, dt * s_sh * p + lin * p + s_sh * dp,
                          dt * s_sh * b + lin * b + s_sh * e01, dt * s_sh * c + lin * c + s_sh * e10)
    return expA, L


def mat_exp_frechet(A: np.ndarray, E: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(expm(A), L(A, E))`` via the block embedding.

    ``expm([[A, E], [0, A]])`` carries ``L(A, E)`` in its upper-right block.
    E is rescaled to unit 1-norm before embedding so the squaring count is
    driven by A alone; linearity of L undoes the rescale.
    """
    A = _check_square(A)
    E = _check_square(E, "E")
    if A.shape != E.shape:
        raise DimensionError(f"A {A.shape} and E {E.shape} differ in shape")
    shape = A.shape
    n = shape[-1]
    Af = A.reshape(-1, n, n)
    Ef = E.reshape(-1, n, n)
    enorm = np.abs(Ef).sum(axis=1).max(axis=1)
    enorm = np.where(enorm > 0.0, enorm, 1.0)
    block = np.zeros((Af.shape[0], 2 * n, 2 * n))
    block[:, :n, :n] = Af
    block[:, n:, n:] = Af
    block[:, :n, n:] = Ef / enorm[:, None, None]
    big = _expm_stack(block)
    expA = big[:, :n, :n].reshape(shape)
    L = (big[:, :n, n:] * enorm[:, None, None]).reshape(shape)
    return expA, L


def expm_adjoint_frechet(A: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Pull a gradient ``G = dF/d expm(A)`` back to ``dF/dA``.

    Uses ``<G, L(A, E)> = <L(A^T, G), E>``, so one block exponential serves
    every direction E at once.
    """
    At = np.swapaxes(np.asarray(A, dtype=np.float64), -1, -2)
    return mat_exp_frechet(At, G)[1]


def logsumexp(values) -> float:
    """Stable ``log(sum(exp(values)))`` of a nonempty 1-D sequence."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise DimensionError(f"logsumexp needs a nonempty vector, got shape {v.shape}")
    return float(_scipy_logsumexp(v))
