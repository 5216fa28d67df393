"""Dense and matrix-free linear algebra primitives.

Conventions fixed here and used throughout the package:

* ``vec`` stacks columns: entry ``(i, j)`` of an ``r x c`` matrix lands at
  index ``i + j * r``.
* ``kron`` is the standard Kronecker product, so that
  ``kron(A, B) @ vec(X) == vec(B @ X @ A.T)``.
* Singular vectors are sign-normalised so that the largest-magnitude entry of
  every left singular vector is positive (first index wins on ties).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np
import scipy.linalg

from .errors import (
    DefinitenessError,
    NonFiniteError,
    SingularMatrixError,
    SizeCapError,
    ValidationError,
)

#: Multipliers of ``mean(diag(M))`` tried in turn by :func:`cholesky_spd`.
JITTER_LADDER = (0.0, 1e-10, 1e-8, 1e-6, 1e-4)
#: Largest number of entries :func:`kron` will materialise.
KRON_CAP = 10**7

_EPS = np.finfo(np.float64).eps


@dataclass(frozen=True)
class LinearOperator:
    """A matrix known only through its products with vectors."""

    in_dim: int
    out_dim: int
    apply: Callable[[np.ndarray], np.ndarray]
    apply_transpose: Callable[[np.ndarray], np.ndarray]

    @classmethod
    def from_matrix(cls, M) -> "LinearOperator":
        M = np.asarray(M, dtype=np.float64)
        return cls(M.shape[1], M.shape[0], lambda x: M @ x, lambda y: M.T @ y)

    @property
    def T(self) -> "LinearOperator":
        return LinearOperator(self.out_dim, self.in_dim, self.apply_transpose, self.apply)

    def materialize(self) -> np.ndarray:
        """Dense matrix of the operator, built column by column."""
        cols = [self.apply(e) for e in np.eye(self.in_dim)]
        return np.column_stack(cols) if cols else np.zeros((self.out_dim, 0))


def adjoint_mismatch(op: LinearOperator, rng: np.random.Generator | None = None) -> float:
    """Relative gap between ``<op(x), y>`` and ``<x, op^T(y)>`` for random x, y."""
    rng = np.random.default_rng(rng)
    x = rng.standard_normal(op.in_dim)
    y = rng.standard_normal(op.out_dim)
    ax, aty = op.apply(x), op.apply_transpose(y)
    lhs, rhs = ax @ y, x @ aty
    scale = np.linalg.norm(ax) * np.linalg.norm(y) + np.linalg.norm(x) * np.linalg.norm(aty)
    return float(abs(lhs - rhs) / scale) if scale > 0 else 0.0


@dataclass
class SvdTriplet:
    """Leading singular triplets ``U diag(S) V^T`` plus solver diagnostics.

    ``U`` is ``out_dim x k`` and ``V`` is ``in_dim x k``. Dense
    decompositions report ``iterations=0`` and ``converged=True``.
    """

    U: np.ndarray
    S: np.ndarray
    V: np.ndarray
    iterations: int = 0
    residual: float = 0.0
    converged: bool = True

    @property
    def k(self) -> int:
        return len(self.S)

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.S) @ self.V.T


def _normalize_signs(U: np.ndarray, V: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    U, V = U.copy(), V.copy()
    for j in range(U.shape[1]):
        idx = int(np.argmax(np.abs(U[:, j])))
        if U[idx, j] < 0:
            U[:, j] *= -1
            V[:, j] *= -1
    return U, V


class CholeskyResult(NamedTuple):
    L: np.ndarray
    jitter: float


def _check_finite(M: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(M)):
        raise NonFiniteError(f"{name} contains non-finite entries")


def _try_cholesky(M: np.ndarray) -> np.ndarray | None:
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        return None
    d = np.diag(L)
    # Pivots at rounding level mean M is numerically singular.
    floor = 16 * _EPS * M.shape[0] * max(float(np.max(np.abs(np.diag(M)))), np.finfo(float).tiny)
    if not np.all(np.isfinite(L)) or np.min(d * d) <= floor:
        return None
    return L


def is_positive_definite(M) -> bool:
    M = np.asarray(M, dtype=np.float64)
    return M.shape[0] > 0 and _try_cholesky(M) is not None


def cholesky_spd(M, jitter: Sequence[float] | None = JITTER_LADDER, symmetry_tol: float = 1e-10) -> CholeskyResult:
    """Lower Cholesky factor of a symmetric positive definite matrix.

    Parameters
    ----------
    M : array_like, shape (n, n)
        Symmetric matrix.
    jitter : sequence of float, optional
        Ladder of multipliers ``a``; the first ``a`` for which
        ``M + a * mean(diag(M)) * I`` factors wins. ``None`` or ``(0,)``
        disables jitter.
    symmetry_tol : float
        Relative asymmetry tolerated in ``M``.

    Returns
    -------
    CholeskyResult
        ``L`` and the absolute diagonal shift that was applied.

    Raises
    ------
    DefinitenessError
        If no rung of the ladder yields a factorization.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValidationError(f"expected a square matrix, got shape {M.shape}")
    _check_finite(M, "matrix")
    scale = max(np.linalg.norm(M), 1.0)
    if np.linalg.norm(M - M.T) > symmetry_tol * scale:
        raise ValidationError("matrix is not symmetric")
    M = 0.5 * (M + M.T)
    n = M.shape[0]
    diag_mean = float(np.mean(np.abs(np.diag(M)))) if n else 0.0
    if diag_mean == 0.0:
        diag_mean = 1.0
    ladder = tuple(jitter) if jitter else (0.0,)
    for a in ladder:
        shift = a * diag_mean
        L = _try_cholesky(M + shift * np.eye(n) if shift else M)
        if L is not None:
            return CholeskyResult(L, shift)
    raise DefinitenessError(
        f"matrix is not positive definite (jitter ladder {ladder} exhausted)"
    )


def solve_triangular(L, rhs, side: str = "left", transpose: bool = False) -> np.ndarray:
    """Solve a lower-triangular system without forming an inverse.

    ``side="left"`` solves ``op(L) X = rhs``; ``side="right"`` solves
    ``X op(L) = rhs``, where ``op(L)`` is ``L.T`` if ``transpose`` else ``L``.
    """
    L = np.asarray(L, dtype=np.float64)
    rhs = np.asarray(rhs, dtype=np.float64)
    if L.ndim != 2 or L.shape[0] != L.shape[1]:
        raise ValidationError(f"expected a square factor, got shape {L.shape}")
    if np.any(np.diag(L) == 0):
        raise SingularMatrixError("triangular factor has a zero diagonal entry")
    if side == "left":
        return scipy.linalg.solve_triangular(L, rhs, lower=True, trans=1 if transpose else 0, check_finite=True)
    if side == "right":
        # X op(L) = R  <=>  op(L)^T X^T = R^T
        vector = rhs.ndim == 1
        r = rhs.reshape(1, -1) if vector else rhs
        X = scipy.linalg.solve_triangular(L, r.T, lower=True, trans=0 if transpose else 1, check_finite=True).T
        return X.ravel() if vector else X
    raise ValidationError(f"side must be 'left' or 'right', got {side!r}")


def full_svd(M) -> SvdTriplet:
    """Thin SVD with the package sign convention."""
    M = np.asarray(M, dtype=np.float64)
    _check_finite(M, "matrix")
    U, S, Vt = np.linalg.svd(M, full_matrices=False)
    U, V = _normalize_signs(U, Vt.T)
    return SvdTriplet(U, S, V)


def _orthogonalize(x: np.ndarray, Q: list[np.ndarray]) -> np.ndarray:
    # Two passes of classical Gram-Schmidt ("twice is enough").
    if Q:
        B = np.column_stack(Q)
        x = x - B @ (B.T @ x)
        x = x - B @ (B.T @ x)
    return x


def _fresh_direction(dim: int, basis: list[np.ndarray], rng: np.random.Generator) -> np.ndarray | None:
    if len(basis) >= dim:
        return None
    for _ in range(5):
        x = _orthogonalize(rng.standard_normal(dim), basis)
        nrm = np.linalg.norm(x)
        if nrm > 1e-8:
            return x / nrm
    return None


def truncated_svd(op: LinearOperator, k: int = 1, tol: float = 1e-8, max_iter: int = 200, seed: int = 0) -> SvdTriplet:
    """Leading ``k`` singular triplets of a matrix-free operator.

    Golub-Kahan-Lanczos bidiagonalization with full reorthogonalization,
    started from a seeded Gaussian vector. After every step the bidiagonal
    projection is decomposed and the run stops once every wanted Ritz
    triplet has residual
    ``sqrt(|op v - s u|^2 + |op^T u - s v|^2) <= tol * s_1``.

    A run that exhausts ``max_iter`` returns its best estimate with
    ``converged=False``; callers decide whether to accept it.
    """
    if not 1 <= k <= min(op.in_dim, op.out_dim):
        raise ValidationError(f"k={k} outside [1, {min(op.in_dim, op.out_dim)}]")
    if op.in_dim > op.out_dim:
        # Bidiagonalize the wide side so the right basis exhausts first.
        res = truncated_svd(op.T, k, tol, max_iter, seed)
        U, V = _normalize_signs(res.V, res.U)
        return SvdTriplet(U, res.S, V, res.iterations, res.residual, res.converged)

    rng = np.random.default_rng(seed)
    steps = min(max_iter, op.in_dim)
    Us: list[np.ndarray] = []
    Vs: list[np.ndarray] = []
    alphas: list[float] = []
    betas: list[float] = []
    v = rng.standard_normal(op.in_dim)
    v /= np.linalg.norm(v)
    beta = 0.0
    norm_est = 0.0
    converged = False
    P = Q = S = None
    j = 0
    for j in range(1, steps + 1):
        Vs.append(v)
        u = op.apply(v)
        if Us:
            u = u - beta * Us[-1]
        u = _orthogonalize(u, Us)
        alpha = float(np.linalg.norm(u))
        if alpha <= 1e-13 * norm_est or alpha == 0.0:
            alpha = 0.0
            u = _fresh_direction(op.out_dim, Us, rng)
            if u is None:
                u = np.zeros(op.out_dim)
        else:
            u = u / alpha
        norm_est = max(norm_est, alpha)
        Us.append(u)
        alphas.append(alpha)

        w = op.apply_transpose(u) - alpha * v
        w = _orthogonalize(w, Vs)
        beta = float(np.linalg.norm(w))
        exhausted = len(Vs) >= op.in_dim
        if beta <= 1e-13 * max(norm_est, beta) or exhausted:
            # Invariant subspace: the coupling to the next vector vanishes.
            beta_coupling = 0.0
            nxt = None if exhausted else _fresh_direction(op.in_dim, Vs, rng)
        else:
            beta_coupling = beta
            nxt = w / beta
        norm_est = max(norm_est, beta_coupling)
        betas.append(beta_coupling)

        B = np.diag(alphas) + np.diag(betas[:-1], 1)
        P, S, Qt = np.linalg.svd(B)
        Q = Qt.T
        if j >= k:
            res_est = np.abs(beta_coupling * P[-1, :k])
            sigma1 = S[0]
            if sigma1 == 0.0 or np.all(res_est <= tol * sigma1):
                converged = True
                break
        if nxt is None:
            # Krylov space spans the whole domain: the projection is exact.
            converged = j >= k
            break
        v = nxt
        beta = beta_coupling

    Umat = np.column_stack(Us) @ P[:, :k]
    Vmat = np.column_stack(Vs) @ Q[:, :k]
    Svals = S[:k].copy()
    Umat, Vmat = _normalize_signs(Umat, Vmat)
    resid = 0.0
    for i in range(k):
        r1 = op.apply(Vmat[:, i]) - Svals[i] * Umat[:, i]
        r2 = op.apply_transpose(Umat[:, i]) - Svals[i] * Vmat[:, i]
        resid = max(resid, float(np.sqrt(r1 @ r1 + r2 @ r2)))
    return SvdTriplet(Umat, Svals, Vmat, iterations=j, residual=resid, converged=converged)


def kron(A, B, cap: int = KRON_CAP) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    size = A.size * B.size
    if size > cap:
        raise SizeCapError(f"Kronecker product would have {size} entries (cap {cap})")
    return np.kron(A, B)


def vec(M) -> np.ndarray:
    """Column-stacking vectorization."""
    return np.asarray(M, dtype=np.float64).reshape(-1, order="F")


def unvec(x, rows: int, cols: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size != rows * cols:
        raise ValidationError(f"cannot reshape length {x.size} into ({rows}, {cols})")
    return x.reshape(rows, cols, order="F")
