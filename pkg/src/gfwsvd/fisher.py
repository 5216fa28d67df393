"""Empirical Fisher of a linear layer and its nearest Kronecker factorization.

Each batch contributes the mean weight gradient ``G_i`` (``n x m``). With
``g_i = vec(G_i)`` the empirical Fisher is ``F = mean_i g_i g_i^T``,
approximated here by ``A (x) B`` with ``A`` (``m x m``, input side) and
``B`` (``n x n``, output side).

Rearranging the entries of ``F`` turns that approximation into a rank-1
problem (Van Loan-Pitsianis). Under column-stacking ``vec`` the rearranged
Fisher is ``R = mean_i G_i^T (x) G_i^T`` of shape ``m^2 x n^2`` and

    R vec(Z)   = mean_i vec(G_i^T Z G_i)      (Z is n x n)
    R^T vec(Y) = mean_i vec(G_i Y G_i^T)      (Y is m x m)

so ``R`` is never formed: each product costs ``O(|D| (m n^2 + m^2 n))``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import tensor_io
from .errors import DefinitenessError, SizeCapError, ValidationError
from .linalg import (
    JITTER_LADDER,
    LinearOperator,
    cholesky_spd,
    is_positive_definite,
    truncated_svd,
    unvec,
    vec,
)

#: Largest ``n * m`` for which the dense Fisher may be materialised.
EXPLICIT_FIM_CAP = 4096
DEFAULT_ALPHA = 1e-2


class GradientAccumulator:
    """Ordered per-batch gradients of one ``n x m`` layer."""

    def __init__(self, n: int, m: int, batches: Iterable | None = None):
        if n < 1 or m < 1:
            raise ValidationError(f"layer dims must be positive, got ({n}, {m})")
        self.n = int(n)
        self.m = int(m)
        self.batches: list[np.ndarray] = []
        self._stack = None
        for g in (() if batches is None else batches):
            self.add(g)

    @classmethod
    def from_batches(cls, batches) -> "GradientAccumulator":
        batches = list(batches)
        if not batches:
            raise ValidationError("need at least one gradient batch")
        n, m = np.shape(batches[0])
        return cls(n, m, batches)

    @classmethod
    def from_directory(cls, directory) -> "GradientAccumulator":
        manifest = tensor_io.read_manifest(directory)
        return cls(manifest["n"], manifest["m"], tensor_io.iter_gradient_set(directory))

    @property
    def count(self) -> int:
        return len(self.batches)

    def add(self, G) -> "GradientAccumulator":
        G = tensor_io.as_tensor(G, "gradient")
        if G.shape != (self.n, self.m):
            raise ValidationError(f"gradient has shape {G.shape}, expected {(self.n, self.m)}")
        self.batches.append(G.copy())
        self._stack = None
        return self

    def stack(self) -> np.ndarray:
        """Batches as a ``(count, n, m)`` array."""
        if self.count == 0:
            raise ValidationError("accumulator is empty")
        if self._stack is None:
            self._stack = np.stack(self.batches)
        return self._stack

    def save(self, directory) -> dict:
        return tensor_io.write_gradient_set(self.batches, directory)


def accumulate(acc: GradientAccumulator, G) -> GradientAccumulator:
    return acc.add(G)


def explicit_fim(acc: GradientAccumulator, cap: int = EXPLICIT_FIM_CAP) -> np.ndarray:
    """Dense ``(nm, nm)`` empirical Fisher, for small layers only."""
    if acc.n * acc.m > cap:
        raise SizeCapError(f"n*m = {acc.n * acc.m} exceeds the explicit Fisher cap {cap}")
    g = acc.stack().transpose(0, 2, 1).reshape(acc.count, -1)  # rows are vec(G_i)
    return g.T @ g / acc.count


def rearrange(F, n: int, m: int) -> np.ndarray:
    """Van Loan-Pitsianis rearrangement of an ``(nm, nm)`` matrix.

    Entry ``F[i + j n, k + l n]`` moves to ``R[j + l m, i + k n]``, so that
    ``||F - kron(A, B)||_F == ||R - outer(vec(A), vec(B))||_F``.
    """
    F = np.asarray(F, dtype=np.float64)
    if F.shape != (n * m, n * m):
        raise ValidationError(f"expected shape {(n * m, n * m)}, got {F.shape}")
    # F4[i, j, k, l] = F[i + j n, k + l n]
    F4 = F.reshape(n, m, n, m, order="F")
    # R4[j, l, i, k] = R[j + l m, i + k n]
    R4 = F4.transpose(1, 3, 0, 2)
    return R4.reshape(m * m, n * n, order="F")


def _flat_views(acc: GradientAccumulator):
    S = acc.stack()
    d, n, m = S.shape
    vertical = S.reshape(d * n, m)                       # [G_1; ...; G_d]
    horizontal = S.transpose(1, 0, 2).reshape(n, d * m)  # [G_1, ..., G_d]
    return vertical, horizontal


def rearranged_apply(acc: GradientAccumulator, z) -> np.ndarray:
    """``mean_i vec(G_i^T Z G_i)`` for ``z = vec(Z)``, ``Z`` of size ``n x n``."""
    n, m, d = acc.n, acc.m, acc.count
    Z = unvec(z, n, n)
    vertical, horizontal = _flat_views(acc)
    T = Z @ horizontal                                    # [Z G_1, ..., Z G_d]
    T = T.reshape(n, d, m).transpose(1, 0, 2).reshape(d * n, m)
    return vec(vertical.T @ T) / d


def rearranged_apply_transpose(acc: GradientAccumulator, z) -> np.ndarray:
    """``mean_i vec(G_i Y G_i^T)`` for ``z = vec(Y)``, ``Y`` of size ``m x m``."""
    n, m, d = acc.n, acc.m, acc.count
    Y = unvec(z, m, m)
    vertical, horizontal = _flat_views(acc)
    T = vertical @ Y                                      # [G_1 Y; ...; G_d Y]
    T = T.reshape(d, n, m).transpose(1, 0, 2).reshape(n, d * m)
    return vec(T @ horizontal.T) / d


def rearranged_operator(acc: GradientAccumulator) -> LinearOperator:
    """The rearranged Fisher as an ``n^2 -> m^2`` linear operator."""
    return LinearOperator(
        in_dim=acc.n * acc.n,
        out_dim=acc.m * acc.m,
        apply=lambda z: rearranged_apply(acc, z),
        apply_transpose=lambda z: rearranged_apply_transpose(acc, z),
    )


@dataclass
class KroneckerFactors:
    """Regularized factors with ``F ~ kron(A, B)``.

    ``A_raw`` and ``B_raw`` keep the sign-normalized, symmetrized factors
    before regularization; their product is the nearest Kronecker product.
    """

    A: np.ndarray
    B: np.ndarray
    sigma: float
    iterations: int = 0
    residual: float = 0.0
    converged: bool = True
    alpha: float = 0.0
    alpha_A: float = 0.0
    alpha_B: float = 0.0
    jitter_A: float = 0.0
    jitter_B: float = 0.0
    tol: float = 0.0
    A_raw: np.ndarray | None = field(default=None, repr=False)
    B_raw: np.ndarray | None = field(default=None, repr=False)

    def product(self) -> np.ndarray:
        return np.kron(self.A, self.B)

    def raw_product(self) -> np.ndarray:
        if self.A_raw is None or self.B_raw is None:
            raise ValidationError("unregularized factors were not kept")
        return np.kron(self.A_raw, self.B_raw)

    def diagnostics(self) -> dict:
        return {k: v for k, v in asdict(self).items() if k not in _ARRAY_FIELDS}

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        tensor_io.write_tensor(self.A, directory / "A.gft")
        tensor_io.write_tensor(self.B, directory / "B.gft")
        tensor_io.write_report(self.diagnostics(), directory / "diagnostics.json", "json")

    @classmethod
    def load(cls, directory) -> "KroneckerFactors":
        directory = Path(directory)
        A = tensor_io.read_tensor(directory / "A.gft")
        B = tensor_io.read_tensor(directory / "B.gft")
        diag_path = directory / "diagnostics.json"
        diag = json.loads(diag_path.read_text()) if diag_path.exists() else {"sigma": float("nan")}
        known = set(cls.__dataclass_fields__) - _ARRAY_FIELDS
        return cls(A, B, **{k: v for k, v in diag.items() if k in known})


_ARRAY_FIELDS = {"A", "B", "A_raw", "B_raw"}


def _regularize(X: np.ndarray, alpha: float, escalations: int = 2) -> tuple[np.ndarray, float, float]:
    """Return ``(X_reg, alpha_used, jitter)`` such that ``X_reg`` is SPD.

    ``X + a diag(X)`` is tried for ``a = alpha, 10 alpha, 100 alpha``. When
    the diagonal is not strictly positive that rule cannot help, so the
    additive Cholesky jitter ladder is used instead.
    """
    if alpha == 0.0:
        if not is_positive_definite(X):
            raise DefinitenessError(
                "Kronecker factor is not positive definite; rerun with alpha > 0"
            )
        return X, 0.0, 0.0
    d = np.diag(X)
    if np.all(d > 0):
        a = alpha
        for _ in range(escalations + 1):
            Xr = X + a * np.diag(d)
            if is_positive_definite(Xr):
                return Xr, a, 0.0
            a *= 10
    L, jitter = cholesky_spd(X, jitter=JITTER_LADDER)
    return X + jitter * np.eye(X.shape[0]), 0.0, jitter


def extract_kronecker_factors(
    acc: GradientAccumulator,
    tol: float = 1e-8,
    max_iter: int = 200,
    seed: int = 0,
    alpha: float = DEFAULT_ALPHA,
) -> KroneckerFactors:
    """Nearest Kronecker product ``A (x) B`` of the empirical Fisher.

    The leading singular triplet ``(u, s, v)`` of the rearranged operator
    gives ``A = unvec(sqrt(s) u)`` and ``B = unvec(sqrt(s) v)``. Both factors
    are then sign-normalized, symmetrized and regularized.

    Raises
    ------
    DefinitenessError
        With ``alpha == 0`` when a factor is singular, or when even the
        jitter ladder cannot make it positive definite.
    """
    if acc.count < 1:
        raise ValidationError("accumulator is empty")
    if alpha < 0:
        raise ValidationError("alpha must be non-negative")
    n, m = acc.n, acc.m
    trip = truncated_svd(rearranged_operator(acc), k=1, tol=tol, max_iter=max_iter, seed=seed)
    sigma = float(trip.S[0])
    root = np.sqrt(sigma)
    A = unvec(root * trip.U[:, 0], m, m)
    B = unvec(root * trip.V[:, 0], n, n)
    if np.trace(A) < 0:
        A, B = -A, -B
    A_raw = 0.5 * (A + A.T)
    B_raw = 0.5 * (B + B.T)
    A, alpha_A, jitter_A = _regularize(A_raw, alpha)
    B, alpha_B, jitter_B = _regularize(B_raw, alpha)
    return KroneckerFactors(
        A=A,
        B=B,
        sigma=sigma,
        iterations=trip.iterations,
        residual=trip.residual,
        converged=trip.converged,
        alpha=alpha,
        alpha_A=alpha_A,
        alpha_B=alpha_B,
        jitter_A=jitter_A,
        jitter_B=jitter_B,
        tol=tol,
        A_raw=A_raw,
        B_raw=B_raw,
    )


@dataclass
class DiagonalFisherWeights:
    """Row-summed diagonal Fisher weights used by FWSVD.

    ``D[i] = sqrt(sum_j mean_b G_b[i, j]^2)``.
    """

    D: np.ndarray
    second_moments: np.ndarray = field(repr=False)

    @property
    def d(self) -> np.ndarray:
        """Diagonal of the best ``I_m (x) diag(d)`` fit, equal to ``D**2 / m``."""
        return self.second_moments.sum(axis=1) / self.second_moments.shape[1]


def diagonal_fisher(acc: GradientAccumulator) -> DiagonalFisherWeights:
    S = acc.stack()
    second = np.mean(S * S, axis=0)
    return DiagonalFisherWeights(np.sqrt(second.sum(axis=1)), second)
