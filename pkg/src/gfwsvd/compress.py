"""Low-rank compression rules, Fisher-weighted error metrics and a rank planner.

All three compressors solve a weighted Eckart-Young problem

    min_{rank(X) <= r} || P^T (W - X) Q ||_F^2

for different transforms ``(P, Q)``: identities for plain SVD, ``(diag(D), I)``
for FWSVD, and the Cholesky factors ``(L_B, L_A)`` of the Kronecker Fisher
factors for GFWSVD. Inverse transforms are applied with triangular solves.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InfeasibleTargetError, ValidationError
from .fisher import DiagonalFisherWeights, KroneckerFactors
from .linalg import cholesky_spd, full_svd, solve_triangular, vec

METHODS = ("gfwsvd", "fwsvd", "svd")
#: Relative floor applied to FWSVD row weights so ``D^{-1}`` exists.
FWSVD_FLOOR = 1e-12


@dataclass
class CholeskyPair:
    """Lower Cholesky factors of the output-side ``B`` and input-side ``A``."""

    L_A: np.ndarray
    L_B: np.ndarray
    provenance: dict = field(default_factory=dict)

    @classmethod
    def from_matrices(cls, A, B, provenance: dict | None = None) -> "CholeskyPair":
        # No jitter: the factors must already be regularized.
        L_A, _ = cholesky_spd(A, jitter=None)
        L_B, _ = cholesky_spd(B, jitter=None)
        return cls(L_A, L_B, dict(provenance or {}))

    @classmethod
    def from_factors(cls, factors: KroneckerFactors) -> "CholeskyPair":
        return cls.from_matrices(factors.A, factors.B, factors.diagnostics())

    @classmethod
    def identity(cls, n: int, m: int) -> "CholeskyPair":
        return cls(np.eye(m), np.eye(n), {"identity": True})


@dataclass
class LowRankLayer:
    """``W ~ W2 @ W1`` with ``W1`` of shape ``(r, m)`` and ``W2`` of shape ``(n, r)``."""

    W1: np.ndarray
    W2: np.ndarray
    rank: int
    method: str
    singular_values: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return self.W2 @ self.W1

    @property
    def shape(self) -> tuple[int, int]:
        return self.W2.shape[0], self.W1.shape[1]

    @property
    def num_params(self) -> int:
        return self.W1.size + self.W2.size


def _check_rank(W: np.ndarray, r) -> int:
    if W.ndim != 2:
        raise ValidationError(f"weights must be 2-D, got shape {W.shape}")
    top = min(W.shape)
    if isinstance(r, bool) or int(r) != r or not 1 <= r <= top:
        raise ValidationError(f"rank {r} outside [1, {top}]")
    return int(r)


def _as_pair(factors) -> CholeskyPair:
    if isinstance(factors, CholeskyPair):
        return factors
    if isinstance(factors, KroneckerFactors):
        return CholeskyPair.from_factors(factors)
    A, B = factors
    return CholeskyPair.from_matrices(A, B)


def _split(trip, r: int):
    root = np.sqrt(trip.S[:r])
    return trip.U[:, :r] * root, root[:, None] * trip.V[:, :r].T


def gfwsvd_compress(W, factors, r: int) -> LowRankLayer:
    """Rank-``r`` factorization minimizing ``||L_B^T (W - X) L_A||_F``.

    Parameters
    ----------
    W : array_like, shape (n, m)
    factors : KroneckerFactors, CholeskyPair or (A, B) tuple
        ``A`` is ``m x m`` and ``B`` is ``n x n``; both must be SPD.
    r : int

    Returns
    -------
    LowRankLayer
        ``W1 = sqrt(S) V^T L_A^{-1}`` and ``W2 = L_B^{-T} U sqrt(S)`` where
        ``U S V^T`` is the rank-``r`` SVD of ``L_B^T W L_A``.
    """
    W = np.asarray(W, dtype=np.float64)
    r = _check_rank(W, r)
    pair = _as_pair(factors)
    n, m = W.shape
    if pair.L_A.shape != (m, m) or pair.L_B.shape != (n, n):
        raise ValidationError("factor shapes do not match the weight matrix")
    aux = pair.L_B.T @ W @ pair.L_A
    trip = full_svd(aux)
    left, right = _split(trip, r)
    W2 = solve_triangular(pair.L_B, left, side="left", transpose=True)
    W1 = solve_triangular(pair.L_A, right, side="right")
    return LowRankLayer(W1, W2, r, "gfwsvd", trip.S[:r].copy())


def _row_weights(weights, n: int) -> np.ndarray:
    D = weights.D if isinstance(weights, DiagonalFisherWeights) else np.asarray(weights, dtype=np.float64).ravel()
    if D.shape != (n,):
        raise ValidationError(f"row weights must have length {n}, got {D.shape}")
    if np.any(D < 0) or not np.all(np.isfinite(D)):
        raise ValidationError("row weights must be finite and non-negative")
    top = float(np.max(D)) if D.size else 0.0
    if top == 0.0:
        return np.ones(n)
    return np.maximum(D, FWSVD_FLOOR * top)


def fwsvd_compress(W, weights, r: int) -> LowRankLayer:
    """FWSVD: rank-``r`` SVD of ``diag(D) W`` mapped back by ``diag(D)^{-1}``."""
    W = np.asarray(W, dtype=np.float64)
    r = _check_rank(W, r)
    D = _row_weights(weights, W.shape[0])
    trip = full_svd(D[:, None] * W)
    left, right = _split(trip, r)
    return LowRankLayer(right, left / D[:, None], r, "fwsvd", trip.S[:r].copy())


def svd_compress(W, r: int) -> LowRankLayer:
    W = np.asarray(W, dtype=np.float64)
    r = _check_rank(W, r)
    trip = full_svd(W)
    left, right = _split(trip, r)
    return LowRankLayer(right, left, r, "svd", trip.S[:r].copy())


def compress(method: str, W, r: int, factors=None, weights=None) -> LowRankLayer:
    if method == "gfwsvd":
        if factors is None:
            raise ValidationError("gfwsvd needs Kronecker factors")
        return gfwsvd_compress(W, factors, r)
    if method == "fwsvd":
        if weights is None:
            raise ValidationError("fwsvd needs diagonal Fisher weights")
        return fwsvd_compress(W, weights, r)
    if method == "svd":
        return svd_compress(W, r)
    raise ValidationError(f"unknown method {method!r}; expected one of {METHODS}")


def _delta(W, layer) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    approx = layer.reconstruct() if isinstance(layer, LowRankLayer) else np.asarray(layer, dtype=np.float64)
    if approx.shape != W.shape:
        raise ValidationError(f"reconstruction shape {approx.shape} != weight shape {W.shape}")
    return W - approx


def weighted_error(W, layer, pair) -> float:
    """``||L_B^T (W - W2 W1) L_A||_F^2``."""
    pair = _as_pair(pair)
    E = pair.L_B.T @ _delta(W, layer) @ pair.L_A
    return float(np.sum(E * E))


def exact_quadratic_increase(W, layer, fim) -> float:
    """``vec(dW)^T F vec(dW)`` against a dense Fisher ``F``."""
    delta = vec(_delta(W, layer))
    fim = np.asarray(fim, dtype=np.float64)
    if fim.shape != (delta.size, delta.size):
        raise ValidationError(f"Fisher must be {delta.size}x{delta.size}, got {fim.shape}")
    return float(delta @ fim @ delta)


# -- rank planning -----------------------------------------------------------


@dataclass
class LayerPlan:
    layer_id: str
    n: int
    m: int
    rank: int

    @property
    def dense_params(self) -> int:
        return self.n * self.m

    @property
    def factorized(self) -> bool:
        """Whether the rank-``r`` factors are smaller than the dense layer."""
        return self.rank * (self.n + self.m) < self.n * self.m

    @property
    def params(self) -> int:
        return self.rank * (self.n + self.m) if self.factorized else self.dense_params

    @property
    def retention(self) -> float:
        return self.params / self.dense_params

    @property
    def removal(self) -> float:
        return 1.0 - self.retention


@dataclass
class CompressionPlan:
    """Per-layer ranks plus retention summaries.

    ``retention`` counts only the listed layers. ``model_retention`` adds
    ``frozen_params`` (parameters that are never compressed) to both sides.
    """

    layers: list[LayerPlan]
    target: dict
    frozen_params: int = 0

    @property
    def dense_params(self) -> int:
        return sum(l.dense_params for l in self.layers)

    @property
    def params(self) -> int:
        return sum(l.params for l in self.layers)

    @property
    def retention(self) -> float:
        return self.params / self.dense_params

    @property
    def removal(self) -> float:
        return 1.0 - self.retention

    @property
    def model_retention(self) -> float:
        total = self.dense_params + self.frozen_params
        return (self.params + self.frozen_params) / total

    @property
    def model_removal(self) -> float:
        return 1.0 - self.model_retention

    def summary(self) -> dict:
        return {
            "target": self.target,
            "retention": self.retention,
            "removal": self.removal,
            "model_retention": self.model_retention,
            "model_removal": self.model_removal,
            "layers": [
                {
                    "layer": l.layer_id,
                    "n": l.n,
                    "m": l.m,
                    "rank": l.rank,
                    "factorized": l.factorized,
                    "retention": l.retention,
                    "removal": l.removal,
                }
                for l in self.layers
            ],
        }


def _uniform(layers, r: int) -> list[LayerPlan]:
    return [LayerPlan(str(i), int(n), int(m), min(r, n, m)) for i, n, m in layers]


def plan_ranks(
    layers: Sequence[tuple],
    rank: int | None = None,
    retention: float | None = None,
    frozen_params: int = 0,
) -> CompressionPlan:
    """Assign one rank to every layer.

    Exactly one of ``rank`` and ``retention`` must be given. With
    ``retention`` the largest uniform rank whose factorized parameter count
    stays within ``retention * sum(n * m)`` is chosen. Layers whose factors
    would not be smaller than the dense matrix stay dense, so retention never
    exceeds 1 and is nondecreasing in rank. Ranks are clipped to
    ``min(n, m)`` per layer.
    """
    layers = [(i, int(n), int(m)) for i, n, m in layers]
    if not layers:
        raise ValidationError("no layers to plan")
    if any(n < 1 or m < 1 for _, n, m in layers):
        raise ValidationError("layer dims must be positive")
    if (rank is None) == (retention is None):
        raise ValidationError("give exactly one of rank or retention")
    if rank is not None:
        if isinstance(rank, bool) or int(rank) != rank or rank < 1:
            raise ValidationError(f"rank must be a positive integer, got {rank}")
        return CompressionPlan(_uniform(layers, int(rank)), {"rank": int(rank)}, frozen_params)
    if not 0.0 < retention <= 1.0:
        raise ValidationError(f"retention must lie in (0, 1], got {retention}")
    budget = retention * sum(n * m for _, n, m in layers)

    def cost(r):
        return sum(p.params for p in _uniform(layers, r))

    if cost(1) > budget:
        raise InfeasibleTargetError(f"rank 1 already exceeds retention {retention}")
    lo, hi = 1, max(min(n, m) for _, n, m in layers)
    while lo < hi:  # cost is nondecreasing in r
        mid = (lo + hi + 1) // 2
        if cost(mid) <= budget:
            lo = mid
        else:
            hi = mid - 1
    return CompressionPlan(_uniform(layers, lo), {"retention": retention}, frozen_params)


# Hidden size, FFN size, depth, vocabulary and positions of BERT-base.
_BERT = dict(hidden=768, ffn=3072, depth=12, vocab=30522, positions=512, types=2)


def bert_base_inventory() -> tuple[list[tuple[str, int, int]], int]:
    """Compressible layers and frozen parameter count of a BERT-base model.

    The compressible layers are the two feed-forward matrices of each of the
    12 encoder blocks (``3072 x 768`` and ``768 x 3072``). Everything else is
    frozen: embeddings, attention projections, biases, LayerNorms, the pooler
    and a masked-LM head whose ``30522 x 768`` decoder is counted as its own
    matrix (133.5M parameters in total).
    """
    h, f, L = _BERT["hidden"], _BERT["ffn"], _BERT["depth"]
    V, P, T = _BERT["vocab"], _BERT["positions"], _BERT["types"]
    layers = []
    for b in range(L):
        layers.append((f"encoder.{b}.ffn.up", f, h))
        layers.append((f"encoder.{b}.ffn.down", h, f))
    embeddings = (V + P + T) * h + 2 * h
    attention = 4 * (h * h + h) + 2 * h
    ffn_rest = f + h + 2 * h  # biases and LayerNorm around the FFN
    pooler = h * h + h
    mlm_head = (h * h + h) + 2 * h + V * h + V
    frozen = embeddings + L * (attention + ffn_rest) + pooler + mlm_head
    return layers, frozen
