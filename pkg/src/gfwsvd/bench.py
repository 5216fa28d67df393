"""Wall-clock comparison of structured and explicit rearranged-Fisher matvecs."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from statistics import median
from typing import Sequence

import numpy as np

from .errors import GateError, ValidationError
from .fisher import GradientAccumulator, explicit_fim, rearrange, rearranged_apply

#: Largest n = m for which the explicit matrix is materialised (4096 x 4096).
EXPLICIT_MAX = 64
BENCH_COLUMNS = ("n", "m", "mode", "median_seconds", "repeats")


@dataclass
class BenchReport:
    rows: list[dict] = field(default_factory=list)
    gate: list[dict] = field(default_factory=list)
    slope: float | None = None

    def median(self, n: int, mode: str) -> float:
        for r in self.rows:
            if r["n"] == n and r["mode"] == mode:
                return r["median_seconds"]
        raise KeyError((n, mode))

    def ratios(self) -> dict[int, float]:
        """Explicit over structured median time, where both were measured."""
        out = {}
        for r in self.rows:
            if r["mode"] == "explicit":
                out[r["n"]] = r["median_seconds"] / self.median(r["n"], "structured")
        return out


def _time(fn, repeats: int) -> float:
    fn()  # warm-up
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return median(samples)


def _reference_apply(acc: GradientAccumulator, z: np.ndarray) -> np.ndarray:
    # Per-batch einsum; independent of the stacked-matmul path being timed.
    Z = z.reshape(acc.n, acc.n, order="F")
    out = np.einsum("dia,ik,dkb->ab", acc.stack(), Z, acc.stack(), optimize=True) / acc.count
    return out.reshape(-1, order="F")


def loglog_slope(sizes: Sequence[int], seconds: Sequence[float]) -> float:
    """Least-squares slope of ``log(seconds)`` against ``log(size)``."""
    return float(np.polyfit(np.log(sizes), np.log(seconds), 1)[0])


def bench_matvec(
    sizes: Sequence[int],
    repeats: int = 5,
    batches: int = 8,
    seed: int = 0,
    structured_only: bool = False,
    explicit_max: int = EXPLICIT_MAX,
    gate_rtol: float = 1e-10,
) -> BenchReport:
    """Time ``R z`` through the structured route and, for small sizes, densely.

    Before any timing each size passes a correctness gate: the structured
    product must match the materialised rearranged Fisher (sizes up to
    ``explicit_max``) or an einsum reference (larger sizes) to ``gate_rtol``.

    Raises
    ------
    GateError
        The structured product disagrees with its reference.
    """
    sizes = [int(s) for s in sizes]
    if not sizes or any(s < 2 for s in sizes) or repeats < 1 or batches < 1:
        raise ValidationError("sizes must be >= 2, repeats and batches >= 1")
    rng = np.random.default_rng(seed)
    report = BenchReport()
    for n in sizes:
        acc = GradientAccumulator(n, n, rng.standard_normal((batches, n, n)))
        z = rng.standard_normal(n * n)
        fast = rearranged_apply(acc, z)
        dense = None
        if n <= explicit_max:
            dense = rearrange(explicit_fim(acc, cap=explicit_max**2), n, n)
            ref = dense @ z
            kind = "explicit"
        else:
            ref = _reference_apply(acc, z)
            kind = "einsum"
        err = float(np.linalg.norm(fast - ref) / np.linalg.norm(ref))
        report.gate.append({"n": n, "reference": kind, "rel_error": err})
        if not err <= gate_rtol:
            raise GateError(f"structured matvec differs from {kind} reference at n={n}: {err:.2e}")
        t = _time(lambda: rearranged_apply(acc, z), repeats)
        report.rows.append({"n": n, "m": n, "mode": "structured", "median_seconds": t, "repeats": repeats})
        if dense is not None and not structured_only:
            t = _time(lambda: dense @ z, repeats)
            report.rows.append({"n": n, "m": n, "mode": "explicit", "median_seconds": t, "repeats": repeats})
        del dense
    if len(sizes) >= 2:
        report.slope = loglog_slope(sizes, [report.median(n, "structured") for n in sizes])
    return report
