"""Depth evaluation metrics: RMSE, threshold accuracy and Kendall's tau."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, EmptyMask, InsufficientPairs, InvalidConfig, NonPositiveDepth

CSV_COLUMNS = ("run_id", "protocol", "condition", "rmse", "delta_1.25", "tau", "n_pixels", "seed")


@dataclass(frozen=True)
class EvalReport:
    rmse: float
    delta: dict = field(default_factory=dict)
    kendall_tau: float = 1.0
    n_pixels: int = 0

    def csv_row(self, run_id: str, protocol: str, condition, seed) -> list:
        """Row matching :data:`CSV_COLUMNS`; ``condition`` is the noise ratio or H2I bin."""
        d = self.delta.get(1.25, float("nan"))
        return [run_id, protocol, condition, f"{self.rmse:.6g}", f"{d:.6g}",
                f"{self.kendall_tau:.6g}", self.n_pixels, seed]


def _masked_pair(d_hat, d_true, m):
    d_hat = np.asarray(d_hat, dtype=np.float64)
    d_true = np.asarray(d_true, dtype=np.float64)
    if d_hat.shape != d_true.shape:
        raise DimensionMismatch(f"prediction {d_hat.shape} vs truth {d_true.shape}")
    if m is None:
        m = np.ones(d_true.shape, dtype=bool)
    m = np.asarray(m, dtype=bool)
    if m.shape != d_true.shape:
        raise DimensionMismatch(f"mask {m.shape} vs depth {d_true.shape}")
    if not m.any():
        raise EmptyMask("evaluation mask selects no pixels")
    return d_hat[m], d_true[m]


def rmse(d_hat, d_true, m=None) -> float:
    """Root of the mean squared error over masked pixels."""
    a, b = _masked_pair(d_hat, d_true, m)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def delta_k(d_hat, d_true, m=None, k: float = 1.25) -> float:
    """Fraction of masked pixels with ``max(d_hat / d, d / d_hat) < k``."""
    if not k > 1:
        raise InvalidConfig("delta threshold k must exceed 1")
    a, b = _masked_pair(d_hat, d_true, m)
    if np.any(a <= 0) or np.any(b <= 0):
        raise NonPositiveDepth("threshold accuracy needs positive depths on the mask")
    ratio = np.maximum(a / b, b / a)
    return float(np.mean(ratio < k))


def _tie_pairs(sorted_vals) -> int:
    """Number of tied pairs in an already sorted array."""
    _, counts = np.unique(sorted_vals, return_counts=True)
    return int(np.sum(counts * (counts - 1) // 2))


def _count_inversions(seq) -> int:
    """Pairs ``i < j`` with ``seq[i] > seq[j]`` by bottom-up merge sort."""
    a = np.array(seq)
    n = a.size
    inv = 0
    width = 1
    while width < n:
        for lo in range(0, n - width, 2 * width):
            mid = lo + width
            hi = min(lo + 2 * width, n)
            left, right = a[lo:mid], a[mid:hi]
            # each right element jumps over the left elements strictly above it
            inv += int(np.sum(left.size - np.searchsorted(left, right, side="right")))
            # two sorted runs: the stable sort merges them in linear time
            a[lo:hi] = np.sort(a[lo:hi], kind="stable")
        width *= 2
    return inv


def kendall_tau_pairs(x, y) -> float:
    """Tau-a of two equal-length 1-D samples in ``O(n log n)``.

    Ties count as neither concordant nor discordant and the denominator
    stays ``n (n - 1) / 2``.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise DimensionMismatch(f"{x.shape} vs {y.shape}")
    n = x.size
    if n < 2:
        raise InsufficientPairs("Kendall's tau needs at least two pixels")
    order = np.lexsort((y, x))
    xs, ys = x[order], y[order]
    n0 = n * (n - 1) // 2
    x_ties = _tie_pairs(xs)
    # pairs tied in both coordinates
    joint = np.flatnonzero(np.diff(xs) != 0) + 1
    xy_ties = sum(_tie_pairs(g) for g in np.split(ys, joint))
    y_ties = _tie_pairs(np.sort(ys))
    swaps = _count_inversions(ys)
    return (n0 - x_ties - y_ties + xy_ties - 2 * swaps) / n0


def kendall_tau(d_hat, d_true, m=None) -> float:
    a, b = _masked_pair(d_hat, d_true, m)
    return kendall_tau_pairs(a, b)


def kendall_tau_bruteforce(x, y) -> float:
    """Quadratic pair enumeration, kept as a reference for the fast version."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    n = x.size
    if n < 2:
        raise InsufficientPairs("Kendall's tau needs at least two pixels")
    s = 0
    for i in range(n):
        s += int(np.sum(np.sign(x[i + 1:] - x[i]) * np.sign(y[i + 1:] - y[i])))
    return s / (n * (n - 1) // 2)


def evaluate(d_hat, d_true, m=None, ks=(1.25,)) -> EvalReport:
    """All metrics over one mask."""
    a, _ = _masked_pair(d_hat, d_true, m)
    return EvalReport(rmse=rmse(d_hat, d_true, m),
                      delta={float(k): delta_k(d_hat, d_true, m, k) for k in ks},
                      kendall_tau=kendall_tau(d_hat, d_true, m), n_pixels=int(a.size))


def mean_report(reports) -> EvalReport:
    """Average several reports (aggregate CSV row)."""
    reports = list(reports)
    if not reports:
        raise EmptyMask("no reports to aggregate")
    keys = reports[0].delta.keys()
    return EvalReport(rmse=float(np.mean([r.rmse for r in reports])),
                      delta={k: float(np.mean([r.delta[k] for r in reports])) for k in keys},
                      kendall_tau=float(np.mean([r.kendall_tau for r in reports])),
                      n_pixels=int(sum(r.n_pixels for r in reports)))
