"""Ternarization solvers.

Given full-precision weights W, find a scale alpha >= 0 and codes in
{-1, 0, +1} minimizing J = sum_i (W_i - alpha * c_i)^2. Three routes:

* ternarize_exact   - global optimum over magnitude thresholds: sort |W|
                      descending, score every realizable prefix k by
                      (sum of top-k)^2 / k, take the argmax. O(n log n).
* ternarize_heuristic - threshold at 0.7 * mean|W|, then the closed-form
                      optimal alpha over the surviving support. O(n).
* brute_force_oracle  - exhaustive search over all 3^n code vectors with the
                      least-squares alpha per vector; the independent check
                      the scan solver is validated against.

Plus the per-piece operations (objective, threshold map, optimal alpha), the
sign-binarization baseline, a statistical validator for the uniform/normal
threshold rules, and a filter template counter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AllZeroWeights, DegenerateSupport
from .tensor import Rng, Shape, as_flat_f32, sample_normal, sample_uniform

ORACLE_MAX_N = 16


@dataclass(frozen=True)
class TernarySolution:
    """Scale, threshold, codes and achieved objective for one weight vector."""

    alpha: float
    delta: float
    codes: np.ndarray  # int8 in {-1, 0, +1}, same length as the weights
    objective: float


@dataclass(frozen=True)
class BinarySolution:
    alpha: float
    codes: np.ndarray  # int8 in {-1, +1}
    objective: float


@dataclass(frozen=True)
class DistributionRuleReport:
    kind: str
    param: float
    n: int
    delta_exact: float
    delta_predicted: float
    delta_heuristic: float
    objective_exact: float
    objective_heuristic: float

    @property
    def heuristic_ratio(self) -> float:
        return self.objective_heuristic / self.objective_exact


def objective(weights, alpha: float, codes) -> float:
    """J = sum_i (W_i - alpha * c_i)^2, accumulated in float64."""
    w = as_flat_f32(weights)
    c = np.asarray(codes)
    if c.size != w.size:
        raise ValueError(f"codes length {c.size} != weights length {w.size}")
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    r = w.astype(np.float64) - float(alpha) * c.astype(np.float64)
    return float(np.dot(r, r))


def ternarize_threshold(weights, delta: float) -> np.ndarray:
    """Map each weight to {-1, 0, +1}: +1 above delta, -1 below -delta, else 0.

    The boundary |W_i| == delta maps to 0.
    """
    if not delta > 0:
        raise ValueError(f"delta must be > 0, got {delta}")
    w = as_flat_f32(weights)
    codes = np.zeros(w.size, dtype=np.int8)
    codes[w > delta] = 1
    codes[w < -delta] = -1
    return codes


def optimal_alpha(weights, delta: float) -> float:
    """Mean magnitude over the support {i : |W_i| > delta} (closed form)."""
    if not delta > 0:
        raise ValueError(f"delta must be > 0, got {delta}")
    w = as_flat_f32(weights)
    mags = np.abs(w.astype(np.float64))
    support = mags > delta
    count = int(support.sum())
    if count == 0:
        raise DegenerateSupport(f"no |W_i| exceeds delta={delta} (max |W| = {mags.max() if w.size else 0})")
    return float(mags[support].sum() / count)


def _require_nonzero(w: np.ndarray) -> np.ndarray:
    if w.size == 0:
        raise ValueError("weights are empty")
    mags = np.abs(w.astype(np.float64))
    if mags.max() == 0.0:
        raise AllZeroWeights("all weights are zero; no positive threshold exists")
    return mags


def ternarize_heuristic(weights) -> TernarySolution:
    """Rule-of-thumb solution: delta = 0.7 * mean|W|, alpha over the support.

    The support is never empty: 0.7 * mean|W| < max|W| for any nonzero vector.
    """
    w = as_flat_f32(weights)
    mags = _require_nonzero(w)
    delta = 0.7 * float(mags.mean())
    codes = ternarize_threshold(w, delta)
    alpha = optimal_alpha(w, delta)
    return TernarySolution(alpha, delta, codes, objective(w, alpha, codes))


def ternarize_exact(weights) -> TernarySolution:
    """Global optimum over thresholds via the sorted-prefix scan.

    Sort magnitudes descending; prefix size k is realizable when m_k > m_{k+1}
    (equal magnitudes cannot be split by a threshold; m_{n+1} := 0). Score
    each realizable k by (prefix sum)^2 / k, take the argmax (ties to the
    smallest k, i.e. the sparser solution), and report delta as the midpoint
    of the bracketing magnitudes.
    """
    w = as_flat_f32(weights)
    mags = _require_nonzero(w)
    m = np.sort(mags)[::-1]
    n = m.size
    prefix = np.cumsum(m)
    m_next = np.empty(n)
    m_next[:-1] = m[1:]
    m_next[-1] = 0.0
    scores = prefix * prefix / np.arange(1, n + 1, dtype=np.float64)
    scores[m <= m_next] = -np.inf  # unrealizable prefixes (tied magnitudes)
    k = int(np.argmax(scores))  # first max -> smallest k on exact ties
    delta = 0.5 * (m[k] + m_next[k])
    alpha = float(prefix[k] / (k + 1))
    codes = ternarize_threshold(w, delta)
    return TernarySolution(alpha, delta, codes, objective(w, alpha, codes))


def _delta_from_codes(w: np.ndarray, codes: np.ndarray) -> float:
    """Threshold reproducing the given codes, if one exists.

    Requires every nonzero code to match sign(W_i) and all support magnitudes
    to exceed all zero-code magnitudes (the magnitude-threshold property the
    least-squares optimum exhibits in practice).
    """
    mags = np.abs(w.astype(np.float64))
    on = codes != 0
    if not on.any():
        return float(mags.max()) if mags.max() > 0 else 1.0
    if not (np.sign(w[on]) == codes[on]).all():
        raise AssertionError("optimal codes disagree with weight signs")
    lo = float(mags[~on].max()) if (~on).any() else 0.0
    hi = float(mags[on].min())
    if not hi > lo:
        raise AssertionError("optimal codes are not threshold-representable")
    return 0.5 * (lo + hi)


def brute_force_oracle(weights) -> TernarySolution:
    """Exhaustive minimum of J over all 3^n code vectors (n <= 16).

    For each code vector the best scale is the clipped least-squares value
    max(0, W.c / c.c), with alpha := 0 when every code is zero.
    """
    w = as_flat_f32(weights)
    n = w.size
    if n == 0:
        raise ValueError("weights are empty")
    if n > ORACLE_MAX_N:
        raise ValueError(f"oracle enumerates 3^n vectors; n={n} exceeds the bound {ORACLE_MAX_N}")
    w64 = w.astype(np.float64)
    ww = float(np.dot(w64, w64))
    total = 3**n
    chunk = 3**10
    powers = 3 ** np.arange(n, dtype=np.int64)
    best_j = np.inf
    best_id = 0
    for start in range(0, total, chunk):
        ids = np.arange(start, min(start + chunk, total), dtype=np.int64)
        digits = (ids[:, None] // powers[None, :]) % 3  # base-3, digit i = code i
        codes = (digits - 1).astype(np.int8)
        s1 = codes @ w64
        s2 = (codes != 0).sum(axis=1).astype(np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            alpha = np.where(s2 > 0, np.maximum(s1 / np.maximum(s2, 1.0), 0.0), 0.0)
        j = ww - 2.0 * alpha * s1 + alpha * alpha * s2
        k = int(np.argmin(j))
        if j[k] < best_j:
            best_j = float(j[k])
            best_id = int(ids[k])
    digits = (best_id // powers) % 3
    codes = (digits - 1).astype(np.int8)
    s2 = float((codes != 0).sum())
    alpha = max(0.0, float(codes @ w64) / s2) if s2 > 0 else 0.0
    delta = _delta_from_codes(w, codes)
    return TernarySolution(alpha, delta, codes, objective(w, alpha, codes))


def heuristic_grouped(W2d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-vectorized ternarize_heuristic over [groups, group_size] weights.

    Returns (alphas float32 [groups], codes int8 [groups, group_size]); each
    row agrees with ternarize_heuristic on that row. Raises AllZeroWeights
    naming the first all-zero row.
    """
    W2d = np.asarray(W2d, dtype=np.float32)
    if W2d.size == 0:
        raise ValueError("weights are empty")
    mags = np.abs(W2d)  # exact; reductions below accumulate in float64
    row_max = mags.max(axis=1)
    if (row_max == 0).any():
        raise AllZeroWeights(f"scale group {int(np.argmax(row_max == 0))} is all zero")
    delta = 0.7 * mags.mean(axis=1, dtype=np.float64)
    support = mags > delta[:, None]
    codes = np.where(support, np.sign(W2d), np.float32(0)).astype(np.int8)
    counts = support.sum(axis=1)
    alphas = np.where(support, mags, np.float32(0)).sum(axis=1, dtype=np.float64) / counts
    return alphas.astype(np.float32), codes


def binarize_grouped(W2d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-vectorized binarize_sign over [groups, group_size] weights."""
    W2d = np.asarray(W2d, dtype=np.float32)
    codes = np.where(W2d < 0, -1, 1).astype(np.int8)
    alphas = np.abs(W2d).mean(axis=1, dtype=np.float64)
    return alphas.astype(np.float32), codes


def binarize_sign(weights) -> BinarySolution:
    """Sign codes (sign(0) := +1) with the least-squares scale mean|W|."""
    w = as_flat_f32(weights)
    if w.size == 0:
        raise ValueError("weights are empty")
    codes = np.where(w < 0, -1, 1).astype(np.int8)
    alpha = float(np.abs(w.astype(np.float64)).mean())
    return BinarySolution(alpha, codes, objective(w, alpha, codes))


def validate_distribution_rule(kind: str, param: float, n: int, rng: Rng) -> DistributionRuleReport:
    """Sample n weights, solve exactly, and compare the threshold against the
    closed-form rule: a/3 for uniform[-a, a], 0.6*sigma for N(0, sigma^2)."""
    if n < 10_000:
        raise ValueError(f"n must be >= 10^4 for a stable estimate, got {n}")
    shape = Shape((n,))
    if kind == "uniform":
        w = sample_uniform(rng, shape, param)
        predicted = param / 3.0
    elif kind == "normal":
        w = sample_normal(rng, shape, param)
        predicted = 0.6 * param
    else:
        raise ValueError(f"kind must be 'uniform' or 'normal', got {kind!r}")
    exact = ternarize_exact(w)
    heur = ternarize_heuristic(w)
    return DistributionRuleReport(
        kind=kind,
        param=param,
        n=n,
        delta_exact=exact.delta,
        delta_predicted=predicted,
        delta_heuristic=heur.delta,
        objective_exact=exact.objective,
        objective_heuristic=heur.objective,
    )


def template_count(filter_dims, states: int) -> int:
    """states^(filter size) as an exact big integer (states in {2, 3})."""
    if states not in (2, 3):
        raise ValueError(f"states must be 2 or 3, got {states}")
    dims = filter_dims.dims if isinstance(filter_dims, Shape) else tuple(filter_dims)
    size = 1
    for d in dims:
        if d < 1:
            raise ValueError(f"filter dims must be >= 1, got {dims}")
        size *= int(d)
    return states**size
