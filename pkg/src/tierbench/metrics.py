"""Quality, cost and agreement metrics over collections of runs.

Undefined values (zero denominators, too few samples) are returned as
``None`` and serialized as N/A by the reporting layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import stats as sps

from tierbench.domain import SCORE_TOL, TokenStats
from tierbench.errors import DomainError

CI_MIN_N = 30
Z_95 = 1.959963984540054
TIER_ORDER = ("T0", "T1", "T2", "T3", "T4", "T5", "T6")


@dataclass(frozen=True)
class MetricEstimate:
    value: float
    n: int
    ci_low: float | None = None
    ci_high: float | None = None

    @property
    def has_ci(self) -> bool:
        return self.ci_low is not None


class _Unattainable:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "UNATTAINABLE"

    def __str__(self) -> str:
        return "unattainable"

    def __reduce__(self):
        return (_Unattainable, ())


UNATTAINABLE = _Unattainable()
CoPValue = "float | _Unattainable"


def wilson_interval(successes: int, n: int, z: float = Z_95) -> tuple[float, float]:
    if n <= 0:
        raise DomainError("wilson interval needs n > 0")
    p = successes / n
    denom = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    # Rounding can leave an endpoint a hair inside p when p is 0 or 1.
    return max(0.0, min(p, centre - half)), min(1.0, max(p, centre + half))


def pass_rate(passed: Iterable[bool]) -> MetricEstimate:
    """Fraction of attempts that passed, with a Wilson CI once n > 30.

    Unevaluable runs should be passed in as ``False``: they are attempts
    that produced no correct solution.
    """
    flags = [bool(p) for p in passed]
    if not flags:
        raise DomainError("pass_rate of zero runs")
    n = len(flags)
    k = sum(flags)
    value = k / n
    if n > CI_MIN_N:
        lo, hi = wilson_interval(k, n)
        return MetricEstimate(value, n, lo, hi)
    return MetricEstimate(value, n)


def mean_estimate(values: Sequence[float], confidence: float = 0.95) -> MetricEstimate:
    """Sample mean with a Student-t interval once n > 30."""
    if not values:
        raise DomainError("mean of zero values")
    arr = np.asarray(values, dtype=float)
    n = arr.size
    mean = float(arr.mean())
    if n > CI_MIN_N:
        sem = float(arr.std(ddof=1)) / math.sqrt(n)
        half = float(sps.t.ppf(0.5 + confidence / 2, n - 1)) * sem
        return MetricEstimate(mean, n, mean - half, mean + half)
    return MetricEstimate(mean, n)


def _ratio(num: float, den: float, what: str) -> float:
    if den <= 0:
        raise DomainError(f"{what}: denominator must be > 0")
    if num < 0:
        raise DomainError(f"{what}: numerator must be >= 0")
    if num > den:
        raise DomainError(f"{what}: {num} exceeds {den}")
    return num / den


def impl_rate(satisfied: int, total: int) -> float:
    return _ratio(satisfied, total, "impl_rate")


def progress_rate(achieved_steps: int, expected_steps: int) -> float:
    return _ratio(achieved_steps, expected_steps, "progress_rate")


def change_fail_percentage(failed_changes: int, total_changes: int) -> float | None:
    if total_changes == 0:
        return None
    return _ratio(failed_changes, total_changes, "change_fail_percentage")


def consistency(values: Sequence[float], ddof: int = 0) -> float | None:
    """1 - sigma/mu. Population sigma by default; may be negative when sigma > mu."""
    if len(values) < 2:
        return None
    arr = np.asarray(values, dtype=float)
    mu = float(arr.mean())
    if mu == 0:
        return None
    return 1.0 - float(arr.std(ddof=ddof)) / mu


def cost_of_pass(mean_cost: float, pass_rate_value: float):
    if mean_cost < 0:
        raise DomainError("cost must be >= 0")
    if not 0 <= pass_rate_value <= 1:
        raise DomainError(f"pass rate {pass_rate_value} outside [0, 1]")
    if pass_rate_value == 0:
        return UNATTAINABLE
    return mean_cost / pass_rate_value


def _tier_key(tier: str) -> tuple[int, str]:
    try:
        return (TIER_ORDER.index(tier), tier)
    except ValueError:
        return (len(TIER_ORDER), tier)


def frontier_cop(per_tier: Mapping[str, object]) -> tuple[str | None, object]:
    """Cheapest finite CoP and the tier achieving it; ties go to the lower tier."""
    if not per_tier:
        raise DomainError("frontier_cop of an empty mapping")
    best_tier, best = None, UNATTAINABLE
    for tier in sorted(per_tier, key=_tier_key):
        value = per_tier[tier]
        if value is UNATTAINABLE:
            continue
        if best is UNATTAINABLE or value < best:
            best_tier, best = tier, value
    return best_tier, best


def token_distribution(stats: TokenStats) -> dict[str, float] | None:
    total = stats.total()
    if total == 0:
        return None
    return {k: v / total for k, v in stats.to_dict().items()}


def latency_breakdown(agent_s: float, judge_s: float) -> dict[str, float] | None:
    if agent_s < 0 or judge_s < 0:
        raise DomainError("latencies must be >= 0")
    total = agent_s + judge_s
    if total == 0:
        return None
    return {"agent": agent_s, "judge": judge_s, "total": total, "judge_pct": judge_s / total}


def strategic_drift(goal_vec: Sequence[float], action_vec: Sequence[float]) -> float | None:
    """Cosine distance between the goal and final-action embeddings, in [0, 2]."""
    a = np.asarray(goal_vec, dtype=float)
    b = np.asarray(action_vec, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise DomainError("embedding vectors must be 1-D and equal length")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return None
    cos = float(np.dot(a, b) / (na * nb))
    return 1.0 - max(-1.0, min(1.0, cos))


def ablation_score(with_component: float, without_component: float) -> float:
    return with_component - without_component


# -- agreement -----------------------------------------------------------------


def average_ranks(values: Sequence[float]) -> np.ndarray:
    """1-based ranks; tied values share the mean of the ranks they span."""
    arr = np.asarray(values, dtype=float)
    order = np.argsort(arr, kind="mergesort")
    ranks = np.empty(arr.size, dtype=float)
    i = 0
    while i < arr.size:
        j = i
        while j + 1 < arr.size and arr[order[j + 1]] == arr[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def pearson(a: Sequence[float], b: Sequence[float]) -> float | None:
    x = np.asarray(a, dtype=float)
    y = np.asarray(b, dtype=float)
    if x.shape != y.shape:
        raise DomainError("pearson: length mismatch")
    if x.size < 2:
        return None
    dx = x - x.mean()
    dy = y - y.mean()
    den = math.sqrt(float(dx @ dx) * float(dy @ dy))
    if den == 0:
        return None
    return max(-1.0, min(1.0, float(dx @ dy) / den))


def spearman(a: Sequence[float], b: Sequence[float]) -> float | None:
    if len(a) != len(b):
        raise DomainError("spearman: length mismatch")
    return pearson(average_ranks(a), average_ranks(b))


def mean_abs_delta(a: Sequence[float], b: Sequence[float]) -> float:
    x = np.asarray(a, dtype=float)
    y = np.asarray(b, dtype=float)
    if x.shape != y.shape or x.size == 0:
        raise DomainError("mean_abs_delta: need equal, nonempty vectors")
    return float(np.mean(np.abs(x - y)))


def krippendorff_alpha_interval(matrix: Sequence[Sequence[float | None]]) -> float | None:
    """Krippendorff's alpha with the squared-difference (interval) metric.

    ``matrix`` is coders x units; ``None``/NaN marks a missing rating.  Units
    with fewer than two ratings are not pairable and are dropped.
    """
    try:
        arr = np.array([[np.nan if v is None else float(v) for v in row] for row in matrix], dtype=float)
    except (TypeError, ValueError):
        raise DomainError("alpha needs a coders x units matrix") from None
    if arr.ndim != 2:
        raise DomainError("alpha needs a coders x units matrix")
    units = [col[~np.isnan(col)] for col in arr.T]
    units = [u for u in units if u.size >= 2]
    if len(units) < 2:
        return None
    n = sum(u.size for u in units)
    d_o = 0.0
    for u in units:
        diff = u[:, None] - u[None, :]
        d_o += float((diff * diff).sum()) / (u.size - 1)
    d_o /= n
    pooled = np.concatenate(units)
    if np.ptp(pooled) < SCORE_TOL:
        # Spread below score resolution: expected disagreement is float noise.
        return None
    diff = pooled[:, None] - pooled[None, :]
    d_e = float((diff * diff).sum()) / (n * (n - 1))
    return 1.0 - d_o / d_e


@dataclass(frozen=True)
class PairAgreement:
    spearman_rho: float | None
    pearson_r: float | None
    mean_abs_delta: float


@dataclass(frozen=True)
class AgreementReport:
    judges: tuple[str, ...]
    n_runs: int
    pairwise: Mapping[tuple[str, str], PairAgreement] = field(default_factory=dict)
    krippendorff_alpha_interval: float | None = None
    low_sample: bool = False


def judge_agreement(
    scores: Sequence[Sequence[float]], judges: Sequence[str] | None = None
) -> AgreementReport:
    """Pairwise and pooled agreement for a judges x runs score matrix."""
    rows = [list(map(float, r)) for r in scores]
    if len(rows) < 2:
        raise DomainError("agreement needs at least two judges")
    n = len(rows[0])
    if any(len(r) != n for r in rows):
        raise DomainError("every judge must score the same runs")
    if n < 2:
        raise DomainError("agreement needs at least two runs")
    names = tuple(judges) if judges is not None else tuple(f"judge{i}" for i in range(len(rows)))
    if len(names) != len(rows):
        raise DomainError("judge names do not match score rows")
    pairwise = {
        (names[i], names[j]): PairAgreement(
            spearman(rows[i], rows[j]),
            pearson(rows[i], rows[j]),
            mean_abs_delta(rows[i], rows[j]),
        )
        for i, j in combinations(range(len(rows)), 2)
    }
    return AgreementReport(
        judges=names,
        n_runs=n,
        pairwise=pairwise,
        krippendorff_alpha_interval=krippendorff_alpha_interval(rows),
        low_sample=n < CI_MIN_N,
    )
