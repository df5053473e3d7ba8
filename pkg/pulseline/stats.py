"""
Group comparison battery.

Normality is checked with Shapiro-Wilk on both groups; when both look
normal (p > 0.05) a two-sample t-test and Cohen's d are used, otherwise
the Wilcoxon rank-sum (Mann-Whitney U) test and Cliff's delta.

Groups are compared on one value per recording (see
:func:`recording_means`); window rates of one recording are not
independent samples.
"""

import logging
from dataclasses import asdict, dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy import stats

from .tools import PulselineError, json_float

log = logging.getLogger(__name__)

ALPHA = 0.05
EXACT_RANK_SUM_LIMIT = 12
SHAPIRO_MIN, SHAPIRO_MAX = 3, 5000

EFFECT_THRESHOLDS = {
    "cohens-d": (0.2, 0.5, 0.8),
    "cliffs-delta": (0.147, 0.33, 0.474),
}
TABLE_COLUMNS = ("p", "p.f.", "p.f.f.")


class StatsError(PulselineError):
    """Statistical test error"""

    def __init__(self, msg: str):
        self.msg = msg

    def __str__(self):
        return f"statistics error: {self.msg}"


@dataclass(frozen=True)
class GroupComparison:
    normal_a: bool
    normal_b: bool
    test_name: str
    statistic: float
    p_value: float
    effect_name: str
    effect_value: float

    @property
    def significant(self) -> bool:
        return self.p_value < ALPHA

    @property
    def effect_label(self) -> str:
        return effect_magnitude(self.effect_value, self.effect_name)

    def todict(self) -> dict:
        content = asdict(self)
        for key in ("statistic", "p_value", "effect_value"):
            content[key] = json_float(content[key])
        content["effect_label"] = self.effect_label
        return content


def _as_sample(values, name: str, minimum: int) -> np.ndarray:
    sample = np.asarray(values, dtype=np.float64).ravel()
    if len(sample) < minimum:
        raise StatsError(f"{name}: {len(sample)} values, at least {minimum} needed")
    if not np.all(np.isfinite(sample)):
        raise StatsError(f"{name}: non-finite values")
    return sample


def shapiro_wilk(sample) -> Tuple[float, float]:
    """Shapiro-Wilk W statistic and p-value (3 <= n <= 5000)."""
    data = _as_sample(sample, "sample", SHAPIRO_MIN)
    if len(data) > SHAPIRO_MAX:
        raise StatsError(f"{len(data)} values, at most {SHAPIRO_MAX} supported")
    if np.ptp(data) == 0:
        raise StatsError("zero variance sample")
    result = stats.shapiro(data)
    return float(result[0]), float(result[1])


def t_test_unpaired(a, b, welch: bool = False) -> Tuple[float, float]:
    """Two-sided two-sample t-test, pooled variance unless ``welch``."""
    a = _as_sample(a, "a", 2)
    b = _as_sample(b, "b", 2)
    pooled = ((len(a) - 1) * np.var(a, ddof=1) + (len(b) - 1) * np.var(b, ddof=1)) / (
        len(a) + len(b) - 2
    )
    if not pooled > 0:
        raise StatsError("zero pooled variance")
    result = stats.ttest_ind(a, b, equal_var=not welch)
    return float(result[0]), float(result[1])


def wilcoxon_rank_sum(a, b) -> Tuple[float, float]:
    """Mann-Whitney U of ``a`` and its two-sided p-value.

    Exact null distribution when n_a + n_b <= 12 without ties, normal
    approximation with tie and continuity corrections otherwise.
    """
    a = _as_sample(a, "a", 1)
    b = _as_sample(b, "b", 1)
    pooled = np.concatenate([a, b])
    if np.ptp(pooled) == 0:
        return len(a) * len(b) / 2.0, 1.0
    tied = len(np.unique(pooled)) < len(pooled)
    method = "exact" if len(pooled) <= EXACT_RANK_SUM_LIMIT and not tied else "asymptotic"
    result = stats.mannwhitneyu(
        a, b, use_continuity=True, alternative="two-sided", method=method
    )
    return float(result[0]), float(min(result[1], 1.0))


def cohens_d(a, b) -> float:
    """Mean difference over the pooled (n - 1 weighted) standard deviation."""
    a = _as_sample(a, "a", 2)
    b = _as_sample(b, "b", 2)
    dof = len(a) + len(b) - 2
    pooled_sd = np.sqrt(
        ((len(a) - 1) * np.std(a, ddof=1) ** 2 + (len(b) - 1) * np.std(b, ddof=1) ** 2)
        / dof
    )
    if not pooled_sd > 0:
        raise StatsError("zero pooled standard deviation")
    return float((np.mean(a) - np.mean(b)) / pooled_sd)


def cliffs_delta(a, b) -> float:
    """(#(a_i > b_j) - #(a_i < b_j)) / (n_a * n_b)."""
    a = _as_sample(a, "a", 1)
    b = _as_sample(b, "b", 1)
    dominance = np.sign(np.subtract.outer(a, b)).sum()
    return float(dominance) / (len(a) * len(b))


def effect_magnitude(value: float, method: str) -> str:
    """negligible, small, medium or large."""
    if method not in EFFECT_THRESHOLDS:
        raise ValueError(
            "method must be one of the following strings: %s"
            % ", ".join(EFFECT_THRESHOLDS)
        )
    small, medium, large = EFFECT_THRESHOLDS[method]
    value = abs(value)
    if value < small:
        return "negligible"
    if value < medium:
        return "small"
    if value < large:
        return "medium"
    return "large"


def recording_means(recordings: Sequence[Sequence[float]]) -> List[float]:
    """One pulse rate per recording: the mean of its finite window rates.

    Recordings without any finite rate are left out.
    """
    means = []
    for index, values in enumerate(recordings):
        values = np.asarray(values, dtype=np.float64).ravel()
        values = values[np.isfinite(values)]
        if not len(values):
            log.warning("recording %d: no usable pulse rate, left out", index)
            continue
        means.append(float(np.mean(values)))
    return means


def compare_groups(a, b, welch: bool = False) -> GroupComparison:
    """Run the decision tree on two independent groups.

    :param welch: use Welch's t-test on the parametric branch
    """
    a = _as_sample(a, "a", SHAPIRO_MIN)
    b = _as_sample(b, "b", SHAPIRO_MIN)
    normal_a = shapiro_wilk(a)[1] > ALPHA
    normal_b = shapiro_wilk(b)[1] > ALPHA
    if normal_a and normal_b:
        statistic, p_value = t_test_unpaired(a, b, welch)
        comparison = GroupComparison(
            normal_a, normal_b, "t-test", statistic, p_value, "cohens-d", cohens_d(a, b)
        )
    else:
        statistic, p_value = wilcoxon_rank_sum(a, b)
        comparison = GroupComparison(
            normal_a,
            normal_b,
            "wilcoxon-rank-sum",
            statistic,
            p_value,
            "cliffs-delta",
            cliffs_delta(a, b),
        )
    log.debug(
        "%s: statistic %g, p %g, %s %g",
        comparison.test_name,
        statistic,
        p_value,
        comparison.effect_name,
        comparison.effect_value,
    )
    return comparison


def table_row(
    a_groups: Sequence[Sequence[float]],
    b_groups: Sequence[Sequence[float]],
    welch: bool = False,
) -> Dict[str, GroupComparison]:
    """Compare two groups three times: uncorrected pulse rates, rates
    corrected with the self-fitted line, rates corrected with the preset.

    :param a_groups: the three versions of the first group
    :param b_groups: the three versions of the second group
    :return: comparisons keyed by ``p``, ``p.f.`` and ``p.f.f.``
    """
    if len(a_groups) != len(TABLE_COLUMNS) or len(b_groups) != len(TABLE_COLUMNS):
        raise StatsError(f"{len(TABLE_COLUMNS)} versions of each group expected")
    return {
        column: compare_groups(a, b, welch)
        for column, a, b in zip(TABLE_COLUMNS, a_groups, b_groups)
    }
