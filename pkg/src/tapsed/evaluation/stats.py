"""One-way ANOVA and Tukey HSD for comparing per-run scores of several models."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np
from scipy import special, stats


@dataclass
class AnovaResult:
    F: float
    p: float
    df_between: int
    df_within: int
    ms_within: float


def _check_groups(groups) -> List[np.ndarray]:
    gs = [np.asarray(g, dtype=np.float64).ravel() for g in groups]
    if len(gs) < 2:
        raise ValueError("need at least two groups")
    if any(len(g) < 2 for g in gs):
        raise ValueError("each group needs at least two samples")
    return gs


def f_sf(F: float, d1: int, d2: int) -> float:
    """Survival function of the F distribution via the regularized incomplete beta."""
    if F <= 0:
        return 1.0
    if np.isinf(F):
        return 0.0
    return float(special.betainc(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * F)))


def anova_oneway(groups: Sequence[Sequence[float]]) -> AnovaResult:
    gs = _check_groups(groups)
    k = len(gs)
    n = sum(len(g) for g in gs)
    means = np.array([g.mean() for g in gs])
    grand = np.concatenate(gs).mean()
    # equal group means give exactly zero, free of rounding in the grand mean
    ss_between = 0.0 if np.ptp(means) == 0 else sum(len(g) * (m - grand) ** 2 for g, m in zip(gs, means))
    ss_within = sum(((g - g.mean()) ** 2).sum() for g in gs)
    df_b, df_w = k - 1, n - k
    ms_b = ss_between / df_b
    ms_w = ss_within / df_w
    scale = max(1.0, float(np.abs(np.concatenate(gs)).max())) ** 2
    if ms_w <= 1e-24 * scale:
        F = 0.0 if ms_b <= 1e-24 * scale else float("inf")
    else:
        F = float(ms_b / ms_w)
    return AnovaResult(F, f_sf(F, df_b, df_w), df_b, df_w, float(ms_w))


@dataclass
class TukeyResult:
    names: List[str]
    means: np.ndarray
    p_values: np.ndarray  # (k, k), 1 on the diagonal
    significant: np.ndarray  # (k, k) bool
    ordering: str


def studentized_range_critical(k: int, df: int, alpha: float = 0.05) -> float:
    return float(stats.studentized_range.ppf(1 - alpha, k, df))


def tukey_hsd(groups: Sequence[Sequence[float]], names: Sequence[str] = None, alpha: float = 0.05) -> TukeyResult:
    """Pairwise Tukey-Kramer comparisons with the pooled within-group variance."""
    gs = _check_groups(groups)
    k = len(gs)
    names = list(names) if names is not None else [f"g{i}" for i in range(k)]
    res = anova_oneway(gs)
    means = np.array([g.mean() for g in gs])
    sizes = np.array([len(g) for g in gs])
    pv = np.ones((k, k))
    for i in range(k):
        for j in range(i + 1, k):
            diff = abs(means[i] - means[j])
            se = np.sqrt(res.ms_within / 2.0 * (1.0 / sizes[i] + 1.0 / sizes[j]))
            if se == 0:
                p = 1.0 if diff == 0 else 0.0
            else:
                p = float(stats.studentized_range.sf(diff / se, k, res.df_within))
            pv[i, j] = pv[j, i] = p
    sig = pv < alpha
    np.fill_diagonal(sig, False)
    return TukeyResult(names, means, pv, sig, ordering_string(names, means, sig))


def ordering_string(names: Sequence[str], means: np.ndarray, significant: np.ndarray) -> str:
    """Ascending chain of groups joined by '=', '<=' or '<'.

    Between neighbours a and b (mean(a) <= mean(b)): '<' when they differ
    significantly; '≤' when they do not, but b differs from some group
    further down the chain; '=' otherwise.
    """
    order = list(np.argsort(means, kind="stable"))
    parts = [names[order[0]]]
    for pos in range(1, len(order)):
        a, b = order[pos - 1], order[pos]
        if significant[a, b]:
            op = "<"
        elif any(significant[order[q], b] for q in range(pos - 1)):
            op = "≤"
        else:
            op = "="
        parts.append(op)
        parts.append(names[b])
    return " ".join(parts)


def compare_models(scores: Dict[str, Sequence[float]], alpha: float = 0.05) -> Dict[str, object]:
    names = list(scores)
    groups = [scores[n] for n in names]
    an = anova_oneway(groups)
    tk = tukey_hsd(groups, names, alpha)
    return {"F": an.F, "p": an.p, "ordering": tk.ordering}
