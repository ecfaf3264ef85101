"""Evaluation metrics: Jaccard, ROC area, sensitivity/specificity, the
tortuosity distance metric with per-patient aggregation, Spearman
correlation and the two-sample t-test."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .centerline import CenterlineTree


@dataclass
class BranchPath:
    positions_mm: np.ndarray  # (n, 3), ordered along the branch

    def length(self) -> float:
        return float(np.linalg.norm(np.diff(self.positions_mm, axis=0),
                                    axis=1).sum())


@dataclass
class EvalReport:
    jaccard: float | None = None
    az: float | None = None
    sensitivity: float | None = None
    specificity: float | None = None
    dm_mean: float | None = None
    dm_std: float | None = None
    dm_range: tuple[float, float] | None = None
    spearman_rho: float | None = None
    t_statistic: float | None = None
    p_value: float | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        def clean(v):
            if v is None:
                return None
            if isinstance(v, tuple):
                return [clean(x) for x in v]
            v = float(v)
            return None if np.isnan(v) else v
        obj = {k: clean(getattr(self, k)) for k in (
            "jaccard", "az", "sensitivity", "specificity", "dm_mean",
            "dm_std", "dm_range", "spearman_rho", "t_statistic", "p_value")}
        obj.update(self.extra)
        return json.dumps(obj, indent=1, sort_keys=True)

    def to_table(self) -> str:
        rows = []
        for k in ("jaccard", "az", "sensitivity", "specificity", "dm_mean",
                  "dm_std", "dm_range", "spearman_rho", "t_statistic",
                  "p_value"):
            v = getattr(self, k)
            if v is None:
                continue
            if isinstance(v, tuple):
                rows.append((k, "[%.4g, %.4g]" % v))
            else:
                rows.append((k, "%.6g" % v))
        width = max((len(k) for k, _ in rows), default=10)
        return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows) + "\n"


def jaccard(a, b) -> float:
    """|a & b| / |a | b|; 1.0 when both masks are empty."""
    a = np.asarray(a, bool)
    b = np.asarray(b, bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def roc_az(scores, labels):
    """Area under the ROC curve as the Mann-Whitney concordance probability
    (ties count 0.5), plus the curve sampled at every distinct threshold.

    Returns (az, curve) with curve an (m, 3) array of rows
    (threshold, false_positive_rate, true_positive_rate).
    """
    scores = np.asarray(scores, np.float64)
    labels = np.asarray(labels, bool)
    n_pos = int(labels.sum())
    n_neg = int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("both classes must be non-empty")
    ranks = stats.rankdata(scores)  # average ranks on ties
    az = (ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)

    thresholds = np.unique(scores)[::-1]
    curve = np.empty((len(thresholds) + 1, 3))
    curve[0] = (np.inf, 0.0, 0.0)
    for i, t in enumerate(thresholds):
        pred = scores >= t
        curve[i + 1] = (t, (pred & ~labels).sum() / n_neg,
                        (pred & labels).sum() / n_pos)
    return float(az), curve


def sens_spec(prediction, labels):
    """(sensitivity, specificity); a zero-denominator side is NaN."""
    pred = np.asarray(prediction, bool)
    lab = np.asarray(labels, bool)
    tp = int((pred & lab).sum())
    fn = int((~pred & lab).sum())
    tn = int((~pred & ~lab).sum())
    fp = int((pred & ~lab).sum())
    sens = tp / (tp + fn) if tp + fn else float("nan")
    spec = tn / (tn + fp) if tn + fp else float("nan")
    return sens, spec


def distance_metric(branch) -> float:
    """Tortuosity: path length / endpoint chord length, >= 1."""
    pos = branch.positions_mm if isinstance(branch, BranchPath) \
        else np.asarray(branch, np.float64)
    if len(pos) < 2:
        raise ValueError("branch needs at least two nodes")
    chord = float(np.linalg.norm(pos[-1] - pos[0]))
    if chord <= 0:
        raise ValueError("coincident endpoints: distance metric undefined")
    length = float(np.linalg.norm(np.diff(pos, axis=0), axis=1).sum())
    return length / chord


def extract_branch_paths(tree: CenterlineTree) -> list[BranchPath]:
    """Maximal paths whose interior nodes have tree-degree 2, between
    consecutive branch points / endpoints."""
    n = tree.n_nodes
    if n == 0:
        return []
    adj = [[] for _ in range(n)]
    for a, b in tree.edges:
        adj[a].append(int(b))
        adj[b].append(int(a))
    deg = np.array([len(x) for x in adj])
    stops = set(np.flatnonzero(deg != 2))
    paths = []
    visited_edges = set()
    pos = tree.positions_mm()
    for s in sorted(stops):
        for nb in sorted(adj[s]):
            if (s, nb) in visited_edges:
                continue
            path = [s, nb]
            visited_edges.add((s, nb))
            visited_edges.add((nb, s))
            prev, cur = s, nb
            while cur not in stops:
                nxt = [x for x in adj[cur] if x != prev]
                if not nxt:
                    break
                prev, cur = cur, nxt[0]
                visited_edges.add((prev, cur))
                visited_edges.add((cur, prev))
                path.append(cur)
            paths.append(BranchPath(pos[path]))
    # isolated cycles (no stop nodes) are ignored: they have no endpoints
    return paths


def patient_dm(trees, min_branch_mm: float = 10.0):
    """Unweighted mean/std/range of the distance metric over all branches of
    at least min_branch_mm path length."""
    if isinstance(trees, CenterlineTree):
        trees = [trees]
    values = []
    for tree in trees:
        for branch in extract_branch_paths(tree):
            if branch.length() >= min_branch_mm:
                try:
                    values.append(distance_metric(branch))
                except ValueError:
                    continue  # closed loops reported as undefined, skipped
    if not values:
        raise ValueError(f"no branch of at least {min_branch_mm} mm")
    arr = np.asarray(values)
    return {
        "dm_mean": float(arr.mean()),
        "dm_std": float(arr.std(ddof=0)),
        "dm_range": (float(arr.min()), float(arr.max())),
        "n_branches": int(len(arr)),
    }


def spearman(x, y) -> float:
    """Spearman rank correlation (Pearson on mid-ranks)."""
    x = np.asarray(x, np.float64)
    y = np.asarray(y, np.float64)
    if len(x) != len(y):
        raise ValueError("inputs must have equal length")
    if len(x) < 3:
        raise ValueError("need at least 3 pairs")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise ValueError("constant input vector")
    rho = stats.spearmanr(x, y).statistic
    return float(rho)


def two_sample_t(a, b, pooled: bool = False):
    """Welch's t-test (default) or the pooled-variance variant.
    Returns (t, two-sided p)."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("each group needs at least 2 values")
    if a.var(ddof=1) == 0 and b.var(ddof=1) == 0:
        raise ValueError("zero variance in both groups")
    res = stats.ttest_ind(a, b, equal_var=pooled)
    return float(res.statistic), float(res.pvalue)
