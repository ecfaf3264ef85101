import numpy as np
import pytest

from lungvessel.centerline import CenterlineTree
from lungvessel.metrics import (
    BranchPath,
    distance_metric,
    extract_branch_paths,
    jaccard,
    patient_dm,
    roc_az,
    sens_spec,
    spearman,
    two_sample_t,
)


# -- oracles -----------------------------------------------------------------

def az_pairwise(scores, labels):
    """O(n^2) concordance: P(score_pos > score_neg) with ties counting 0.5."""
    pos = scores[labels]
    neg = scores[~labels]
    wins = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1.0
            elif p == q:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def spearman_definitional(x, y):
    """Explicit mid-rank assignment + textbook Pearson."""
    def midranks(v):
        order = np.argsort(v, kind="stable")
        ranks = np.empty(len(v), float)
        i = 0
        sorted_v = v[order]
        while i < len(v):
            j = i
            while j < len(v) and sorted_v[j] == sorted_v[i]:
                j += 1
            ranks[order[i:j]] = (i + j + 1) / 2.0
            i = j
        return ranks
    rx = midranks(np.asarray(x, float))
    ry = midranks(np.asarray(y, float))
    cx = rx - rx.mean()
    cy = ry - ry.mean()
    return float((cx * cy).sum() / np.sqrt((cx ** 2).sum() * (cy ** 2).sum()))


# -- jaccard -----------------------------------------------------------------

def test_jaccard_basic_cases():
    a = np.zeros((4, 4, 4), bool)
    a[:2] = True
    assert jaccard(a, a) == 1.0
    b = np.zeros((4, 4, 4), bool)
    b[2:] = True
    assert jaccard(a, b) == 0.0
    # half-overlapping equal-size masks: |a & b| = |a| / 2 -> 1/3
    c = np.zeros((4, 4, 4), bool)
    c[1:3] = True
    assert jaccard(a, c) == pytest.approx(1.0 / 3.0)
    assert jaccard(a, c) == jaccard(c, a)
    assert jaccard(np.zeros((2, 2, 2), bool), np.zeros((2, 2, 2), bool)) == 1.0


def test_jaccard_dim_mismatch():
    with pytest.raises(ValueError):
        jaccard(np.zeros((2, 2, 2), bool), np.zeros((3, 3, 3), bool))


# -- ROC ---------------------------------------------------------------------

def test_az_perfect_and_ties():
    labels = np.array([True] * 5 + [False] * 5)
    scores = np.array([2.0] * 5 + [1.0] * 5)
    az, curve = roc_az(scores, labels)
    assert az == 1.0
    az2, _ = roc_az(np.ones(10), labels)
    assert az2 == 0.5


def test_az_matches_pairwise_oracle():
    rng = np.random.default_rng(0)
    scores = np.round(rng.normal(size=200), 2)  # rounding forces ties
    labels = rng.random(200) < 0.4
    az, _ = roc_az(scores, labels)
    assert az == pytest.approx(az_pairwise(scores, labels), abs=1e-12)


def test_az_negation_complement():
    rng = np.random.default_rng(1)
    scores = rng.normal(size=100)  # tie-free almost surely
    labels = rng.random(100) < 0.5
    a1, _ = roc_az(scores, labels)
    a2, _ = roc_az(-scores, labels)
    assert a1 + a2 == pytest.approx(1.0, abs=1e-12)


def test_az_curve_endpoints():
    rng = np.random.default_rng(2)
    scores = rng.normal(size=50)
    labels = rng.random(50) < 0.5
    _, curve = roc_az(scores, labels)
    assert curve[0][1] == 0.0 and curve[0][2] == 0.0
    assert curve[-1][1] == 1.0 and curve[-1][2] == 1.0
    assert len(curve) == len(np.unique(scores)) + 1


def test_az_single_class_rejected():
    with pytest.raises(ValueError):
        roc_az(np.arange(4.0), np.array([True] * 4))


# -- sensitivity / specificity -----------------------------------------------

def test_sens_spec_cases():
    labels = np.array([True] * 10 + [False] * 20)
    assert sens_spec(labels, labels) == (1.0, 1.0)
    sens, spec = sens_spec(np.ones(30, bool), labels)
    assert (sens, spec) == (1.0, 0.0)
    # TP=8, FN=2, TN=15, FP=5
    pred = np.array([True] * 8 + [False] * 2 + [False] * 15 + [True] * 5)
    sens, spec = sens_spec(pred, labels)
    assert sens == pytest.approx(0.8)
    assert spec == pytest.approx(0.75)


def test_sens_spec_undefined_side_is_nan():
    labels = np.zeros(5, bool)
    sens, spec = sens_spec(np.zeros(5, bool), labels)
    assert np.isnan(sens)
    assert spec == 1.0


# -- distance metric ---------------------------------------------------------

def test_dm_straight_line_exact():
    path = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]])
    assert distance_metric(path) == 1.0


def test_dm_semicircle():
    theta = np.linspace(0.0, np.pi, 65)  # 64 segments, radius 10
    path = np.stack([10 * np.cos(theta), 10 * np.sin(theta),
                     np.zeros_like(theta)], axis=1)
    assert distance_metric(path) == pytest.approx(np.pi / 2, rel=0.005)


def test_dm_l_shape():
    path = np.array([[0.0, 0, 0], [3.0, 0, 0], [3.0, 4.0, 0]])
    assert distance_metric(path) == pytest.approx(7.0 / 5.0)


def test_dm_rigid_invariance():
    rng = np.random.default_rng(3)
    path = np.cumsum(rng.normal(size=(20, 3)), axis=0)
    base = distance_metric(path)
    # random rotation (QR) + translation
    Q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    moved = path @ Q.T + np.array([5.0, -7.0, 11.0])
    assert distance_metric(moved) == pytest.approx(base, abs=1e-9)
    assert base >= 1.0


def test_dm_closed_loop_rejected():
    loop = np.array([[0.0, 0, 0], [1.0, 0, 0], [1.0, 1, 0], [0.0, 0, 0]])
    with pytest.raises(ValueError, match="undefined"):
        distance_metric(loop)


# -- branch extraction & patient aggregation ----------------------------------

def chain_tree(points, lung="left"):
    points = np.asarray(points, float)
    n = len(points)
    edges = np.array([[i, i + 1] for i in range(n - 1)])
    t = CenterlineTree(lung, np.round(points).astype(int), np.ones(n),
                       edges, [0])
    # positions in mm == points (unit spacing); keep float positions by
    # overriding nodes through spacing of 1 and integer grid
    return t


def test_patient_dm_straight_tree():
    t = chain_tree([[0, 0, k] for k in range(15)])
    out = patient_dm(t, min_branch_mm=10.0)
    assert out["dm_mean"] == pytest.approx(1.0)
    assert out["n_branches"] == 1


def test_patient_dm_mixed_branches():
    # short trunk (below the length floor) splitting into a straight branch
    # and an L-shaped one (dm = 28/20 = 1.4)
    nodes = [[0, 0, k] for k in range(5)]            # trunk 0..4, length 4
    nodes += [[0, 0, 4 + k] for k in range(1, 15)]   # straight: 5..18
    nodes += [[i, 0, 4] for i in range(1, 13)]       # L leg one: 19..30
    nodes += [[12, j, 4] for j in range(1, 17)]      # L leg two: 31..46
    edges = [[i, i + 1] for i in range(4)]
    edges += [[4, 5]] + [[i, i + 1] for i in range(5, 18)]
    edges += [[4, 19]] + [[i, i + 1] for i in range(19, 30)]
    edges += [[30, 31]] + [[i, i + 1] for i in range(31, 46)]
    t = CenterlineTree("left", np.array(nodes), np.ones(len(nodes)),
                       np.array(edges), [0])
    paths = extract_branch_paths(t)
    assert len(paths) == 3
    out = patient_dm(t, min_branch_mm=10.0)
    # trunk excluded by length; straight dm 1.0; L: length 28, chord 20
    assert out["n_branches"] == 2
    assert out["dm_mean"] == pytest.approx((1.0 + 28.0 / 20.0) / 2.0)


def test_patient_dm_no_qualifying_branch():
    t = chain_tree([[0, 0, 0], [0, 0, 1], [0, 0, 2]])
    with pytest.raises(ValueError, match="branch"):
        patient_dm(t, min_branch_mm=10.0)


# -- spearman ------------------------------------------------------------------

def test_spearman_monotone():
    x = np.array([1.0, 2.0, 5.0, 9.0, 12.0])
    assert spearman(x, np.exp(x / 10)) == pytest.approx(1.0)
    assert spearman(x, -x ** 3) == pytest.approx(-1.0)


def test_spearman_matches_definitional_oracle():
    rng = np.random.default_rng(4)
    for _ in range(10):
        x = np.round(rng.normal(size=50), 1)
        y = np.round(rng.normal(size=50), 1)
        assert spearman(x, y) == pytest.approx(
            spearman_definitional(x, y), abs=1e-12)


def test_spearman_monotone_transform_invariance():
    rng = np.random.default_rng(5)
    x = rng.normal(size=40)
    y = rng.normal(size=40)
    base = spearman(x, y)
    assert spearman(np.exp(x), y) == pytest.approx(base, abs=1e-12)
    assert spearman(x, 3 * y + 7) == pytest.approx(base, abs=1e-12)


def test_spearman_errors():
    with pytest.raises(ValueError):
        spearman([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        spearman([1.0, 2.0], [1.0, 2.0])


# -- t-test --------------------------------------------------------------------

def test_t_identical_groups():
    a = np.array([1.0, 2.0, 3.0, 4.0])
    t, p = two_sample_t(a, a.copy())
    assert t == 0.0
    assert p == pytest.approx(1.0)


def test_t_separated_groups_tiny_jitter():
    rng = np.random.default_rng(6)
    a = 0.0 + 1e-6 * rng.normal(size=4)
    b = 1.0 + 1e-6 * rng.normal(size=4)
    _, p = two_sample_t(a, b)
    assert p < 1e-4


def test_t_welch_worked_example():
    # groups engineered to mean 5.0 / 4.0 with sd exactly 1.0, n = 10 each:
    # Welch t = (5-4)/sqrt(1/10 + 1/10) = sqrt(5) ~ 2.2360679
    base = np.array([-1.5666989, -1.2185436, -0.8703883, -0.5222330,
                     -0.1740777, 0.1740777, 0.5222330, 0.8703883,
                     1.2185436, 1.5666989])
    base = base / base.std(ddof=1)
    a = 5.0 + base
    b = 4.0 + base
    t, p = two_sample_t(a, b)
    assert t == pytest.approx(np.sqrt(5.0), rel=1e-6)
    # pooled variant equals Welch for equal variances and sizes
    tp, _ = two_sample_t(a, b, pooled=True)
    assert tp == pytest.approx(t, rel=1e-9)


def test_t_zero_variance_rejected():
    with pytest.raises(ValueError):
        two_sample_t([1.0, 1.0, 1.0], [2.0, 2.0])
