import itertools

import numpy as np
import pytest

from maskdiff.metrics import (MetricReport, boundary, boundary_f1, bootstrap_ci, dice,
                              evaluate_masks, precision)


# --- independent brute-force oracles ---------------------------------------

def oracle_counts(p, g):
    tp = sum(1 for a, b in zip(p.ravel(), g.ravel()) if a and b)
    return tp, int(sum(p.ravel())), int(sum(g.ravel()))


def oracle_dice(p, g):
    tp, np_, ng = oracle_counts(p, g)
    return 1.0 if np_ + ng == 0 else 2 * tp / (np_ + ng)


def oracle_precision(p, g):
    tp, np_, ng = oracle_counts(p, g)
    if np_ == 0:
        return 1.0 if ng == 0 else 0.0
    return tp / np_


def oracle_boundary(m):
    h, w = m.shape
    out = np.zeros_like(m, dtype=bool)
    for i in range(h):
        for j in range(w):
            if not m[i, j]:
                continue
            for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                a, b = i + di, j + dj
                if not (0 <= a < h and 0 <= b < w) or not m[a, b]:
                    out[i, j] = True
    return out


def oracle_bf1(p, g, tol):
    bp = list(zip(*np.nonzero(oracle_boundary(p))))
    bg = list(zip(*np.nonzero(oracle_boundary(g))))
    if not bp and not bg:
        return 1.0
    if not bp or not bg:
        return 0.0

    def hit(src, ref):
        return sum(1 for s in src if min((s[0] - r[0]) ** 2 + (s[1] - r[1]) ** 2 for r in ref) <= tol ** 2)

    prec = hit(bp, bg) / len(bp)
    rec = hit(bg, bp) / len(bg)
    return 0.0 if prec + rec == 0 else 2 * prec * rec / (prec + rec)


# --- examples ---------------------------------------------------------------

def test_dice_examples():
    g = np.zeros((8, 8), bool)
    g[:2] = True  # 16 px
    assert dice(g, g) == 1.0
    assert dice(g, np.roll(g, 4, axis=0)) == 0.0
    p = np.zeros((8, 8), bool)
    p[1:3] = True  # 16 px, overlap 8
    assert oracle_counts(p, g)[0] == 8
    assert dice(p, g) == 0.5
    assert dice(np.zeros((4, 4)), np.zeros((4, 4))) == 1.0


def test_precision_examples():
    g = np.zeros((8, 8), bool)
    g[:4] = True
    p = np.zeros((8, 8), bool)
    p[:2, :4] = True
    assert precision(p, g) == 1.0
    assert precision(np.roll(g, 4, axis=0), g) == 0.0
    p = np.zeros(20, bool)
    p[:10] = True
    gg = np.zeros(20, bool)
    gg[3:15] = True
    assert precision(p, gg) == pytest.approx(0.7)
    assert precision(np.zeros(4), np.zeros(4)) == 1.0
    assert precision(np.zeros(4), np.ones(4)) == 0.0


def test_shape_mismatch():
    for fn in (dice, precision, boundary_f1):
        with pytest.raises(ValueError):
            fn(np.zeros((4, 4)), np.zeros((4, 5)))


def test_boundary_definition():
    m = np.zeros((6, 6), bool)
    m[1:5, 1:5] = True
    b = boundary(m)
    assert b.sum() == 12 and not b[2:4, 2:4].any()
    full = np.ones((3, 3), bool)
    assert boundary(full).sum() == 8  # image edge counts


def _square(shift=0, size=16, lo=4, hi=12):
    m = np.zeros((size, size), bool)
    m[lo:hi, lo + shift:hi + shift] = True
    return m


def test_bf1_examples():
    g = _square()
    assert boundary_f1(g, g) == 1.0
    assert boundary_f1(_square(1), g, tol=2) == 1.0
    shifted = _square(5, size=20)
    gt = _square(size=20)
    v = boundary_f1(shifted, gt, tol=2)
    assert v < 1.0
    assert v == pytest.approx(oracle_bf1(shifted, gt, 2), abs=1e-12)
    assert boundary_f1(np.zeros((4, 4)), np.zeros((4, 4))) == 1.0
    with pytest.raises(ValueError):
        boundary_f1(g, g, tol=-1)


def test_metrics_match_oracles_on_random_4x4_pairs():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        p = rng.random((4, 4)) < rng.random()
        g = rng.random((4, 4)) < rng.random()
        assert dice(p, g) == oracle_dice(p, g)
        assert precision(p, g) == oracle_precision(p, g)
        for tol in (0, 1, 2):
            assert abs(boundary_f1(p, g, tol) - oracle_bf1(p, g, tol)) <= 1e-9


def test_symmetry_and_transpose_invariance():
    rng = np.random.default_rng(7)
    asym = 0
    for _ in range(200):
        p = rng.random((6, 6)) < 0.5
        g = rng.random((6, 6)) < 0.4
        assert dice(p, g) == dice(g, p)
        assert boundary_f1(p, g) == pytest.approx(boundary_f1(g, p), abs=1e-12)
        asym += precision(p, g) != precision(g, p)
        for fn in (dice, precision, boundary_f1):
            assert fn(p.T, g.T) == pytest.approx(fn(p, g), abs=1e-12)
    assert asym > 0


def test_bootstrap_examples():
    r = bootstrap_ci([0.7], seed=1)
    assert r.ci_low == r.ci_high == r.mean == 0.7
    r = bootstrap_ci([0.5] * 10)
    assert r.ci_low == r.ci_high == 0.5
    scores = list(np.random.default_rng(0).normal(0.8, 0.05, 40))
    a, b = bootstrap_ci(scores, seed=3), bootstrap_ci(scores, seed=3)
    assert a == b
    assert a.n_resamples == 1000
    assert a.ci_low <= a.mean <= a.ci_high
    assert bootstrap_ci(scores, seed=4) != a
    with pytest.raises(ValueError):
        bootstrap_ci([])


def test_bootstrap_matches_explicit_resampling():
    scores = np.random.default_rng(1).random(15)
    r = bootstrap_ci(scores, n=200, seed=9)
    rng = np.random.default_rng(9)
    idx = rng.integers(0, 15, size=(200, 15))
    means = sorted(scores[row].mean() for row in idx)
    assert r.ci_low == pytest.approx(np.percentile(means, 2.5))
    assert r.ci_high == pytest.approx(np.percentile(means, 97.5))


def test_evaluate_masks_reports_three_metrics():
    g = [_square(), _square(2)]
    reps = evaluate_masks(g, g)
    assert [r.metric_name for r in reps] == ["dice", "precision", "bf1"]
    assert all(isinstance(r, MetricReport) and r.mean == 1.0 for r in reps)


def test_bf1_monotone_in_tolerance():
    rng = np.random.default_rng(11)
    for _ in range(200):
        p = rng.random((10, 10)) < 0.4
        g = rng.random((10, 10)) < 0.4
        vals = [boundary_f1(p, g, tol) for tol in (0, 1, 1.5, 2, 3, 5)]
        assert all(b >= a - 1e-12 for a, b in zip(vals, vals[1:]))
