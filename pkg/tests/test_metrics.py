import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hd3d import metrics
from hd3d.errors import DimMismatch, EmptySurface
from hd3d.metrics import (asd, both_directed, dice, evaluate, extract_surface, format_table,
                          mhd, nearest_rank, surface_mask)
from hd3d.rng import Rng


# brute-force oracle: surfaces by explicit neighbour loops, distances by all pairs

def oracle_surface(m):
    D, H, W = m.shape
    pts = []
    for z in range(D):
        for y in range(H):
            for x in range(W):
                if not m[z, y, x]:
                    continue
                for dz, dy, dx in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                    q = (z + dz, y + dy, x + dx)
                    if not (0 <= q[0] < D and 0 <= q[1] < H and 0 <= q[2] < W) or not m[q]:
                        pts.append((z, y, x))
                        break
    return np.array(pts, dtype=np.float64).reshape(-1, 3)


def oracle_directed(pa, pb, spacing):
    sp = np.asarray(spacing, np.float64)
    out = []
    for p in pa:
        out.append(min(math.sqrt(sum(((p[i] - q[i]) * sp[i]) ** 2 for i in range(3))) for q in pb))
    return np.array(out)


def oracle_all(a, b, spacing):
    pa, pb = oracle_surface(a), oracle_surface(b)
    dab, dba = oracle_directed(pa, pb, spacing), oracle_directed(pb, pa, spacing)

    def rank(d):
        s = sorted(d)
        return s[max(math.ceil(0.95 * len(s)), 1) - 1]
    return (max(rank(dab), rank(dba)), max(dab.mean(), dba.mean()),
            (dab.sum() + dba.sum()) / (len(dab) + len(dba)))


def random_blob(r, dims, p):
    m = r.random(int(np.prod(dims))).reshape(dims) < p
    return m


def test_dice_examples():
    a = np.zeros((4, 4, 4), bool)
    b = a.copy()
    assert dice(a, b) == 1.0
    a[0, 0, :2] = True
    b[0, 0, 1:3] = True
    assert dice(a, b) == 0.5
    assert dice(a, a) == 1.0
    assert dice(a, np.zeros_like(a)) == 0.0
    with pytest.raises(DimMismatch):
        dice(a, np.zeros((4, 4, 5), bool))


def test_cube_surface_count():
    m = np.zeros((9, 9, 9), bool)
    m[2:7, 2:7, 2:7] = True
    assert surface_mask(m).sum() == 5 ** 3 - 3 ** 3 == 98
    assert len(extract_surface(m)) == 98
    # at the volume border the outside counts as background
    assert surface_mask(np.ones((3, 3, 3), bool)).sum() == 26


def test_surface_paths_agree():
    r = Rng(5)
    for _ in range(5):
        m = random_blob(r, (9, 10, 11), 0.6)
        assert np.array_equal(surface_mask(m, use_numba=True), surface_mask(m, use_numba=False))
        assert np.array_equal(np.argwhere(surface_mask(m)), oracle_surface(m).astype(int))


def test_shifted_cube_distances():
    a = np.zeros((12, 12, 12), bool)
    a[2:7, 2:7, 2:7] = True
    b = np.roll(a, 2, axis=2)
    assert mhd(a, b) == 2.0
    assert mhd(a, b, spacing=(1, 1, 0.5)) == 1.0
    assert mhd(a, a) == 0.0 and asd(a, a) == 0.0


def test_nearest_rank():
    d = np.arange(1, 21, dtype=float)
    assert nearest_rank(d) == 19.0
    assert nearest_rank(np.array([3.0])) == 3.0
    assert nearest_rank(np.arange(1, 101, dtype=float)) == 95.0


def test_against_oracle_100_pairs():
    r = Rng(99)
    for i in range(100):
        dims = tuple(int(v) for v in 4 + r.integers(5, 3))
        sp = (1.0, 1.0, 1.0) if i % 2 == 0 else tuple(float(v) for v in 0.5 + 2 * r.random(3))
        a = random_blob(r, dims, 0.3 + 0.4 * r.random(1)[0])
        b = random_blob(r, dims, 0.3 + 0.4 * r.random(1)[0])
        if not a.any() or not b.any():
            continue
        h95, hdj, s = oracle_all(a, b, sp)
        assert mhd(a, b, "percentile95", sp) == pytest.approx(h95, abs=1e-12)
        assert mhd(a, b, "dubuisson_jain", sp) == pytest.approx(hdj, rel=1e-12, abs=1e-12)
        assert asd(a, b, sp) == pytest.approx(s, rel=1e-12, abs=1e-12)


masks = st.integers(0, 2 ** 30).map(lambda s: (random_blob(Rng(s), (7, 6, 8), 0.5),
                                              random_blob(Rng(s, "b"), (7, 6, 8), 0.5)))
spacings = st.tuples(*[st.sampled_from([0.5, 1.0, 1.5, 3.0])] * 3)


@given(masks, spacings)
def test_symmetry(ab, sp):
    a, b = ab
    for mode in metrics.MHD_MODES:
        assert mhd(a, b, mode, sp) == mhd(b, a, mode, sp)
    assert asd(a, b, sp) == pytest.approx(asd(b, a, sp), rel=1e-12)
    assert dice(a, b) == dice(b, a)


@given(masks, st.integers(1, 3), st.integers(0, 2))
def test_translation_invariance(ab, k, axis):
    a, b = ab
    pad = [(3, 3)] * 3
    A, B = np.pad(a, pad), np.pad(b, pad)
    As, Bs = np.roll(A, k, axis), np.roll(B, k, axis)
    assert mhd(A, B) == mhd(As, Bs)
    assert asd(A, B) == pytest.approx(asd(As, Bs), rel=1e-12)
    assert dice(A, B) == dice(As, Bs)


@given(masks, st.sampled_from([0.5, 2.0, 3.0]))
def test_spacing_linearity(ab, c):
    a, b = ab
    sp = (1.0, 1.5, 0.5)
    sc = tuple(c * s for s in sp)
    assert mhd(a, b, spacing=sc) == pytest.approx(c * mhd(a, b, spacing=sp), rel=1e-12)
    assert asd(a, b, spacing=sc) == pytest.approx(c * asd(a, b, spacing=sp), rel=1e-12)


@given(masks)
def test_bounds(ab):
    a, b = ab
    assert 0.0 <= dice(a, b) <= 1.0
    dab, dba = both_directed(a, b)
    assert mhd(a, b) <= max(dab.max(), dba.max())
    assert asd(a, b) <= max(dab.max(), dba.max())


def test_empty_surface():
    a = np.zeros((5, 5, 5), bool)
    b = a.copy()
    b[2, 2, 2] = True
    with pytest.raises(EmptySurface):
        mhd(a, b)
    with pytest.raises(ValueError):
        mhd(b, b, mode="max")


def test_evaluate_report():
    ref = np.zeros((10, 10, 10), np.uint8)
    ref[1:9, 1:9, 1:9] = 1
    ref[2:8, 2:8, 2:8] = 2
    ref[4:6, 4:6, 4:6] = 3
    rep = evaluate(ref, ref, subject="s")
    assert [m.dc for m in rep.classes.values()] == [1.0, 1.0, 1.0]
    assert all(m.mhd == 0.0 and m.asd == 0.0 for m in rep.classes.values())
    assert rep.mean_dc() == 1.0
    pred = ref.copy()
    pred[pred == 3] = 2
    rep = evaluate(pred, ref, subject="s", mode="dubuisson_jain")
    wm = rep.classes["WM"]
    assert wm.dc == 0.0 and not wm.defined and math.isnan(wm.mhd)
    assert len(rep.rows(all_variants=True)) == 6
    assert rep.rows()[0][5] == "dubuisson_jain"
    assert rep.config_hash != evaluate(pred, ref).config_hash
    txt = format_table([rep], all_variants=True)
    assert "undef" in txt and "s" in txt
    with pytest.raises(DimMismatch):
        evaluate(pred, ref[:-1])
