import numpy as np
import pytest

from hd3d.errors import SpecMismatch
from hd3d.infer import plan_tiles, segment, standardize
from hd3d.netbuild import build, standard_spec
from hd3d.phantom import PhantomConfig, generate
from hd3d.volio import Subject


@pytest.mark.parametrize("dims,n", [((17, 17, 17), 1), ((34, 34, 34), 8), ((64, 64, 64), 64),
                                    ((5, 17, 18), 2), ((1, 1, 1), 1)])
def test_plan_counts_and_coverage(dims, n):
    plan = plan_tiles(dims)
    assert len(plan.tiles) == n
    assert np.all(plan.coverage() == 1)
    assert plan.window == 35


def test_plan_last_tile_shifted_inward():
    plan = plan_tiles((20, 17, 17))
    a, b = plan.tiles
    assert a.in_origin[0] == 0 and a.extent[0] == 17
    # second core computed over [3, 20), only its last 3 rows written
    assert b.in_origin[0] == 3 and b.out_origin[0] == 17 and b.extent[0] == 3
    assert b.offset[0] == 14


def test_plan_padding_fits_windows():
    for dims in [(5, 17, 40), (64, 30, 18)]:
        plan = plan_tiles(dims)
        padded = [d + lo + hi for d, (lo, hi) in zip(dims, plan.padding)]
        for t in plan.tiles:
            assert all(o + plan.window <= p for o, p in zip(t.in_origin, padded))


@pytest.fixture(scope="module")
def subject():
    return generate(PhantomConfig(dims=(20, 19, 18), seed=2, semi_axes=(0.36, 0.36, 0.36)), "t")


@pytest.fixture(scope="module")
def nets():
    return {a: build(standard_spec(a, width=0.1), seed=1) for a in ("hyperdense", "baseline")}


def test_standardize(subject):
    x = standardize(subject)
    assert x.shape == (2,) + subject.dims and x.dtype == np.float32
    m = subject.mask
    for c in x:
        assert abs(c[m].mean()) < 1e-5 and abs(c[m].std() - 1) < 1e-4
        assert np.all(c[~m] == 0)


@pytest.mark.parametrize("arch", ["hyperdense", "baseline"])
def test_tiling_equivalence(nets, subject, arch):
    """Tiled output equals one window covering the whole volume."""
    net = nets[arch]
    dims = subject.dims
    big = max(dims)
    lab_one, p_one = segment(net, subject, core=big)
    lab_t, p_t = segment(net, subject, core=9)
    assert len(plan_tiles(dims, 9).tiles) == 3 * 3 * 2
    assert np.array_equal(p_t, p_one)
    assert np.array_equal(lab_t, lab_one)


def test_probabilities_and_mask(nets, subject):
    lab, p = segment(nets["hyperdense"], subject)
    assert lab.dtype == np.uint8 and p.dtype == np.float32 and p.shape == (4,) + subject.dims
    np.testing.assert_allclose(p.sum(0), 1.0, atol=1e-5)
    out = ~subject.mask
    assert np.all(lab[out] == 0) and np.all(p[0][out] == 1.0)
    assert np.array_equal(lab[subject.mask], np.argmax(p, 0)[subject.mask])


def test_deterministic(nets, subject):
    a = segment(nets["baseline"], subject)
    b = segment(nets["baseline"], subject)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_conv_paths_agree(nets, subject):
    _, p1 = segment(nets["baseline"], subject, conv_method="lowered")
    _, p2 = segment(nets["baseline"], subject, conv_method="direct")
    np.testing.assert_allclose(p1, p2, atol=1e-5)


def test_modality_count(nets, subject):
    one = Subject("x", subject.modalities[:1], subject.label, subject.mask)
    with pytest.raises(SpecMismatch):
        segment(nets["baseline"], one)
