import numpy as np
import pytest

from hd3d import gradcheck


@pytest.mark.parametrize("name", [n for n in gradcheck.CHECKS if n != "hyperdense3"])
@pytest.mark.parametrize("seed", [0, 1])
def test_primitive_gradients(name, seed):
    res = gradcheck.CHECKS[name](seed=seed)
    assert res.coords >= 100
    assert res.passed, res.line()


def test_composite_hyperdense_block():
    from hd3d.netbuild import build
    res = gradcheck.check_hyperdense_block(seed=0)
    assert res.passed, res.line()
    # every parameter tensor: 100 coordinates, or all of them when smaller
    params = build(gradcheck.composite_spec(), dtype=np.float64).params
    assert set(res.per_tensor) == set(params)
    assert res.coords == sum(min(p.size, 100) for p in params.values())


def test_composite_structure():
    spec = gradcheck.composite_spec()
    assert spec.connectivity == "hyperdense" and len(spec.conv_layers) == 3
    assert spec.fully_layers[0].dropout


def test_relative_error_floor():
    assert gradcheck.rel_err(0.0, 1e-12) < 1e-6
    assert gradcheck.rel_err(1.0, 1.1) == pytest.approx(0.1 / 1.1)


def test_direct_conv_path_also_passes():
    assert gradcheck.check_conv3d(seed=3, method="direct").passed


def test_detects_a_wrong_gradient():
    from hd3d.rng import Rng
    rng = Rng(0)
    x = rng.normal(10)

    def f():
        return float(np.sum(x ** 3)), None

    res = gradcheck.check("cube", f, {"x": x}, {"x": 2.9 * x ** 2}, rng)
    assert not res.passed


def test_run_all_names():
    names = [r.name for r in gradcheck.run(["prelu", "dropout"], n_coords=10)]
    assert names == ["prelu", "dropout"]
