import numpy as np
import pytest

from uapic.fields import make_field
from uapic.limitmodel import averaged_by_quadrature, eval_averaged, integrate_limit
from uapic.rotation import PreconditionError


def test_uniform_field_examples():
    fs = make_field("screwpinch:alpha=0")
    dx, dv = eval_averaged(np.zeros(3), np.array([0.0, 0.0, 2.0]), np.zeros(3), fs)
    assert np.allclose(dx, [0, 0, 2]) and np.allclose(dv, 0)
    dx, dv = eval_averaged(np.zeros(3), np.array([0.3, -1.0, 0.5]), np.array([1.0, 0, 0]), fs)
    assert np.allclose(dv, 0)


@pytest.mark.parametrize("name,count", [("example1", 100), ("screwpinch:alpha=0.8", 100)])
def test_matches_quadrature_oracle(name, count):
    fs = make_field(name)
    rng = np.random.default_rng(11)
    for _ in range(count):
        x, v, E = rng.normal(size=(3, 3)) * [[2.0], [1.0], [1.0]]
        dx, dv = eval_averaged(x, v, E, fs)
        qx, qv = averaged_by_quadrature(x, v, E, fs, n_tau=512)
        assert np.allclose(dx, qx, atol=1e-8)
        assert np.allclose(dv, qv, atol=1e-8)


def test_batched_equals_pointwise(ex1):
    rng = np.random.default_rng(3)
    X, V, E = rng.normal(size=(3, 7, 3))
    dX, dV = eval_averaged(X, V, E, ex1)
    for k in range(7):
        dx, dv = eval_averaged(X[k], V[k], E[k], ex1)
        assert np.allclose(dX[k], dx) and np.allclose(dV[k], dv)


def test_rejects_varying_intensity(ex2):
    with pytest.raises(PreconditionError):
        eval_averaged(np.zeros(3), np.ones(3), np.zeros(3), ex2)


def test_integrate_limit_straight_line():
    fs = make_field("uniform")
    x, v = integrate_limit(np.array([1.0, 2.0, 3.0]), np.array([0.0, 0.0, 1.0]), fs, 2.5, 0.1)
    assert np.allclose(x, [1.0, 2.0, 5.5]) and np.allclose(v, [0, 0, 1])
    x, v = integrate_limit(np.zeros(3), np.ones(3), fs, 0.0, 0.1)
    assert np.allclose(x, 0) and np.allclose(v, 1)


def test_integrate_limit_fourth_order(ex1, x0, v0):
    ref = integrate_limit(x0, v0, ex1, 1.0, 1e-3)
    e = [np.linalg.norm(integrate_limit(x0, v0, ex1, 1.0, h)[0] - ref[0]) for h in (0.1, 0.05)]
    assert 12 < e[0] / e[1] < 20
