import os
import subprocess
import sys

import numpy as np
import pytest

from trnet import kernels
from trnet.kernels import _pykernels as py

try:
    from trnet.kernels import _ckernels as cy
except ImportError:  # extension not built
    cy = None

needs_ext = pytest.mark.skipif(cy is None, reason="compiled kernels not built")


def test_backend_reported():
    assert kernels.BACKEND in ("cython", "python")


def test_env_var_forces_python_backend():
    out = subprocess.run(
        [sys.executable, "-c", "import trnet.kernels as k; print(k.BACKEND)"],
        env={**os.environ, "TRNET_KERNELS": "python"}, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def _conv_ref(x, w):
    # direct nested-loop 3x3x3 same convolution for one sample
    C, S = x.shape[0], x.shape[1]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))
    out = np.zeros((w.shape[0], S, S, S))
    for f in range(w.shape[0]):
        for z in range(S):
            for y in range(S):
                for q in range(S):
                    out[f, z, y, q] = np.sum(xp[:, z:z + 3, y:y + 3, q:q + 3] * w[f])
    return out


@pytest.mark.parametrize("impl", [py, pytest.param(cy, marks=needs_ext)])
def test_im2col_matches_direct_convolution(impl, rng):
    x = rng.normal(size=(2, 3, 5, 5, 5))
    w = rng.normal(size=(4, 3, 3, 3, 3))
    cols = impl.im2col3d(np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1))))
    y = np.matmul(w.reshape(4, -1), cols).reshape(2, 4, 5, 5, 5)
    for i in range(2):
        np.testing.assert_allclose(y[i], _conv_ref(x[i], w), atol=1e-12)


@pytest.mark.parametrize("impl", [py, pytest.param(cy, marks=needs_ext)])
def test_col2im_is_adjoint_of_im2col(impl, rng):
    # <im2col(x), c> == <x, col2im(c)> on the unpadded interior
    x = rng.normal(size=(2, 2, 6, 6, 6))
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    c = rng.normal(size=(2, 2 * 27, 6 ** 3))
    lhs = np.sum(impl.im2col3d(xp) * c)
    rhs = np.sum(x * impl.col2im3d(c, 6))
    assert lhs == pytest.approx(rhs, rel=1e-12)


@pytest.mark.parametrize("impl", [py, pytest.param(cy, marks=needs_ext)])
@pytest.mark.parametrize("S", [2, 5, 7, 8])
def test_maxpool_floor_division(impl, S, rng):
    x = rng.normal(size=(1, 2, S, S, S))
    y, _ = impl.maxpool3d_forward(x)
    h = S // 2
    assert y.shape == (1, 2, h, h, h)
    for c in range(2):
        for a in range(h):
            for b in range(h):
                for d in range(h):
                    assert y[0, c, a, b, d] == x[0, c, 2 * a:2 * a + 2, 2 * b:2 * b + 2, 2 * d:2 * d + 2].max()


@pytest.mark.parametrize("impl", [py, pytest.param(cy, marks=needs_ext)])
def test_maxpool_backward_routes_to_argmax(impl, rng):
    x = rng.normal(size=(1, 1, 5, 5, 5))
    y, arg = impl.maxpool3d_forward(x)
    dx = impl.maxpool3d_backward(np.ones_like(y), arg, 5)
    assert dx.sum() == y.size
    assert np.all(x[dx == 1] == np.sort(y.ravel())[np.argsort(np.argsort(x[dx == 1]))])
    assert np.all(dx[:, :, 4] == 0)  # trailing slab discarded


@needs_ext
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_backends_agree(dtype, rng):
    x = rng.normal(size=(3, 4, 9, 9, 9)).astype(dtype)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    np.testing.assert_array_equal(cy.im2col3d(xp), py.im2col3d(xp))
    c = rng.normal(size=(3, 4 * 27, 9 ** 3)).astype(dtype)
    np.testing.assert_allclose(cy.col2im3d(c, 9), py.col2im3d(c, 9), rtol=1e-5 if dtype == np.float32 else 1e-12)
    y1, a1 = cy.maxpool3d_forward(x)
    y2, a2 = py.maxpool3d_forward(x)
    np.testing.assert_array_equal(y1, y2)
    np.testing.assert_array_equal(a1, a2)
    dy = rng.normal(size=y1.shape).astype(dtype)
    np.testing.assert_array_equal(cy.maxpool3d_backward(dy, a1, 9), py.maxpool3d_backward(dy, a2, 9))
    cube = rng.normal(size=(5, 11, 11)).astype(dtype)
    for angle in (0.0, 0.4, np.pi / 2, 2.5):
        np.testing.assert_allclose(cy.rotate_slices(cube, angle), py.rotate_slices(cube, angle), atol=1e-12)


@needs_ext
def test_maxpool_ties_resolve_identically():
    x = np.zeros((1, 1, 4, 4, 4))
    _, a1 = cy.maxpool3d_forward(x)
    _, a2 = py.maxpool3d_forward(x)
    np.testing.assert_array_equal(a1, a2)
    assert np.all(a1 == 0)


def test_benchmark_script_runs(capsys):
    import importlib.util
    from pathlib import Path

    path = Path(__file__).resolve().parents[1] / "benchmarks" / "bench_kernels.py"
    spec = importlib.util.spec_from_file_location("bench_kernels", path)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    mod.main(["--cubes", "1", "--repeat", "1"])
    out = capsys.readouterr().out
    assert "cnn forward+backward" in out
    assert kernels.im2col3d is (cy.im2col3d if kernels.BACKEND == "cython" else py.im2col3d)
