"""Backend parity for the hot kernels: compiled vs NumPy, plus oracles.

Each backend is deterministic on its own (fixed reduction order), but the
two backends may differ by rounding (NumPy uses pairwise summation, the
compiled loops accumulate left to right), so cross-backend checks use
tolerances while same-backend checks are bitwise.
"""

import numpy as np
import pytest
import scipy.special

import lcnmt.kernels as K

pytestmark = pytest.mark.skipif(
    "compiled" not in K.available_backends(),
    reason="compiled extension not built")

SHAPES = [(7, 33), (2, 5, 17), (1, 4)]
DTYPES = [np.float32, np.float64]


@pytest.fixture
def restore_backend():
    before = K.get_backend()
    yield
    K.set_backend(before)


def rand(shape, dtype, seed, scale=3.0):
    rng = np.random.default_rng(seed)
    return (rng.standard_normal(shape) * scale).astype(dtype)


def run_both(fn, *arrays):
    prev = K.set_backend("numpy")
    try:
        a = fn(*arrays)
        K.set_backend("compiled")
        b = fn(*arrays)
    finally:
        K.set_backend(prev)
    return a, b


def tol(dtype):
    return dict(rtol=2e-5, atol=2e-6) if dtype == np.float32 \
        else dict(rtol=1e-12, atol=1e-13)


class TestDispatch:
    def test_numpy_always_available(self):
        assert "numpy" in K.available_backends()

    def test_set_backend_roundtrip(self, restore_backend):
        prev = K.set_backend("numpy")
        assert K.get_backend() == "numpy"
        K.set_backend(prev)
        assert K.get_backend() == prev

    def test_unknown_backend_rejected(self):
        with pytest.raises(ValueError, match="unknown kernel backend"):
            K.set_backend("gpu")


@pytest.mark.parametrize("dtype", DTYPES)
@pytest.mark.parametrize("shape", SHAPES)
class TestParity:
    def test_softmax_fwd(self, shape, dtype, restore_backend):
        x = rand(shape, dtype, 0)
        a, b = run_both(K.softmax_fwd, x)
        np.testing.assert_allclose(a, b, **tol(dtype))
        assert a.dtype == b.dtype == dtype

    def test_softmax_bwd(self, shape, dtype, restore_backend):
        y = K.softmax_fwd(rand(shape, dtype, 1))
        dy = rand(shape, dtype, 2, scale=1.0)
        a, b = run_both(K.softmax_bwd, y, dy)
        np.testing.assert_allclose(a, b, **tol(dtype))

    def test_log_softmax_fwd(self, shape, dtype, restore_backend):
        x = rand(shape, dtype, 3)
        a, b = run_both(K.log_softmax_fwd, x)
        np.testing.assert_allclose(a, b, **tol(dtype))

    def test_log_softmax_bwd(self, shape, dtype, restore_backend):
        logp = K.log_softmax_fwd(rand(shape, dtype, 4))
        dy = rand(shape, dtype, 5, scale=1.0)
        a, b = run_both(K.log_softmax_bwd, logp, dy)
        np.testing.assert_allclose(a, b, **tol(dtype))

    def test_layer_norm_fwd(self, shape, dtype, restore_backend):
        x = rand(shape, dtype, 6)
        (xa, ra), (xb, rb) = run_both(lambda v: K.layer_norm_fwd(v, 1e-5), x)
        np.testing.assert_allclose(xa, xb, **tol(dtype))
        np.testing.assert_allclose(ra, rb, **tol(dtype))
        assert ra.shape == shape[:-1]

    def test_layer_norm_bwd(self, shape, dtype, restore_backend):
        xhat, rstd = K.layer_norm_fwd(rand(shape, dtype, 7), 1e-5)
        dy = rand(shape, dtype, 8, scale=1.0)
        a, b = run_both(K.layer_norm_bwd, xhat, rstd, dy)
        np.testing.assert_allclose(a, b, **tol(dtype))


@pytest.mark.parametrize("dtype", DTYPES)
class TestScatterAdd:
    def test_parity_with_repeated_ids(self, dtype, restore_backend):
        rng = np.random.default_rng(9)
        ids = rng.integers(0, 6, size=40)
        grads = rand((40, 13), dtype, 10, scale=1.0)
        outs = []
        for name in ("numpy", "compiled"):
            K.set_backend(name)
            out = np.zeros((6, 13), dtype=dtype)
            K.scatter_add_rows(out, ids, grads)
            outs.append(out)
        np.testing.assert_allclose(outs[0], outs[1], **tol(dtype))

    def test_matches_add_at_exactly_on_integers(self, dtype, restore_backend):
        # integer-valued floats accumulate exactly in any order
        rng = np.random.default_rng(11)
        ids = rng.integers(0, 5, size=64)
        grads = rng.integers(-4, 5, size=(64, 7)).astype(dtype)
        expect = np.zeros((5, 7), dtype=dtype)
        np.add.at(expect, ids, grads)
        for name in ("numpy", "compiled"):
            K.set_backend(name)
            out = np.zeros((5, 7), dtype=dtype)
            K.scatter_add_rows(out, ids, grads)
            np.testing.assert_array_equal(out, expect)

    def test_folds_leading_dims(self, dtype, restore_backend):
        ids = np.array([[0, 2], [2, 1]])
        grads = rand((2, 2, 5), dtype, 12, scale=1.0)
        for name in ("numpy", "compiled"):
            K.set_backend(name)
            out = np.zeros((3, 5), dtype=dtype)
            K.scatter_add_rows(out, ids, grads)
            np.testing.assert_allclose(
                out[2], grads[0, 1] + grads[1, 0], **tol(dtype))


class TestOracles:
    """Independent references: scipy for the softmaxes, direct formulas
    for layer norm. Checked against the compiled backend."""

    @pytest.fixture(autouse=True)
    def _compiled(self, restore_backend):
        K.set_backend("compiled")

    def test_softmax_matches_scipy(self):
        x = rand((9, 21), np.float64, 13)
        np.testing.assert_allclose(K.softmax_fwd(x),
                                   scipy.special.softmax(x, axis=-1),
                                   rtol=1e-12)

    def test_log_softmax_matches_scipy(self):
        x = rand((9, 21), np.float64, 14)
        np.testing.assert_allclose(K.log_softmax_fwd(x),
                                   scipy.special.log_softmax(x, axis=-1),
                                   rtol=1e-12, atol=1e-12)

    def test_softmax_rows_sum_to_one(self):
        y = K.softmax_fwd(rand((50, 8), np.float64, 15))
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, rtol=1e-12)

    def test_masked_entries_underflow_to_zero(self):
        x = rand((4, 6), np.float64, 16)
        x[:, 3] = -1e9
        y = K.softmax_fwd(x)
        assert (y[:, 3] == 0.0).all()

    def test_layer_norm_matches_formula(self):
        x = rand((11, 19), np.float64, 17)
        xhat, rstd = K.layer_norm_fwd(x, 1e-5)
        mu = x.mean(axis=-1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=-1)
        np.testing.assert_allclose(rstd, 1.0 / np.sqrt(var + 1e-5), rtol=1e-12)
        np.testing.assert_allclose(xhat, (x - mu) / np.sqrt(var + 1e-5)[:, None],
                                   rtol=1e-11, atol=1e-12)

    def test_softmax_bwd_matches_jacobian(self):
        x = rand((3, 7), np.float64, 18)
        y = K.softmax_fwd(x)
        dy = rand((3, 7), np.float64, 19, scale=1.0)
        for i in range(3):
            jac = np.diag(y[i]) - np.outer(y[i], y[i])
            np.testing.assert_allclose(K.softmax_bwd(y, dy)[i], jac @ dy[i],
                                       rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("name", ["numpy", "compiled"])
class TestDeterminism:
    def test_bitwise_repeatable(self, name, restore_backend):
        K.set_backend(name)
        x = rand((23, 31), np.float32, 20)
        dy = rand((23, 31), np.float32, 21, scale=1.0)
        assert np.array_equal(K.softmax_fwd(x), K.softmax_fwd(x))
        assert np.array_equal(K.log_softmax_bwd(K.log_softmax_fwd(x), dy),
                              K.log_softmax_bwd(K.log_softmax_fwd(x), dy))
        xhat, rstd = K.layer_norm_fwd(x, 1e-5)
        xhat2, rstd2 = K.layer_norm_fwd(x, 1e-5)
        assert np.array_equal(xhat, xhat2) and np.array_equal(rstd, rstd2)
