"""Tape engine checks: every primitive against central finite differences,
second-order compositions, determinism, and Cholesky failure behavior."""

import zlib

import numpy as np
import pytest

from smmfit import diffcore as dc


FD_STEP = 1e-6
FD_RTOL = 1e-5


def fd_grad(f, x, h=FD_STEP):
    """Central-difference gradient of a plain-array scalar function."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros(x.size)
    for i in range(x.size):
        e = np.zeros(x.size)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2.0 * h)
    return g


def assert_close(a, b, rtol, atol=1e-10):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    scale = np.maximum(np.abs(b), 1.0)
    assert np.all(np.abs(a - b) <= rtol * scale + atol), (
        f"max abs err {np.abs(a - b).max():.3e} vs {a} {b}")


# -- grad: worked examples ----------------------------------------------------

def test_grad_square():
    g = dc.grad(lambda x: dc.mul(x, x), [3.0])
    assert g.shape == (1,)
    assert abs(g[0] - 6.0) < 1e-12


def test_grad_constant():
    g = dc.grad(lambda x: x.tape.constant(4.2), [1.0, 2.0, 3.0])
    assert np.all(g == 0.0)


def test_grad_logdet_identity():
    # d logdet / dX at X = I is I itself; FD probes go through a
    # symmetrizer so single-entry perturbations stay in the PD cone
    def f(x):
        X = dc.reshape(x, (2, 2))
        return dc.logdet_pd(dc.scale(dc.add(X, dc.transpose(X)), 0.5))

    x0 = np.eye(2).ravel()
    g = dc.grad(f, x0)
    assert_close(g, np.eye(2).ravel(), 1e-12)
    assert_close(g, fd_grad(lambda x: run_scalar(f, x), x0), FD_RTOL)


def test_grad_rejects_nonscalar():
    with pytest.raises(dc.NonScalarOutputError):
        dc.grad(lambda x: x, [1.0, 2.0])


def run_scalar(build, x):
    """Evaluate a tape-scalar function at a plain numpy point."""
    tape = dc.Tape()
    xt = tape.input(np.asarray(x, dtype=np.float64).reshape(1, -1))
    return build(xt).item()


# -- grad: one finite-difference sweep per primitive --------------------------

def _spd_from(x, n):
    # map 1 x n^2 tensor to a positive definite matrix B Bᵀ + I
    B = dc.reshape(x, (n, n))
    return dc.add(dc.matmul(B, dc.transpose(B)), x.tape.constant(np.eye(n)))


PRIMITIVE_CASES = {
    "add": (4, lambda x: dc.sumsq(dc.add(dc.cols(x, 0, 2), dc.cols(x, 2, 4)))),
    "add_broadcast_row": (6, lambda x: dc.sumsq(dc.add(
        dc.reshape(dc.cols(x, 0, 4), (2, 2)), dc.cols(x, 4, 6)))),
    "mul": (4, lambda x: dc.sumsq(dc.mul(dc.cols(x, 0, 2), dc.cols(x, 2, 4)))),
    "mul_broadcast_scalar": (5, lambda x: dc.sumsq(dc.mul(
        dc.cols(x, 0, 4), dc.cols(x, 4, 5)))),
    "mul_broadcast_col": (6, lambda x: dc.sumsq(dc.mul(
        dc.reshape(dc.cols(x, 0, 4), (2, 2)),
        dc.transpose(dc.cols(x, 4, 6))))),
    "neg": (3, lambda x: dc.sumsq(dc.neg(x))),
    "scale": (3, lambda x: dc.sumsq(dc.scale(x, -1.7))),
    "shift": (3, lambda x: dc.sumsq(dc.shift(x, 0.9))),
    "matmul": (12, lambda x: dc.sumsq(dc.matmul(
        dc.reshape(dc.cols(x, 0, 6), (2, 3)),
        dc.reshape(dc.cols(x, 6, 12), (3, 2))))),
    "transpose": (6, lambda x: dc.sumsq(dc.transpose(dc.reshape(x, (2, 3))))),
    "reshape": (6, lambda x: dc.sumsq(dc.reshape(x, (3, 2)))),
    "tanh": (4, lambda x: dc.sum_all(dc.tanh(x))),
    "exp": (4, lambda x: dc.sum_all(dc.exp(x))),
    "softplus": (4, lambda x: dc.sum_all(dc.softplus(x))),
    "sigmoid": (4, lambda x: dc.sum_all(dc.sigmoid(x))),
    "sin": (4, lambda x: dc.sum_all(dc.sin(x))),
    "cos": (4, lambda x: dc.sum_all(dc.cos(x))),
    "sum_rows": (6, lambda x: dc.sumsq(dc.sum_rows(dc.reshape(x, (3, 2))))),
    "sum_cols": (6, lambda x: dc.sumsq(dc.sum_cols(dc.reshape(x, (2, 3))))),
    "sumsq": (5, lambda x: dc.sumsq(x)),
    "rows_pad": (6, lambda x: dc.sumsq(dc.rows(dc.reshape(x, (3, 2)), 1, 3))),
    "cols_pad": (6, lambda x: dc.sumsq(dc.cols(dc.reshape(x, (2, 3)), 0, 2))),
    "concat_rows": (6, lambda x: dc.sumsq(dc.concat_rows(
        [dc.reshape(dc.cols(x, 0, 4), (2, 2)),
         dc.reshape(dc.cols(x, 4, 6), (1, 2))]))),
    "logdet_pd": (4, lambda x: dc.logdet_pd(_spd_from(x, 2))),
    "inverse_pd": (4, lambda x: dc.sumsq(dc.inverse_pd(_spd_from(x, 2)))),
    "solve_pd": (6, lambda x: dc.sumsq(dc.solve_pd(
        _spd_from(dc.cols(x, 0, 4), 2),
        dc.transpose(dc.cols(x, 4, 6))))),
}

POSITIVE_CASES = {
    "log": (4, lambda x: dc.sum_all(dc.log(x))),
    "sqrt": (4, lambda x: dc.sum_all(dc.sqrt(x))),
    "reciprocal": (4, lambda x: dc.sumsq(dc.reciprocal(x))),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_grad_matches_fd(name):
    n, build = PRIMITIVE_CASES[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(5):
        x0 = rng.uniform(-2.0, 2.0, size=n)
        assert_close(dc.grad(build, x0),
                     fd_grad(lambda x: run_scalar(build, x), x0), FD_RTOL)


@pytest.mark.parametrize("name", sorted(POSITIVE_CASES))
def test_positive_primitive_grad_matches_fd(name):
    n, build = POSITIVE_CASES[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(5):
        x0 = rng.uniform(0.1, 2.0, size=n)
        assert_close(dc.grad(build, x0),
                     fd_grad(lambda x: run_scalar(build, x), x0), FD_RTOL)


def test_grad_deep_composite_matches_fd():
    # several layers of mixed primitives in one graph
    def f(x):
        a = dc.tanh(dc.reshape(x, (2, 3)))
        b = dc.matmul(a, dc.transpose(a))
        c = dc.softplus(dc.add(b, x.tape.constant(np.eye(2))))
        return dc.add(dc.logdet_pd(dc.add(c, x.tape.constant(2 * np.eye(2)))),
                      dc.sumsq(dc.sin(a)))

    rng = np.random.default_rng(7)
    for _ in range(5):
        x0 = rng.uniform(-2.0, 2.0, size=6)
        assert_close(dc.grad(f, x0),
                     fd_grad(lambda x: run_scalar(f, x), x0), FD_RTOL)


# -- jacobian -----------------------------------------------------------------

def test_jacobian_linear_map():
    A = np.array([[1.0, 2.0], [3.0, 4.0]])

    def f(x):
        return dc.matmul(x, dc.transpose(x.tape.constant(A)))

    J = dc.jacobian(f, [0.3, -0.7])
    assert_close(J, A, 1e-12)


def test_jacobian_identity():
    J = dc.jacobian(lambda x: x, [1.0, 2.0, 3.0])
    assert_close(J, np.eye(3), 1e-12)


def test_jacobian_matches_fd_rows():
    def f(x):
        return dc.concat_cols([dc.sumsq(dc.sin(x)), dc.sum_all(dc.mul(x, x))])

    rng = np.random.default_rng(11)
    x0 = rng.uniform(-2.0, 2.0, size=4)
    J = dc.jacobian(f, x0)
    for i in range(2):
        def fi(x, i=i):
            tape = dc.Tape()
            xt = tape.input(x.reshape(1, -1))
            return f(xt).value[0, i]
        assert_close(J[i], fd_grad(fi, x0), FD_RTOL)


# -- grad2: derivatives through inner input-gradients -------------------------

def test_grad2_bilinear():
    # inner: d/dx (theta x^2) = 2 theta x; outer d/dtheta at x=3 is 6
    def f(theta):
        tape = theta.tape
        x = tape.input([[3.0]])
        y = dc.mul(theta, dc.mul(x, x))
        (gx,) = tape.gradients(y, [x])
        return gx

    g = dc.grad2(f, [0.5])
    assert abs(g[0] - 6.0) < 1e-12


def test_grad2_theta_independent():
    def f(theta):
        tape = theta.tape
        x = tape.input([[1.0, 2.0]])
        (gx,) = tape.gradients(dc.sumsq(x), [x])
        return dc.sum_all(gx)

    g = dc.grad2(f, [0.3, 0.4])
    assert np.all(g == 0.0)


def test_grad2_composite_matches_fd():
    # theta parameterizes a map whose input-gradient enters the loss
    x_fixed = np.array([[0.4, -1.1]])

    def f(theta):
        tape = theta.tape
        x = tape.input(x_fixed)
        w = dc.reshape(dc.cols(theta, 0, 4), (2, 2))
        y = dc.sum_all(dc.tanh(dc.matmul(x, w)))
        (gx,) = tape.gradients(y, [x])
        # scalar in nabla_x y, nonlinear in theta
        return dc.add(dc.sumsq(gx), dc.mul(dc.cols(theta, 4, 5),
                                           dc.sum_all(gx)))

    rng = np.random.default_rng(23)
    for _ in range(5):
        t0 = rng.uniform(-2.0, 2.0, size=5)
        assert_close(dc.grad2(f, t0),
                     fd_grad(lambda t: run_scalar(f, t), t0), 1e-4)


def test_gradients_unused_leaf_is_zero():
    tape = dc.Tape()
    a = tape.input([[1.0, 2.0]])
    b = tape.input([[3.0]])
    (ga, gb) = tape.gradients(dc.sumsq(a), [a, b])
    assert_close(ga.value, [2.0, 4.0], 1e-12)
    assert np.all(gb.value == 0.0)


def test_gradients_sum_trick_gives_per_row():
    # summing a per-row scalar over the batch yields row-wise input gradients
    tape = dc.Tape()
    X = tape.input([[1.0, 2.0], [0.5, -1.0], [3.0, 0.0]])
    y = dc.sum_all(dc.mul(X, X))
    (gX,) = tape.gradients(y, [X])
    assert_close(gX.value, 2.0 * X.value, 1e-12)


# -- cholesky_logdet ----------------------------------------------------------

def test_logdet_diag():
    assert abs(dc.cholesky_logdet(np.diag([2.0, 3.0])) - np.log(6.0)) < 1e-12


def test_logdet_identity():
    for n in (1, 2, 3, 5):
        assert abs(dc.cholesky_logdet(np.eye(n))) < 1e-12


def test_logdet_2x2_by_hand():
    # det [[2,1],[1,2]] = 3
    a = np.array([[2.0, 1.0], [1.0, 2.0]])
    assert abs(dc.cholesky_logdet(a) - np.log(3.0)) < 1e-12


def test_logdet_requires_symmetry():
    with pytest.raises(ValueError):
        dc.cholesky_logdet(np.array([[1.0, 2.0], [0.0, 1.0]]))


def test_pd_failure_matches_eigenvalue_oracle():
    rng = np.random.default_rng(101)
    for n in (2, 3):
        for _ in range(200):
            B = rng.uniform(-2.0, 2.0, size=(n, n))
            A = 0.5 * (B + B.T)
            lo = np.linalg.eigvalsh(A)[0]
            if abs(lo) < 1e-10:
                continue
            if lo > 0:
                dc.cholesky_logdet(A)
            else:
                with pytest.raises(dc.NotPositiveDefiniteError):
                    dc.cholesky_logdet(A)


def test_pd_failure_pivot_index():
    with pytest.raises(dc.NotPositiveDefiniteError) as e:
        dc.cholesky_logdet(np.diag([-1.0, 5.0]))
    assert e.value.pivot == 0
    with pytest.raises(dc.NotPositiveDefiniteError) as e:
        # leading 1x1 minor fine, second pivot 1 - 4 = -3
        dc.cholesky_logdet(np.array([[1.0, 2.0], [2.0, 1.0]]))
    assert e.value.pivot == 1
    assert e.value.value < 0.0


# -- determinism and error machinery ------------------------------------------

def _grad_bits(seed):
    rng = np.random.default_rng(seed)
    x0 = rng.uniform(-2.0, 2.0, size=6)

    def f(x):
        a = dc.tanh(dc.reshape(x, (2, 3)))
        return dc.add(dc.sumsq(dc.matmul(a, dc.transpose(a))),
                      dc.sum_all(dc.softplus(x)))

    return dc.grad(f, x0).tobytes()


def test_backward_bitwise_deterministic():
    assert _grad_bits(5) == _grad_bits(5)


def test_non_differentiable_primitive_error():
    tape = dc.Tape()
    x = tape.input([[1.0]])
    # a node recorded without a derivative rule must fail loudly, not silently
    y = tape._append(x.value * 3.0, (x,), "opaque", True)
    with pytest.raises(dc.NonDifferentiablePrimitiveError):
        tape.gradients(y, [x])


def test_shape_mismatch_rejected():
    tape = dc.Tape()
    a = tape.input(np.zeros((2, 3)))
    b = tape.input(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        dc.add(a, b)
    with pytest.raises(ValueError):
        dc.matmul(a, a)
