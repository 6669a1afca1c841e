"""Kernel MMD: estimator oracle, symmetry, nonnegativity, witness, gradients."""
import numpy as np
import pytest

from growgan.mmd import Kernel, kernel_eval, mmd2_sample, witness_eval
from growgan.tensor import ShapeError, Tensor
from helpers import max_rel_err, numeric_grad

rng = np.random.default_rng(77)
IP = Kernel("inner_product")


def delta_mean_sq(x, y):
    """Oracle: squared euclidean distance between batch means."""
    d = x.mean(axis=0) - y.mean(axis=0)
    return float(d @ d)


def test_inner_product_values():
    assert kernel_eval(IP, [1.0, 2.0], [3.0, 4.0]) == 11.0


def test_gaussian_self_similarity_and_bounds():
    g = Kernel("gaussian", bandwidth=0.7)
    x = rng.standard_normal(5)
    assert kernel_eval(g, x, x) == pytest.approx(1.0)
    y = rng.standard_normal(5)
    assert 0.0 < kernel_eval(g, x, y) <= 1.0


def test_kernel_symmetry():
    for kernel in (IP, Kernel("gaussian", 1.3)):
        x, y = rng.standard_normal(6), rng.standard_normal(6)
        assert kernel_eval(kernel, x, y) == pytest.approx(kernel_eval(kernel, y, x), abs=0)


def test_kernel_dimension_mismatch():
    with pytest.raises(ShapeError):
        kernel_eval(IP, [1.0], [1.0, 2.0])


@pytest.mark.parametrize("kernel", [IP, Kernel("gaussian", 1.0)])
def test_gram_matrix_is_positive_semidefinite(kernel):
    pts = rng.standard_normal((10, 4))
    gram = np.array([[kernel_eval(kernel, a, b) for b in pts] for a in pts])
    eigenvalues = np.linalg.eigvalsh(gram)
    assert eigenvalues.min() >= -1e-9


def test_mmd2_identical_batches_is_zero():
    x = rng.standard_normal((12, 6))
    assert abs(mmd2_sample(x, x.copy(), IP).item()) < 1e-12


def test_mmd2_matches_mean_embedding_oracle():
    for _ in range(50):
        m, n, d = rng.integers(1, 65), rng.integers(1, 65), rng.integers(1, 33)
        x = rng.standard_normal((m, d))
        y = rng.standard_normal((n, d))
        got = mmd2_sample(x, y, IP).item()
        assert abs(got - delta_mean_sq(x, y)) < 1e-10


def test_mmd2_unit_separation():
    x = np.array([[0.0, 0.0]])
    y = np.array([[1.0, 0.0]])
    assert mmd2_sample(x, y, IP).item() == pytest.approx(1.0, abs=1e-12)


def test_mmd2_symmetry_is_exact():
    for _ in range(20):
        x = rng.standard_normal((rng.integers(1, 20), 5))
        y = rng.standard_normal((rng.integers(1, 20), 5))
        assert mmd2_sample(x, y, IP).item() == mmd2_sample(y, x, IP).item()
        g = Kernel("gaussian", 2.0)
        assert mmd2_sample(x, y, g).item() == mmd2_sample(y, x, g).item()


def test_mmd2_nonnegative_for_psd_kernels():
    for kernel in (IP, Kernel("gaussian", 0.8)):
        for _ in range(30):
            x = rng.standard_normal((rng.integers(1, 30), 4))
            y = rng.standard_normal((rng.integers(1, 30), 4))
            assert mmd2_sample(x, y, kernel).item() >= -1e-9


def test_mmd2_empty_batch_rejected():
    with pytest.raises(ShapeError):
        mmd2_sample(np.zeros((0, 3)), np.zeros((2, 3)), IP)


def test_mmd2_feature_dimension_mismatch():
    with pytest.raises(ShapeError):
        mmd2_sample(np.zeros((2, 3)), np.zeros((2, 4)), IP)


@pytest.mark.parametrize("kernel", [IP, Kernel("gaussian", 1.5)])
def test_mmd2_gradient_matches_finite_differences(kernel):
    x = Tensor(rng.standard_normal((5, 4)), requires_grad=True)
    y = Tensor(rng.standard_normal((7, 4)), requires_grad=True)
    mmd2_sample(x, y, kernel).backward()

    def f():
        return mmd2_sample(Tensor(x.data), Tensor(y.data), kernel).item()

    for t in (x, y):
        numeric, idx = numeric_grad(f, t.data, h=1e-6)
        assert max_rel_err(t.grad, numeric, idx) < 1e-6


# -- witness ---------------------------------------------------------------------


def test_witness_zero_when_batches_coincide():
    x = rng.standard_normal((6, 3))
    for point in rng.standard_normal((4, 3)):
        assert witness_eval(point, x, x.copy(), IP) == pytest.approx(0.0, abs=1e-12)


def test_witness_mean_difference_recovers_mmd2():
    for kernel in (IP, Kernel("gaussian", 1.1)):
        x = rng.standard_normal((9, 4))
        y = rng.standard_normal((13, 4))
        wx = np.mean([witness_eval(p, x, y, kernel) for p in x])
        wy = np.mean([witness_eval(p, x, y, kernel) for p in y])
        assert wx - wy == pytest.approx(mmd2_sample(x, y, kernel).item(), abs=1e-10)


def test_witness_linear_for_inner_product_kernel():
    x = np.array([[1.0]])
    y = np.array([[0.0]])
    for value in (-2.0, 0.5, 3.0):
        assert witness_eval(np.array([value]), x, y, IP) == pytest.approx(value)
