import numpy as np
import pytest

from popgrad.geometry import Teacher
from popgrad.objective import gradient, hessian
from popgrad.validation import (
    SUITES,
    aligned_config,
    fd_gradient,
    fd_hessian,
    fuzz_config,
    generic_config,
    make_case,
    relative_error,
    run_case,
    run_suite,
)


@pytest.mark.parametrize("suite", sorted(SUITES))
def test_suites_pass(suite):
    res = run_suite(suite, 15, 4, 10)
    assert res.passed, res.first_failure


@pytest.mark.parametrize("suite", sorted(SUITES))
def test_cases_are_reproducible(suite):
    a = run_case(suite, 7, 4, 10)
    b = run_case(suite, 7, 4, 10)
    assert np.array_equal(a.W, b.W) and np.array_equal(a.v, b.v) and a.values == b.values


def test_suites_draw_different_cases():
    W1, _ = make_case("gradient_fd", 3, 5, 20)
    W2, _ = make_case("h_update", 3, 5, 20)
    assert W1.shape != W2.shape or not np.array_equal(W1, W2)


@pytest.mark.parametrize("gen", [generic_config, aligned_config, fuzz_config])
def test_generators_respect_bounds(gen):
    rng = np.random.default_rng(0)
    for _ in range(50):
        W, t = gen(rng, 3, 7)
        assert 1 <= W.shape[0] <= 3 and 2 <= W.shape[1] <= 7
        assert t.d == W.shape[1]
        assert np.all(np.linalg.norm(W, axis=1) > 0)


def test_aligned_configs_are_aligned():
    rng = np.random.default_rng(1)
    for _ in range(50):
        W, t = aligned_config(rng, 4, 10)
        cos = W @ t.unit / np.linalg.norm(W, axis=1)
        assert np.all(cos >= np.cos(0.05) - 1e-12)


def test_finite_differences():
    rng = np.random.default_rng(2)
    W = rng.standard_normal((2, 3))
    t = Teacher.from_vector(rng.standard_normal(3))
    assert relative_error(fd_gradient(W, t), gradient(W, t)) < 1e-7
    assert relative_error(fd_hessian(W, t), hessian(W, t)) < 1e-5


def test_relative_error_zero_reference():
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
