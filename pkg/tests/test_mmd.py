import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmfa_aae.diffcore import Tensor, finite_difference_check
from mmfa_aae.mmd import KernelSpec, grouped_mmd, mmd_squared, multi_domain_mmd, rbf_kernel
from oracles import loop_mmd


def val(t):
    return float(t.data)


def test_rbf_examples():
    assert rbf_kernel([0.3, 1.0], [0.3, 1.0], 5) == 1.0
    assert rbf_kernel([0], [1], 1) == pytest.approx(0.6065, abs=1e-4)
    assert rbf_kernel([0], [2], 1) == pytest.approx(0.1353, abs=1e-4)


def test_rbf_errors():
    with pytest.raises(ValueError, match="dimension"):
        rbf_kernel([0, 1], [0], 1)
    with pytest.raises(ValueError):
        rbf_kernel([0], [1], 0)


def test_kernel_spec_validation():
    assert KernelSpec().bandwidths == (1.0, 5.0, 10.0)
    for bad in [dict(bandwidths=()), dict(bandwidths=(1, -1)), dict(combination="max")]:
        with pytest.raises(ValueError):
            KernelSpec(**bad)
    assert KernelSpec(combination="sum").weights == (1.0, 1.0, 1.0)


def test_worked_value():
    single = KernelSpec(bandwidths=(1.0,))
    expected = 0.25 * (2 + 2 * math.exp(-0.5)) + 1 - (math.exp(-2) + math.exp(-0.5))
    got = val(mmd_squared([[0.0], [1.0]], [[2.0]], single))
    assert got == pytest.approx(expected, abs=1e-12)
    assert got == pytest.approx(1.0614, abs=1e-4)


def test_matches_double_loop_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        d = int(rng.integers(1, 5))
        a = rng.standard_normal((int(rng.integers(1, 11)), d))
        b = rng.standard_normal((int(rng.integers(1, 11)), d)) + rng.standard_normal(d)
        bws = tuple(rng.choice([1.0, 5.0, 10.0], size=int(rng.integers(1, 4)), replace=False))
        got = val(mmd_squared(a, b, KernelSpec(bandwidths=bws)))
        assert abs(got - max(loop_mmd(a, b, bws), 0.0)) <= 1e-10


@given(st.integers(0, 2**32 - 1), st.integers(1, 10), st.integers(1, 4))
@settings(max_examples=60, deadline=None)
def test_self_zero_symmetry_nonneg(seed, n, d):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n, d))
    b = rng.standard_normal((int(rng.integers(1, 11)), d)) * 2
    assert val(mmd_squared(a, a)) <= 1e-12
    assert val(mmd_squared(a, a[::-1])) <= 1e-12
    ab, ba = val(mmd_squared(a, b)), val(mmd_squared(b, a))
    assert abs(ab - ba) <= 1e-12
    assert ab >= 0.0


def test_translation_increases_discrepancy():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((8, 3))
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    values = [val(mmd_squared(a, a + s * direction)) for s in (0.5, 1.0, 2.0)]
    assert values[0] < values[1] < values[2]


def test_errors():
    with pytest.raises(ValueError, match="non-empty"):
        mmd_squared(np.zeros((0, 2)), np.zeros((3, 2)))
    with pytest.raises(ValueError, match="mismatch"):
        mmd_squared(np.zeros((2, 2)), np.zeros((3, 3)))
    with pytest.raises(ValueError, match="at least 2"):
        multi_domain_mmd([np.zeros((2, 2))])
    with pytest.raises(ValueError, match="form"):
        multi_domain_mmd([np.zeros((2, 2))] * 2, form="cube")


def test_multi_domain_examples():
    rng = np.random.default_rng(2)
    sets = [rng.standard_normal((int(rng.integers(2, 7)), 3)) + i for i in range(3)]
    assert val(multi_domain_mmd([sets[0]] * 3)) <= 1e-12
    assert val(multi_domain_mmd(sets[:2])) == pytest.approx(0.5 * val(mmd_squared(*sets[:2])), abs=1e-14)
    pairs = [(0, 1), (0, 2), (1, 2)]
    brute = (2 / 9) * sum(loop_mmd(sets[i], sets[j], (1.0, 5.0, 10.0)) for i, j in pairs)
    assert val(multi_domain_mmd(sets)) == pytest.approx(brute, abs=1e-10)
    root = (2 / 9) * sum(math.sqrt(val(mmd_squared(sets[i], sets[j]))) for i, j in pairs)
    assert val(multi_domain_mmd(sets, form="root")) == pytest.approx(root, abs=1e-12)


def test_grouped_matches_explicit_split():
    rng = np.random.default_rng(4)
    codes = rng.standard_normal((9, 2))
    doms = np.array([2, 0, 1, 0, 2, 1, 0, 1, 2])
    explicit = multi_domain_mmd([codes[doms == d] for d in range(3)])
    assert val(grouped_mmd(Tensor(codes), doms)) == pytest.approx(val(explicit), abs=1e-14)


@pytest.mark.parametrize("form", ["squared", "root"])
def test_gradients_match_finite_differences(form):
    rng = np.random.default_rng(6)
    params = {"a": rng.standard_normal((5, 3)), "b": rng.standard_normal((4, 3)) + 0.5,
              "c": rng.standard_normal((3, 3)) - 0.5}
    report = finite_difference_check(params, lambda t: multi_domain_mmd([t["a"], t["b"], t["c"]], form=form))
    assert report.passed, report.summary()
    report = finite_difference_check(params, lambda t: mmd_squared(t["a"], t["b"]))
    assert report.passed, report.summary()
