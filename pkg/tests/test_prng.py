import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from oracles import normal_ref, splitmix_word
from zofed import prng

keys = st.integers(0, 2**64 - 1)


@given(keys, st.integers(0, 1000))
def test_words_match_reference(key, start):
    got = prng.uint64_words(key, 3, start)
    assert [int(v) for v in got] == [splitmix_word(key, start + i) for i in range(3)]


@given(keys, st.integers(1, 9))
def test_normals_match_reference(key, count):
    np.testing.assert_allclose(prng.standard_normal(key, count), normal_ref(key, count), rtol=1e-12, atol=1e-14)


def test_random_access_consistency():
    key = prng.derive_key(1, 2, 3)
    full = prng.uint64_words(key, 100)
    assert np.array_equal(prng.uint64_words(key, 10, start=45), full[45:55])


def test_derive_key_separates_words():
    keys = {prng.derive_key(a, b) for a in range(30) for b in range(30)}
    assert len(keys) == 900
    assert prng.derive_key(1, 2) != prng.derive_key(2, 1)
    assert prng.derive_key(5) == prng.derive_key(5)


def test_uniform_range():
    u = prng.uniform(prng.derive_key(9), 10000)
    assert u.min() >= 0.0 and u.max() < 1.0


def test_normal_moments_and_ks():
    z = prng.standard_normal(prng.derive_key(42), 200_000)
    assert abs(z.mean()) < 4 / np.sqrt(z.size)
    assert z.std() == pytest.approx(1.0, rel=0.01)
    assert stats.kurtosis(z, fisher=False) == pytest.approx(3.0, abs=0.05)
    assert stats.kstest(z, "norm").pvalue > 1e-3
