import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kvnorm.tensor import (DegenerateRowError, ShapeError, SplitMix64, l2_norm, matmul,
                           seeded_init, softmax_rows)

M64 = (1 << 64) - 1


def splitmix_scalar(seed, n):
    """Textbook sequential splitmix64, independent of the vectorised stream."""
    out, s = [], seed
    for _ in range(n):
        s = (s + 0x9E3779B97F4A7C15) & M64
        z = s
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & M64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & M64
        out.append(z ^ (z >> 31))
    return out


def test_splitmix_reference_value():
    assert int(SplitMix64(0).next_u64(1)[0]) == 0xE220A8397B1DCDAF


@pytest.mark.parametrize("seed", [0, 1, 42, 2**63 + 5])
def test_splitmix_matches_scalar_loop(seed):
    rng = SplitMix64(seed)
    got = list(rng.next_u64(3)) + list(rng.next_u64(5))
    assert [int(g) for g in got] == splitmix_scalar(seed, 8)


def test_uniform_and_normal_contract():
    raw = splitmix_scalar(7, 4)
    u = [(x >> 11) * 2.0**-53 for x in raw]
    assert np.array_equal(SplitMix64(7).uniform(4), u)
    r = math.sqrt(-2 * math.log(1 - u[0]))
    z = SplitMix64(7).normal(3)
    assert z[0] == pytest.approx(r * math.cos(2 * math.pi * u[1]), abs=1e-12)
    assert z[1] == pytest.approx(r * math.sin(2 * math.pi * u[1]), abs=1e-12)


def test_choice_without_replacement():
    picks = SplitMix64(3).choice(range(10), 10)
    assert sorted(picks) == list(range(10))
    assert SplitMix64(3).choice(range(10), 4) == SplitMix64(3).choice(range(10), 4)


class TestMatmul:
    def test_identity(self):
        b = np.arange(6, dtype=np.float32).reshape(2, 3)
        assert np.array_equal(matmul(np.eye(2, dtype=np.float32), b), b)

    def test_hand_case(self):
        a = np.array([[1, 2], [3, 4]], dtype=np.float32)
        b = np.array([[5, 6], [7, 8]], dtype=np.float32)
        assert matmul(a, b).tolist() == [[19, 22], [43, 50]]

    def test_annihilator(self):
        a = seeded_init(3, 4, seed=1, sigma=1.0)
        assert not matmul(a, np.zeros((4, 2), np.float32)).any()

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            matmul(np.zeros((2, 3), np.float32), np.zeros((2, 3), np.float32))

    def test_bit_stable(self):
        a, b = seeded_init(17, 9, seed=1, sigma=1.0), seeded_init(9, 5, seed=2, sigma=1.0)
        assert matmul(a, b).tobytes() == matmul(a, b).tobytes()

    @pytest.mark.parametrize("seed", range(5))
    def test_associativity(self, seed):
        a, b, c = (seeded_init(4, 4, seed=seed * 3 + i, sigma=1.0) for i in range(3))
        left, right = matmul(matmul(a, b), c), matmul(a, matmul(b, c))
        assert np.allclose(left, right, rtol=1e-4, atol=1e-4 * np.abs(left).max())


class TestSoftmax:
    def test_ln3(self):
        out = softmax_rows(np.array([[0.0, math.log(3)]]))
        assert np.allclose(out, [[0.25, 0.75]], atol=1e-7)

    @pytest.mark.parametrize("k", [1, 2, 7])
    def test_uniform(self, k):
        assert np.allclose(softmax_rows(np.full((1, k), 3.3)), 1.0 / k)

    @pytest.mark.parametrize("c", [-500.0, -3.0, 0.0, 80.0, 1e4])
    def test_shift_invariance(self, c):
        out = softmax_rows(np.array([[c, c + math.log(3)]]))
        assert np.allclose(out, [[0.25, 0.75]], atol=1e-6)

    def test_mask_exact_zero(self):
        mask = np.array([[True, False, True]])
        out = softmax_rows(np.array([[1.0, 50.0, 1.0]]), mask)
        assert out[0, 1] == 0.0
        assert np.allclose(out[0, [0, 2]], 0.5)

    def test_fully_masked_row(self):
        with pytest.raises(DegenerateRowError):
            softmax_rows(np.zeros((2, 2)), np.array([[True, False], [False, False]]))

    def test_rows_sum_to_one_extremes(self):
        rng = SplitMix64(11)
        m = (rng.uniform(1000 * 16).reshape(1000, 16) * 160 - 80).astype(np.float32)
        m[::7, 0] = 80.0
        m[::5, 1] = -80.0
        out = softmax_rows(m)
        assert np.all(out >= 0)
        assert np.allclose(out.sum(axis=1), 1.0, atol=1e-6)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-80, 80), min_size=1, max_size=12))
    def test_property_normalised(self, row):
        out = softmax_rows(np.array([row], dtype=np.float32))
        assert abs(float(out.sum()) - 1.0) <= 1e-6
        assert np.all(out >= 0)


class TestL2Norm:
    def test_345(self):
        assert l2_norm([3, 4]) == 5.0

    def test_zero(self):
        assert l2_norm(np.zeros(8)) == 0.0

    def test_scalar_loop_oracle(self):
        v = SplitMix64(5).normal(64)
        acc = 0.0
        for x in v:
            acc += x * x
        assert l2_norm(v) == pytest.approx(math.sqrt(acc), abs=1e-6)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=16), st.floats(-50, 50))
    def test_homogeneity(self, v, c):
        v = np.array(v)
        assert l2_norm(c * v) == pytest.approx(abs(c) * l2_norm(v), rel=1e-5, abs=1e-9)


class TestSeededInit:
    def test_zeros(self):
        assert not seeded_init(3, 5, "zeros", seed=9).any()

    def test_deterministic(self):
        assert np.array_equal(seeded_init(8, 8, seed=4), seeded_init(8, 8, seed=4))
        assert not np.array_equal(seeded_init(8, 8, seed=4), seeded_init(8, 8, seed=5))

    def test_normal_mean(self):
        m = seeded_init(100, 100, seed=123, sigma=0.02)
        assert m.dtype == np.float32
        assert abs(float(m.astype(np.float64).mean())) < 3 * 0.02 / 100

    def test_bad_sigma(self):
        with pytest.raises(ValueError):
            seeded_init(2, 2, "normal", seed=0, sigma=0.0)
