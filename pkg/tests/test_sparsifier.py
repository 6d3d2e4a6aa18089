import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from dicsopt.sparsifier import (
    CoordinateMask,
    MaskedMessage,
    apply_mask,
    compress,
    draw_mask,
    draw_mask_block,
    draw_masks,
    mask_size,
)

finite = st.floats(-1e6, 1e6, allow_nan=False)


def test_full_fraction_keeps_everything(rng):
    assert draw_mask(64, 1.0, rng) == CoordinateMask.full(64)
    assert draw_masks(3, 64, 1.0, rng) is None


def test_q0078_keeps_five_of_64(rng):
    assert mask_size(64, 0.078) == 5
    assert len(draw_mask(64, 0.078, rng)) == 5
    block = draw_mask_block((7, 2, 10), 64, 0.078, rng)
    assert block.shape == (7, 2, 10, 64)
    assert (block.sum(axis=-1) == 5).all()


@pytest.mark.parametrize("d,q,k", [(64, 0.08, 6), (64, 0.05, 4), (64, 0.25, 16), (10, 0.5, 5),
                                   (3, 0.01, 1), (100, 0.07, 7)])
def test_mask_size_ceiling(d, q, k):
    assert mask_size(d, q) == k


def test_mask_size_rejects_bad_fraction():
    for q in (0.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            mask_size(4, q)


def test_inclusion_frequency_single_draws():
    rng = np.random.default_rng(0)
    counts = np.zeros(10)
    for _ in range(100_000):
        counts[list(draw_mask(10, 0.5, rng).kept)] += 1
    assert np.all(np.abs(counts / 100_000 - 0.5) <= 0.01)


def test_inclusion_frequency_block_draws():
    block = draw_mask_block((100_000,), 10, 0.5, np.random.default_rng(1))
    assert np.all(np.abs(block.mean(axis=0) - 0.5) <= 0.01)


def test_block_draws_are_uniform_over_subsets():
    # each of the C(4,2)=6 subsets should appear with frequency 1/6
    block = draw_mask_block((60_000,), 4, 0.5, np.random.default_rng(2))
    codes = block.astype(int) @ np.array([1, 2, 4, 8])
    freq = np.bincount(codes, minlength=16)[[3, 5, 6, 9, 10, 12]] / 60_000
    assert np.all(np.abs(freq - 1 / 6) <= 0.01)


def test_apply_mask_example():
    mask = CoordinateMask(3, (0, 2))
    msg = apply_mask([3.0, -1.0, 4.0], mask, source=4)
    assert msg.source == 4
    np.testing.assert_array_equal(msg.values, [3.0, 4.0])
    np.testing.assert_array_equal(msg.dense(), [3.0, 0.0, 4.0])


def test_full_mask_is_identity():
    x = np.array([1.5, -2.0, 0.25])
    np.testing.assert_array_equal(compress(x, CoordinateMask.full(3)), x)


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        apply_mask(np.ones(4), CoordinateMask.full(3))
    with pytest.raises(ValueError):
        MaskedMessage(0, CoordinateMask(3, (0,)), np.ones(2))


def test_mask_validation():
    with pytest.raises(ValueError):
        CoordinateMask(3, (0, 0))
    with pytest.raises(ValueError):
        CoordinateMask(3, (3,))
    assert CoordinateMask(5, (4, 1)).kept == (1, 4)


@given(arrays(float, 6, elements=finite), st.sets(st.integers(0, 5)))
def test_projection_is_idempotent(x, kept):
    mask = CoordinateMask(6, tuple(kept))
    once = compress(x, mask)
    np.testing.assert_array_equal(compress(once, mask), once)


def test_error_bound_exhaustive_small_masks():
    rng = np.random.default_rng(3)
    for d in (1, 2, 3, 4):
        for r in range(d + 1):
            for kept in itertools.combinations(range(d), r):
                mask = CoordinateMask(d, kept)
                for _ in range(20):
                    x = rng.standard_normal(d)
                    if rng.random() < 0.3:
                        x[list(kept)] = 0.0
                    err = np.sum((compress(x, mask) - x) ** 2)
                    assert err <= np.sum(x ** 2)
                    kept_zero = np.all(x[list(kept)] == 0)
                    assert (err == np.sum(x ** 2)) == kept_zero


def test_bool_round_trip():
    keep = np.array([True, False, True, True])
    assert CoordinateMask.from_bool(keep).as_bool().tolist() == keep.tolist()
    assert 2 in CoordinateMask.from_bool(keep)
