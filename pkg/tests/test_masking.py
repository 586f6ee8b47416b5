import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mask_oracle import enumerate_mask
from mclnn.masking import (BinaryMask, MaskSpec, MaskSpecError, generate_mask, linear_positions, mask_stats,
                           mask_weights, read_mask_grid, write_mask_csv, write_mask_pgm)
from mclnn.numkernel import ShapeError


def test_stride_equal_to_column_gives_all_ones():
    m = generate_mask(MaskSpec(3, 2, 3, 3)).matrix
    np.testing.assert_array_equal(m, np.ones((3, 2)))


def test_full_overlap_repeats_band_in_every_column():
    m = generate_mask(MaskSpec(8, 5, 3, 3)).matrix
    for j in range(5):
        assert np.flatnonzero(m[:, j]).tolist() == [0, 1, 2]


def test_worked_example_l6_e4_bw3_ov1():
    spec = MaskSpec(6, 4, 3, 1)
    assert spec.stride == 8
    assert linear_positions(spec).tolist() == [0, 1, 2, 8, 9, 10, 16, 17, 18]
    m = generate_mask(spec).matrix
    expected = np.zeros((6, 4))
    expected[0:3, 0] = 1
    expected[2:5, 1] = 1
    expected[4:6, 2] = 1
    expected[0, 3] = 1
    np.testing.assert_array_equal(m, expected)
    np.testing.assert_array_equal(m, np.array(enumerate_mask(6, 4, 3, 1)))


def test_bandwidth5_overlap3_shifts_by_two_rows():
    # l large enough that no band wraps within the first columns
    m = generate_mask(MaskSpec(20, 6, 5, 3)).matrix
    starts = [int(np.flatnonzero(m[:, j])[0]) for j in range(6)]
    assert np.diff(starts).tolist() == [2] * 5
    assert all(m[:, j].sum() == 5 for j in range(6))


def test_negative_overlap_truncated_bands():
    # bw=3, ov=-1 leaves a one-row gap.  With nine features, node 1 sees
    # features 1-3, node 4 the first two features and node 7 only the first.
    spec = MaskSpec(9, 8, 3, -1)
    assert spec.stride == 9 + 4
    m = generate_mask(spec).matrix
    assert np.flatnonzero(m[:, 0]).tolist() == [0, 1, 2]
    assert np.flatnonzero(m[:, 3]).tolist() == [0, 1]
    assert np.flatnonzero(m[:, 6]).tolist() == [0]
    assert min(m[:, j].sum() for j in range(8)) < 3


def test_large_mask_density():
    # 120 features, 300 nodes, bandwidth 20, overlap -5; counts from the oracle
    oracle = np.array(enumerate_mask(120, 300, 20, -5))
    stats = mask_stats(generate_mask(MaskSpec(120, 300, 20, -5)))
    assert stats["ones_total"] == int(oracle.sum()) == 4980
    assert stats["density"] == pytest.approx(4980 / 36000)


@pytest.mark.parametrize("kwargs", [
    dict(features=0, nodes=2, bandwidth=1, overlap=0),
    dict(features=3, nodes=0, bandwidth=1, overlap=0),
    dict(features=3, nodes=2, bandwidth=4, overlap=0),
    dict(features=3, nodes=2, bandwidth=0, overlap=-1),
    dict(features=5, nodes=2, bandwidth=3, overlap=4),
])
def test_invalid_specs_rejected(kwargs):
    with pytest.raises(MaskSpecError):
        MaskSpec(**kwargs)


def test_mask_weights(rng):
    W = rng.normal((6, 4))
    ones = BinaryMask(np.ones((6, 4)))
    np.testing.assert_array_equal(mask_weights(W, ones), W)
    np.testing.assert_array_equal(mask_weights(W, BinaryMask(np.zeros((6, 4)))), np.zeros((6, 4)))
    masked = mask_weights(W, generate_mask(MaskSpec(6, 4, 3, 1)))
    assert np.count_nonzero(masked) == 9
    rows, cols = np.nonzero(masked)
    assert sorted(c * 6 + r for r, c in zip(rows, cols)) == [0, 1, 2, 8, 9, 10, 16, 17, 18]
    with pytest.raises(ShapeError):
        mask_weights(W.T, ones)


def test_mask_weights_broadcasts_over_tensor(rng):
    mask = generate_mask(MaskSpec(6, 4, 3, 1))
    W = rng.normal((5, 6, 4))
    out = mask_weights(W, mask)
    for u in range(5):
        np.testing.assert_array_equal(out[u], W[u] * mask.matrix)


def test_mask_stats_cases():
    s = mask_stats(BinaryMask(np.ones((3, 2))))
    assert s["ones_total"] == 6 and s["density"] == 1.0 and s["ones_per_column"] == [3, 3]
    assert mask_stats(generate_mask(MaskSpec(6, 4, 3, 1)))["ones_total"] == 9
    assert mask_stats(BinaryMask(np.zeros((4, 4))))["density"] == 0.0


def test_mask_is_read_only_and_binary():
    m = generate_mask(MaskSpec(10, 7, 4, -2)).matrix
    assert set(np.unique(m)) <= {0.0, 1.0}
    with pytest.raises(ValueError):
        m[0, 0] = 5.0


def test_csv_and_pgm_describe_same_grid(tmp_path):
    mask = generate_mask(MaskSpec(12, 9, 4, -1))
    write_mask_csv(mask, tmp_path / "m.csv")
    write_mask_pgm(mask, tmp_path / "m.pgm")
    np.testing.assert_array_equal(read_mask_grid(tmp_path / "m.csv"), mask.matrix)
    np.testing.assert_array_equal(read_mask_grid(tmp_path / "m.pgm"), mask.matrix)
    assert (tmp_path / "m.pgm").read_text().startswith("P2\n")


mask_specs = st.integers(1, 20).flatmap(
    lambda l: st.tuples(st.just(l), st.integers(1, 20), st.integers(1, l)).flatmap(
        lambda t: st.tuples(st.just(t[0]), st.just(t[1]), st.just(t[2]), st.integers(-2 * t[0], t[2] - 1))))


@settings(max_examples=300, deadline=None)
@given(mask_specs)
def test_property_oracle_and_run_structure(params):
    l, e, bw, ov = params
    spec = MaskSpec(l, e, bw, ov)
    m = generate_mask(spec)
    assert m.matrix.tobytes() == generate_mask(spec).matrix.tobytes()
    np.testing.assert_array_equal(m.matrix, np.array(enumerate_mask(l, e, bw, ov)))

    flat = m.matrix.ravel(order="F")
    runs, cur = [], 0
    for v in flat:
        if v:
            cur += 1
        elif cur:
            runs.append(cur)
            cur = 0
    if cur:
        runs.append(cur)
    assert all(r <= bw for r in runs)
    # only the last run may be cut short by the end of the matrix, unless
    # bands touch (ov == 0 merges nothing since stride > l >= bw)
    assert all(r == bw for r in runs[:-1])
    starts = np.arange(spec.band_count) * spec.stride
    assert np.all(np.diff(starts) > 0)
    assert mask_stats(m)["ones_total"] == sum(1 for g in range(spec.band_count) for a in range(bw)
                                             if a + g * spec.stride < l * e)
