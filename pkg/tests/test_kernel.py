import numpy as np
import pytest

from hslv.kernel import (LANE_W, LANE_W_TILDE, BrownianGrid, MemoryBudgetError, RandomStream, coarsen,
                         make_brownian_grid, normals_block, philox4x32, sample_noncentral_chisq,
                         sample_standard_normal)


def _words(*vals):
    return tuple(np.uint64(v) for v in vals)


@pytest.mark.parametrize("ctr,key,expected", [
    ((0, 0, 0, 0), (0, 0), (0x6627E8D5, 0xE169C58D, 0xBC57AC4C, 0x9B00DBD8)),
    ((0xFFFFFFFF,) * 4, (0xFFFFFFFF,) * 2, (0x408F276D, 0x41C83B0E, 0xA20BC7C6, 0x6D5451FD)),
    ((0x243F6A88, 0x85A308D3, 0x13198A2E, 0x03707344), (0xA4093822, 0x299F31D0),
     (0xD16CFE09, 0x94FDCCEB, 0x5001E420, 0x24126EA1)),
])
def test_philox_known_answers(ctr, key, expected):
    out = philox4x32(_words(*ctr), _words(*key))
    assert tuple(int(w) for w in out) == expected


def test_normal_moments():
    z = normals_block(RandomStream(7, np.arange(1000)), LANE_W, 0, 1000).ravel()
    assert abs(z.mean()) < 4e-3
    assert abs(z.var() - 1) < 1e-2


def test_same_counter_same_value():
    a = RandomStream(3, 11, 5)
    b = RandomStream(3, 11, 5)
    assert sample_standard_normal(a) == sample_standard_normal(b)
    assert a.counter == b.counter == 6


def test_stream_unaffected_by_other_streams():
    alone = RandomStream(9, np.array([42], dtype=np.uint64))
    crowd = RandomStream(9, np.arange(100, dtype=np.uint64))
    x = [sample_standard_normal(alone)[0] for _ in range(5)]
    y = [sample_standard_normal(crowd)[42] for _ in range(5)]
    assert x == y


def test_distinct_streams_uncorrelated():
    z = normals_block(RandomStream(1, np.array([0, 1], dtype=np.uint64)), LANE_W, 0, 100_000)
    assert abs(np.corrcoef(z[:, 0], z[:, 1])[0, 1]) < 1.5e-2


def test_seed_changes_values():
    a = normals_block(RandomStream(1, np.arange(4)), LANE_W, 0, 3)
    b = normals_block(RandomStream(2, np.arange(4)), LANE_W, 0, 3)
    assert not np.array_equal(a, b)


def test_block_matches_sequential_draws():
    s = RandomStream(5, np.arange(3, dtype=np.uint64)).at(LANE_W_TILDE, 0)
    seq = np.array([sample_standard_normal(s) for _ in range(4)])
    blk = normals_block(RandomStream(5, np.arange(3, dtype=np.uint64)), LANE_W_TILDE, 0, 4)
    np.testing.assert_array_equal(seq, blk)


def test_central_chisq_mean():
    s = RandomStream(2, np.arange(100_000, dtype=np.uint64))
    x = sample_noncentral_chisq(s, 3.0, 0.0)
    assert abs(x.mean() - 3) < 0.05


def test_noncentral_chisq_moments():
    s = RandomStream(4, np.arange(100_000, dtype=np.uint64))
    x = sample_noncentral_chisq(s, 1.2, 2.0)
    assert abs(x.mean() - 3.2) < 0.06
    assert abs(x.var(ddof=1) / 10.4 - 1) < 0.03
    assert np.all(x >= 0)


@pytest.mark.parametrize("dof,lam", [(0.0, 1.0), (-1.0, 1.0), (1.0, -0.5)])
def test_noncentral_chisq_rejects_bad_parameters(dof, lam):
    with pytest.raises(ValueError):
        sample_noncentral_chisq(RandomStream(0, 0), dof, lam)


def test_grid_increment_variance():
    g = make_brownian_grid(RandomStream(8, 0), 5.0, 5, 100_000)
    assert g.dW.shape == (5, 100_000) and g.tau == 1.0
    assert abs(g.dW.var() - 1) < 0.02
    assert abs(np.corrcoef(g.dW.ravel(), g.dW_tilde.ravel())[0, 1]) < 1.5e-2


def test_grid_paths_independent_of_batch():
    full = make_brownian_grid(RandomStream(8, 0), 1.0, 4, 10)
    part = make_brownian_grid(RandomStream(8, 6), 1.0, 4, 4)
    np.testing.assert_array_equal(full.dW[:, 6:], part.dW)


def test_coarsen_definition():
    dW = np.array([[1.0], [2.0], [3.0], [4.0]])
    g = BrownianGrid(1.0, dW, dW.copy())
    c = coarsen(g)
    np.testing.assert_array_equal(c.dW.ravel(), [3.0, 7.0])
    assert c.level == -1 and c.tau == 0.5


def test_coarsen_associative_and_exact():
    g = make_brownian_grid(RandomStream(3, 0), 1.0, 8, 50)
    twice = coarsen(coarsen(g))
    direct = g.dW.reshape(4, 2, 50).sum(axis=1).reshape(2, 2, 50).sum(axis=1)
    np.testing.assert_array_equal(twice.dW, direct)
    np.testing.assert_array_equal(coarsen(g).dW, g.dW[0::2] + g.dW[1::2])


def test_coarsened_variance_doubles():
    g = make_brownian_grid(RandomStream(3, 0), 1.0, 2, 100_000)
    assert abs(coarsen(g).dW.var() / (2 * g.tau) - 1) < 0.02


def test_coarsen_rejects_odd():
    g = make_brownian_grid(RandomStream(0, 0), 1.0, 3, 2)
    with pytest.raises(ValueError):
        coarsen(g)


def test_grid_budget():
    with pytest.raises(MemoryBudgetError):
        make_brownian_grid(RandomStream(0, 0), 1.0, 1000, 1000, budget=10_000)
    with pytest.raises(ValueError):
        make_brownian_grid(RandomStream(0, 0), 0.0, 4, 4)
