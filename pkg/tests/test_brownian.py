import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kinflow import brownian as B


def test_path_starts_at_zero():
    ens = B.generate(42, B.TimeGrid(0.0, 1.0, 1000), 1, 1)
    assert ens.values[0, 0, 0] == 0.0
    assert ens.values.shape == (1, 1, 1001)


def test_same_seed_bit_identical():
    g = B.TimeGrid(0.0, 1.0, 1000)
    a = B.generate(42, g, 2, 3)
    b = B.generate(42, g, 2, 3)
    assert a == b
    assert a.values.tobytes() == b.values.tobytes()


def test_different_seeds_differ():
    g = B.TimeGrid(0.0, 1.0, 50)
    assert B.generate(1, g, 1, 2) != B.generate(2, g, 1, 2)


def test_worker_count_does_not_change_values():
    g = B.TimeGrid(0.0, 1.0, 64)
    a = B.generate(5, g, 2, 17, workers=1)
    b = B.generate(5, g, 2, 17, workers=4)
    assert a.values.tobytes() == b.values.tobytes()


def test_chunked_generation_matches_single_ensemble():
    g = B.TimeGrid(0.0, 1.0, 32)
    full = B.generate(9, g, 2, 10)
    part = B.generate(9, g, 2, 4, first_sample=6)
    assert np.array_equal(part.values, full.values[6:])
    assert part.path(7, 1) is not None
    assert np.array_equal(part.path(7, 1), full.path(7, 1))


def test_terminal_variance():
    # N = 1e5 paths in chunks to bound memory
    g = B.TimeGrid(0.0, 1.0, 1000)
    N, chunk = 100_000, 10_000
    end = np.concatenate([B.generate(7, g, 1, chunk, first_sample=s).values[:, 0, -1]
                          for s in range(0, N, chunk)])
    var = end.var(ddof=1)
    band = 3 * np.sqrt(2 / N)
    assert 1 - band <= var <= 1 + band


def test_increment_mean_and_disjoint_correlation():
    g = B.TimeGrid(0.0, 1.0, 8)
    N = 20_000
    inc = B.generate(3, g, 1, N).increments()[:, 0, :]
    se = np.sqrt(g.dt / N)
    assert np.all(np.abs(inc.mean(axis=0)) <= 4 * se)
    r = np.corrcoef(inc[:, 0], inc[:, 5])[0, 1]
    assert abs(r) <= 4 / np.sqrt(N)


def test_refine_keeps_coarse_nodes():
    ens = B.generate(11, B.TimeGrid(0.0, 1.0, 10), 2, 3)
    fine = B.refine(ens, 2)
    assert fine.grid.steps == 20
    assert np.array_equal(fine.values[:, :, ::2], ens.values)
    fine3 = B.refine(ens, 3)
    assert np.array_equal(fine3.values[:, :, ::3], ens.values)


def test_refine_twice_by_two_equals_refine_by_four():
    ens = B.generate(12, B.TimeGrid(0.0, 2.0, 6), 2, 4)
    assert B.refine(B.refine(ens, 2), 2) == B.refine(ens, 4)


def test_bridge_midpoint_variance():
    dt = 0.25
    ens = B.generate(13, B.TimeGrid(0.0, 1.0, 4), 1, 100_000)
    fine = B.refine(ens, 2)
    v = fine.values[:, 0, :]
    dev = v[:, 1] - 0.5 * (v[:, 0] + v[:, 2])
    se = (dt / 4) * np.sqrt(2 / dev.size)
    assert abs(dev.var(ddof=1) - dt / 4) <= 3 * se


def test_bridge_third_point_variance():
    # conditional variance at the first third of an interval: dt * (1/3) * (2/3)
    dt = 0.5
    ens = B.generate(14, B.TimeGrid(0.0, 1.0, 2), 1, 50_000)
    v = B.refine(ens, 3).values[:, 0, :]
    dev = v[:, 1] - (v[:, 0] + (v[:, 3] - v[:, 0]) / 3)
    target = 2 * dt / 9
    assert abs(dev.var(ddof=1) - target) <= 3 * target * np.sqrt(2 / dev.size)


def test_bytes_round_trip_and_header(tmp_path):
    ens = B.generate(2**63 + 5, B.TimeGrid(0.5, 1.5, 7), 2, 3)
    data = B.to_bytes(ens)
    magic, version, seed, modes, samples, steps, t0, t1 = struct.unpack_from("<4sIQIIIdd", data)
    assert (magic, version, seed, modes, samples, steps, t0, t1) == (b"KFBM", 1, 2**63 + 5, 2, 3, 7, 0.5, 1.5)
    assert len(data) == struct.calcsize("<4sIQIIIdd") + 8 * 2 * 3 * 8
    assert B.from_bytes(data) == ens
    B.save(ens, tmp_path / "e.kfbm")
    assert B.load(tmp_path / "e.kfbm") == ens


def test_bad_magic_rejected():
    data = bytearray(B.to_bytes(B.generate(1, B.TimeGrid(0.0, 1.0, 2), 1, 1)))
    data[:4] = b"XXXX"
    with pytest.raises(ValueError):
        B.from_bytes(bytes(data))


def test_values_are_read_only():
    ens = B.generate(1, B.TimeGrid(0.0, 1.0, 4), 1, 1)
    with pytest.raises(ValueError):
        ens.values[0, 0, 1] = 3.0


@pytest.mark.parametrize("args", [(1.0, 1.0, 4), (0.0, 1.0, 0), (0.0, 1.0, 2.5)])
def test_bad_grid(args):
    with pytest.raises(B.DomainError):
        B.TimeGrid(*args)


def test_bad_sizes_and_factor():
    g = B.TimeGrid(0.0, 1.0, 4)
    with pytest.raises(B.DomainError):
        B.generate(1, g, 0, 1)
    with pytest.raises(B.DomainError):
        B.generate(1, g, 1, 0)
    with pytest.raises(B.DomainError):
        B.refine(B.generate(1, g, 1, 1), 1)
    with pytest.raises(B.DomainError):
        g.index_of(0.1)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**64 - 1), steps=st.integers(1, 40), modes=st.integers(1, 3))
def test_generation_properties(seed, steps, modes):
    g = B.TimeGrid(0.0, 1.0, steps)
    a = B.generate(seed, g, modes, 2)
    assert np.all(a.values[:, :, 0] == 0.0)
    assert np.all(np.isfinite(a.values))
    assert a == B.generate(seed, g, modes, 2)


@settings(max_examples=30, deadline=None)
@given(steps=st.integers(1, 50), k=st.integers(0, 50), factor=st.integers(2, 5))
def test_grid_index_round_trip(steps, k, factor):
    g = B.TimeGrid(-1.0, 2.0, steps)
    k = min(k, steps)
    assert g.index_of(g.nodes[k]) == k
    assert g.refined(factor).index_of(g.nodes[k]) == k * factor
