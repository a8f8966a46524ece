import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spackle.dataset_io import Dataset, SpotRecord
from spackle.hexgrid import (BLOCK_OFFSETS, HexIndex, UnknownSpotError, axial_to_offset, build_indices,
                             hex_neighbors, offset_to_axial, ring)
from spackle.neighborhoods import build_block
from spackle.preprocess import CompletionProvenance, Source

from conftest import make_dataset


def planar(row, col):
    """Cartesian spot center for odd-r offset rows at unit pitch (independent of axial math)."""
    return col + 0.5 * (row % 2), row * np.sqrt(3) / 2


def bfs_hops(source, rows, cols, margin=4):
    """Hop distances from ``source`` to every lattice point of a padded window.

    Neighbors are found geometrically (Euclidean distance exactly 1 at unit
    pitch), so this shares no code or coordinate algebra with the index.
    """
    lo_r, hi_r, lo_c, hi_c = -margin, rows + margin, -margin, cols + margin
    dist = {source: 0}
    frontier = [source]
    while frontier:
        nxt = []
        for r, c in frontier:
            x, y = planar(r, c)
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    rr, cc = r + dr, c + dc
                    if not (lo_r <= rr < hi_r and lo_c <= cc < hi_c) or (rr, cc) in dist:
                        continue
                    xx, yy = planar(rr, cc)
                    if abs(np.hypot(xx - x, yy - y) - 1.0) < 1e-9:
                        dist[(rr, cc)] = dist[(r, c)] + 1
                        nxt.append((rr, cc))
        frontier = nxt
    return dist


def check_rings_against_bfs(rows, cols):
    index, positions = full_index(rows, cols)
    for i, (r, c) in enumerate(positions):
        dist = bfs_hops((r, c), rows, cols)
        one = set(hex_neighbors(index, r, c, 1))
        two = set(hex_neighbors(index, r, c, 2))
        assert one == {j for j, p in enumerate(positions) if dist[p] == 1}
        assert two == {j for j, p in enumerate(positions) if 1 <= dist[p] <= 2}


def full_index(rows, cols, slide="A"):
    positions = [(r, c) for r in range(rows) for c in range(cols)]
    rr, cc = zip(*positions)
    return HexIndex.from_positions(slide, rr, cc, range(len(positions))), positions


def test_ring_sizes_and_order():
    assert len(ring(1)) == 6 and len(ring(2)) == 12
    assert ring(1)[0] == (1, 0)  # due east first
    assert ring(2)[0] == (2, 0)
    assert len(BLOCK_OFFSETS) == 19 and BLOCK_OFFSETS[0] == (0, 0)


def test_ring_one_is_clockwise():
    angles = []
    for q, r in ring(1):
        row, col = axial_to_offset(q, r)
        x, y = planar(row, col)
        x0, y0 = planar(0, 0)
        # rows grow downward, so clockwise on screen means increasing atan2(y, x)
        angles.append(np.degrees(np.arctan2(y - y0, x - x0)) % 360)
    assert angles == sorted(angles)
    assert angles[0] == pytest.approx(0.0)


@pytest.mark.parametrize("row,col", [(0, 0), (3, 4), (5, 2), (7, 7)])
def test_offset_axial_round_trip(row, col):
    assert axial_to_offset(*offset_to_axial(row, col)) == (row, col)


def test_interior_counts():
    index, _ = full_index(10, 10)
    assert len(hex_neighbors(index, 5, 5, 1)) == 6
    assert len(hex_neighbors(index, 5, 5, 2)) == 18
    assert len(hex_neighbors(index, 4, 4, 2)) == 18


def test_corner_of_two_by_two():
    index, positions = full_index(2, 2)
    out = hex_neighbors(index, 0, 0, 2)
    assert len(out) <= 3
    assert 0 not in out
    # order preserved: the canonical slot order filtered to existing spots
    q0, r0 = offset_to_axial(0, 0)
    expected = [index.lookup_axial(q0 + dq, r0 + dr) for dq, dr in BLOCK_OFFSETS[1:]]
    assert out == [e for e in expected if e is not None]


def test_unknown_center():
    index, _ = full_index(3, 3)
    with pytest.raises(UnknownSpotError):
        hex_neighbors(index, 9, 9, 1)
    with pytest.raises(ValueError):
        hex_neighbors(index, 1, 1, 3)


def test_distance_matches_brute_force():
    check_rings_against_bfs(6, 7)


def test_neighbor_order_deterministic():
    a, _ = full_index(8, 8)
    b, _ = full_index(8, 8)
    assert hex_neighbors(a, 4, 3, 2) == hex_neighbors(b, 4, 3, 2)


@settings(max_examples=40, deadline=None)
@given(st.sets(st.tuples(st.integers(0, 6), st.integers(0, 6)), min_size=1, max_size=30))
def test_one_hop_symmetry(positions):
    positions = sorted(positions)
    rr, cc = zip(*positions)
    index = HexIndex.from_positions("A", rr, cc, range(len(positions)))
    nbrs = {i: set(hex_neighbors(index, r, c, 1)) for i, (r, c) in enumerate(positions)}
    for a, bs in nbrs.items():
        for b in bs:
            assert a in nbrs[b]


class TestBuildBlock:
    def test_interior_full_presence(self):
        ds = make_dataset([(6, 6)], 3)
        prov = CompletionProvenance.all_observed(ds.observed.shape)
        center = 3 * 6 + 2
        block = build_block(ds, prov, center)
        assert block.values.shape == (3, 19)
        assert block.presence.all()
        np.testing.assert_array_equal(block.values[:, 0], ds.expression[center])
        idx = build_indices(ds)["S0"]
        nbrs = hex_neighbors(idx, 3, 2, 2)
        np.testing.assert_array_equal(block.values[:, 1:], ds.expression[nbrs].T)

    def test_isolated_spot(self):
        spots = [SpotRecord("a", "S", 0, 0)]
        ds = Dataset(spots, ["x", "y"], np.array([[1, 2]]), np.array([[1.0, 2.0]]),
                     np.ones((1, 2), bool), {"S": "train"})
        block = build_block(ds, CompletionProvenance.all_observed((1, 2)), 0)
        assert block.presence.tolist() == [True] + [False] * 18
        assert (block.values[:, 1:] == 0).all()
        assert not block.real_mask[:, 1:].any()

    def test_provenance_mirror(self):
        ds = make_dataset([(5, 5)], 4)
        src = np.zeros(ds.observed.shape, dtype=np.int8)
        src[12, 2] = Source.MEDIAN_LOCAL
        block = build_block(ds, CompletionProvenance(src), 12)
        assert block.real_mask[2, 0] == False  # noqa: E712
        assert block.real_mask[[0, 1, 3], 0].all()

    def test_out_of_range(self):
        ds = make_dataset([(5, 5)], 2)
        with pytest.raises(IndexError):
            build_block(ds, CompletionProvenance.all_observed(ds.observed.shape), 25)

    def test_padding_invariants(self):
        ds = make_dataset([(3, 4)], 3)
        prov = CompletionProvenance.all_observed(ds.observed.shape)
        for spot in range(ds.num_spots):
            block = build_block(ds, prov, spot)
            assert block.presence[0]
            assert (block.values[:, ~block.presence] == 0).all()
            assert not block.real_mask[:, ~block.presence].any()
