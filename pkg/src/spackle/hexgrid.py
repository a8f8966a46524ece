"""Hexagonal lattice geometry for Visium-style spot arrays.

Spots are addressed by offset coordinates ``(row, col)`` where odd rows are
shifted half a spot to the right ("odd-r"). All ring and distance logic runs in
axial coordinates ``(q, r)``; the conversion happens once when an index is
built.

Visium's own ``array_col`` doubles the column index (even rows use even
columns, odd rows odd columns); divide it by two to get the ``col`` used here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Clockwise starting due east, with rows growing downward.
DIRECTIONS = ((1, 0), (0, 1), (-1, 1), (-1, 0), (0, -1), (1, -1))
_WALK = (DIRECTIONS[2], DIRECTIONS[3], DIRECTIONS[4], DIRECTIONS[5], DIRECTIONS[0], DIRECTIONS[1])

MAX_HOPS = 2


def offset_to_axial(row: int, col: int) -> tuple[int, int]:
    return col - (row - (row & 1)) // 2, row


def axial_to_offset(q: int, r: int) -> tuple[int, int]:
    return r, q + (r - (r & 1)) // 2


def axial_distance(a, b) -> int:
    dq = a[0] - b[0]
    dr = a[1] - b[1]
    return (abs(dq) + abs(dr) + abs(dq + dr)) // 2


def ring(radius: int) -> list[tuple[int, int]]:
    """Axial offsets at exactly ``radius`` steps, clockwise from due east."""
    if radius < 0:
        raise ValueError(f"radius must be non-negative, got {radius}")
    if radius == 0:
        return [(0, 0)]
    q, r = radius * DIRECTIONS[0][0], radius * DIRECTIONS[0][1]
    out = []
    for dq, dr in _WALK:
        for _ in range(radius):
            out.append((q, r))
            q, r = q + dq, r + dr
    return out


def rings_upto(hops: int) -> list[tuple[int, int]]:
    return [off for radius in range(1, hops + 1) for off in ring(radius)]


# Canonical slot order of a 2-hop block: center, ring 1, ring 2.
BLOCK_OFFSETS = [(0, 0)] + rings_upto(MAX_HOPS)
BLOCK_SIZE = len(BLOCK_OFFSETS)  # 19
RING_OF_SLOT = np.array([axial_distance((0, 0), off) for off in BLOCK_OFFSETS], dtype=np.intp)


class UnknownSpotError(KeyError):
    pass


@dataclass
class HexIndex:
    """Map from lattice position to spot ordinal for one slide.

    ``parity`` records the offset convention ("odd-r": odd rows shifted right).
    """

    slide_id: str
    parity: str = "odd-r"
    _axial: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_positions(cls, slide_id, rows, cols, ordinals):
        index = cls(slide_id)
        for row, col, ordinal in zip(rows, cols, ordinals):
            key = offset_to_axial(int(row), int(col))
            if key in index._axial:
                raise ValueError(f"slide {slide_id}: duplicate position ({row}, {col})")
            index._axial[key] = int(ordinal)
        return index

    def __len__(self):
        return len(self._axial)

    def lookup(self, row: int, col: int):
        """Ordinal at ``(row, col)``, or None when no spot sits there."""
        return self._axial.get(offset_to_axial(row, col))

    def lookup_axial(self, q: int, r: int):
        return self._axial.get((q, r))

    def items_axial(self):
        return self._axial.items()


def hex_neighbors(index: HexIndex, row: int, col: int, hops: int) -> list[int]:
    """Existing spots within ``hops`` steps of ``(row, col)``, center excluded.

    Ordered ring by ring, each ring clockwise from the due-east neighbor.
    Absent lattice positions are skipped.
    """
    if hops not in (1, 2):
        raise ValueError(f"hops must be 1 or 2, got {hops}")
    if index.lookup(row, col) is None:
        raise UnknownSpotError(f"no spot at ({row}, {col}) on slide {index.slide_id}")
    q0, r0 = offset_to_axial(row, col)
    out = []
    for dq, dr in rings_upto(hops):
        ordinal = index.lookup_axial(q0 + dq, r0 + dr)
        if ordinal is not None:
            out.append(ordinal)
    return out


def build_indices(dataset) -> dict[str, HexIndex]:
    """One :class:`HexIndex` per slide of ``dataset``."""
    per_slide: dict[str, list] = {}
    for ordinal, spot in enumerate(dataset.spots):
        per_slide.setdefault(spot.slide_id, []).append((spot.array_row, spot.array_col, ordinal))
    return {
        slide: HexIndex.from_positions(slide, *zip(*entries)) for slide, entries in per_slide.items()
    }


def offset_table(dataset, offsets) -> np.ndarray:
    """``[num_spots, len(offsets)]`` ordinals of the spot at each axial offset, -1 if absent."""
    indices = build_indices(dataset)
    table = np.full((len(dataset.spots), len(offsets)), -1, dtype=np.intp)
    for i, spot in enumerate(dataset.spots):
        index = indices[spot.slide_id]
        q0, r0 = offset_to_axial(spot.array_row, spot.array_col)
        for j, (dq, dr) in enumerate(offsets):
            ordinal = index.lookup_axial(q0 + dq, r0 + dr)
            if ordinal is not None:
                table[i, j] = ordinal
    return table


def block_table(dataset) -> np.ndarray:
    """``[num_spots, 19]`` ordinals in canonical block order; column 0 is the spot itself."""
    return offset_table(dataset, BLOCK_OFFSETS)
