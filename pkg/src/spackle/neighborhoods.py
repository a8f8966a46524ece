"""Per-spot expression blocks: the center spot plus its 18 two-hop neighbors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hexgrid import BLOCK_SIZE, HexIndex, block_table, build_indices, hex_neighbors

__all__ = ["N_NEIGHBORS", "ExpressionBlock", "HexIndex", "block_table", "build_block", "build_indices",
           "gather_blocks", "hex_neighbors"]

N_NEIGHBORS = BLOCK_SIZE - 1  # 18


@dataclass(eq=False)
class ExpressionBlock:
    """``values`` is ``[g, 19]``: column 0 the center, then ring 1 and ring 2 clockwise from east."""

    center_spot: int
    values: np.ndarray
    presence: np.ndarray
    real_mask: np.ndarray

    @property
    def n(self) -> int:
        return self.values.shape[1] - 1


def build_block(ds, provenance, spot: int, *, table=None) -> ExpressionBlock:
    if not 0 <= spot < ds.num_spots:
        raise IndexError(f"spot ordinal {spot} out of range for {ds.num_spots} spots")
    if table is None:
        table = block_table(ds)
    values, presence, real = gather_blocks(ds.expression, provenance.real, table, np.array([spot]))
    return ExpressionBlock(spot, values[0].T.copy(), presence[0].copy(), real[0].T.copy())


def gather_blocks(expression, real, table, spots):
    """Token-major blocks for ``spots``.

    Returns ``values [B, 19, g]``, ``presence [B, 19]`` and ``real [B, 19, g]``;
    absent neighbors are zero in ``values`` and False in ``real``.
    """
    idx = table[spots]
    presence = idx >= 0
    safe = np.where(presence, idx, 0)
    values = expression[safe] * presence[:, :, None]
    real_tokens = real[safe] & presence[:, :, None]
    return values, presence, real_tokens
