"""Random training masks and inference-time missing-value masks.

A mask entry is True to keep a value and False to zero it. Training masks only
ever hide originally observed values; median-completed and padded positions
are always kept.

Seeds: the training loop draws each iteration's masks from
``SeedSequence([seed, MASK_STREAM, iteration])``; validation masks come from
``SeedSequence([seed, VALIDATION_STREAM])`` and are generated once per run.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MASK_STREAM = 1
BATCH_STREAM = 2
VALIDATION_STREAM = 3
EVAL_STREAM = 4


def stream_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


@dataclass(eq=False)
class MaskSpec:
    m: np.ndarray
    rho: float


def _check_rho(rho):
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must be in [0, 1], got {rho}")


def sample_mask(block, rho: float, rng: np.random.Generator) -> MaskSpec:
    """Independently hide each real entry of ``block`` with probability ``rho``."""
    _check_rho(rho)
    hide = (rng.random(block.real_mask.shape) < rho) & block.real_mask
    return MaskSpec(~hide, rho)


def sample_masks(real_tokens: np.ndarray, rho: float, rng: np.random.Generator) -> np.ndarray:
    """Batched :func:`sample_mask` over token-major ``real [B, T, g]``; returns keep flags."""
    _check_rho(rho)
    return ~((rng.random(real_tokens.shape) < rho) & real_tokens)


def apply_mask(block, mask: MaskSpec) -> np.ndarray:
    if mask.m.shape != block.values.shape:
        raise ValueError(f"mask shape {mask.m.shape} does not match block {block.values.shape}")
    return block.values * mask.m


def inference_mask(block) -> MaskSpec:
    """Hide exactly the present entries that were not originally observed."""
    return MaskSpec(block.real_mask | ~block.presence[None, :], 0.0)
