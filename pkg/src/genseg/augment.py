"""Binary mask augmentation: quarter-turn rotations, flips, and integer
translations with zero fill, sampled in random sequences.

Only operations that keep masks exactly binary are offered, so no
interpolation or re-thresholding policy is needed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KINDS = ("rotate90", "flip_h", "flip_v", "translate")


@dataclass(frozen=True)
class AugmentOp:
    kind: str
    turns: int = 1   # rotate90: quarter turns, 1..3
    dx: int = 0      # translate: shift along width, positive moves right
    dy: int = 0      # translate: shift along height, positive moves down

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown augment kind '{self.kind}'")
        if self.kind == "rotate90" and self.turns not in (1, 2, 3):
            raise ValueError(f"rotate90 turns must be 1..3, got {self.turns}")


def apply(op: AugmentOp, mask: np.ndarray) -> np.ndarray:
    """Transform a binary mask over its last two axes; shape is preserved."""
    mask = np.asarray(mask, dtype=np.float64)
    h, w = mask.shape[-2], mask.shape[-1]
    if op.kind == "rotate90":
        return np.ascontiguousarray(np.rot90(mask, k=op.turns, axes=(-2, -1)))
    if op.kind == "flip_h":
        return np.ascontiguousarray(mask[..., :, ::-1])
    if op.kind == "flip_v":
        return np.ascontiguousarray(mask[..., ::-1, :])
    if abs(op.dx) >= w or abs(op.dy) >= h:
        raise ValueError(f"translate ({op.dx},{op.dy}) out of range for extent {h}x{w}")
    out = np.zeros_like(mask)
    src_y = slice(max(0, -op.dy), h - max(0, op.dy))
    src_x = slice(max(0, -op.dx), w - max(0, op.dx))
    dst_y = slice(max(0, op.dy), h - max(0, -op.dy))
    dst_x = slice(max(0, op.dx), w - max(0, -op.dx))
    out[..., dst_y, dst_x] = mask[..., src_y, src_x]
    return out


def apply_sequence(ops, mask: np.ndarray) -> np.ndarray:
    for op in ops:
        mask = apply(op, mask)
    return mask


def random_sequence(rng, ops_enabled, max_len: int, extent: int) -> list[AugmentOp]:
    """Sample 1..max_len ops uniformly (kind first, then parameters).

    ``rng`` is a seed or a numpy Generator; translation offsets are drawn
    uniformly from +-extent//4. Reproducible given the same seed.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    kinds = sorted(set(ops_enabled))
    if not kinds:
        raise ValueError("ops_enabled must not be empty")
    for k in kinds:
        if k not in KINDS:
            raise ValueError(f"unknown augment kind '{k}'")
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    length = int(rng.integers(1, max_len + 1))
    ops = []
    for _ in range(length):
        kind = kinds[int(rng.integers(len(kinds)))]
        if kind == "rotate90":
            ops.append(AugmentOp("rotate90", turns=int(rng.integers(1, 4))))
        elif kind == "translate":
            lim = extent // 4
            ops.append(AugmentOp("translate",
                                 dx=int(rng.integers(-lim, lim + 1)),
                                 dy=int(rng.integers(-lim, lim + 1))))
        else:
            ops.append(AugmentOp(kind))
    return ops


def enabled_kinds(rotate: bool, flip: bool, translate: bool) -> set[str]:
    """Config booleans to the kind set (flip enables both axes)."""
    kinds: set[str] = set()
    if rotate:
        kinds.add("rotate90")
    if flip:
        kinds.update(("flip_h", "flip_v"))
    if translate:
        kinds.add("translate")
    return kinds
