"""Labeling features: state exploration (S_e) and total gain (G)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError


@dataclass(frozen=True)
class ExplorationBreakdown:
    common_diff: float
    disappeared: float
    appeared: float
    total: float


@dataclass(frozen=True)
class GainInput:
    v_next: float
    v_prev: float
    reward: float
    w1: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.w1 <= 1.0:
            raise ValueError(f"w1 must lie in [0, 1], got {self.w1}")


def _strip_mask(h: int, w: int, dx: int, dy: int) -> np.ndarray:
    """Pixels of a frame outside the window shared with its shifted partner.

    For the previous frame the strips sit on the leading edges (columns
    ``[0, dx)`` and rows ``[0, dy)`` when the shift is non-negative); the
    caller passes negated shifts to obtain the next frame's strips.
    """
    mask = np.zeros((h, w), dtype=bool)
    if dx > 0:
        mask[:, :dx] = True
    elif dx < 0:
        mask[:, w + dx:] = True
    if dy > 0:
        mask[:dy, :] = True
    elif dy < 0:
        mask[h + dy:, :] = True
    return mask


def state_exploration(prev, nxt, shift) -> ExplorationBreakdown:
    """Sum of Frobenius norms of the common-area difference and the two strips.

    ``shift`` is anything with ``dx``/``dy`` attributes (a ShiftEstimate) or
    a ``(dx, dy)`` pair, using the convention ``nxt[y, x] ≈ prev[y+dy, x+dx]``.
    Each strip union counts a corner pixel once.
    """
    a = np.asarray(prev, dtype=np.float64)
    b = np.asarray(nxt, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError(f"frames must be equal-shape 2-d arrays, got {a.shape} and {b.shape}")
    dx, dy = (shift.dx, shift.dy) if hasattr(shift, "dx") else (int(shift[0]), int(shift[1]))
    h, w = a.shape
    if abs(dx) >= w or abs(dy) >= h:
        raise ContractError(f"shift ({dx}, {dy}) out of range for a {w}x{h} frame")

    # overlapping window: nxt[ys_n, xs_n] lines up with prev[ys_p, xs_p]
    xs_n = slice(max(0, -dx), w - max(0, dx))
    xs_p = slice(max(0, dx), w - max(0, -dx))
    ys_n = slice(max(0, -dy), h - max(0, dy))
    ys_p = slice(max(0, dy), h - max(0, -dy))
    common = float(np.sqrt(np.sum((b[ys_n, xs_n] - a[ys_p, xs_p]) ** 2)))
    disappeared = float(np.sqrt(np.sum(a[_strip_mask(h, w, dx, dy)] ** 2)))
    appeared = float(np.sqrt(np.sum(b[_strip_mask(h, w, -dx, -dy)] ** 2)))
    return ExplorationBreakdown(common, disappeared, appeared, common + disappeared + appeared)


def gain(inp: GainInput) -> float:
    """w1·(v_next - v_prev) + (1 - w1)·reward."""
    return inp.w1 * (inp.v_next - inp.v_prev) + (1.0 - inp.w1) * inp.reward
