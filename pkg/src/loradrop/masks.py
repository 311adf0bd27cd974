"""Structural keep/drop mask sampling over 2-D grids.

Three patterns: independent elements, whole columns, or one contiguous
span. Grids are oriented the way they are applied: attention masks are
(queries, keys) aligned with a logits/weights block, so the column
pattern removes whole keys across every query; hidden-state masks are
(length, hidden) so the column pattern removes a feature dimension and
the span pattern removes a contiguous run of token rows.

Sampling is a pure function of its arguments; attention grids are
repaired so no query row loses every key.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DegeneracyError


class StructuralPattern(enum.Enum):
    ELEMENT = "element"
    COLUMN = "column"
    SPAN = "span"


class AxisSemantics(enum.Enum):
    """What the two grid axes mean at the application site."""

    KEYS_QUERIES = "keys_queries"    # attention: rows=queries, cols=keys
    LENGTH_HIDDEN = "length_hidden"  # hidden states: rows=tokens, cols=features


@dataclass(frozen=True)
class MaskPlan:
    """A sampled keep/drop assignment (1=keep, 0=drop) plus its provenance."""

    grid: np.ndarray
    pattern: StructuralPattern
    rate: float
    seed: int
    axis_semantics: AxisSemantics

    @property
    def keep(self) -> np.ndarray:
        return self.grid

    @property
    def drop_where(self) -> np.ndarray:
        return self.grid == 0


def _span_bounds(axis_len: int, rate: float, rng: np.random.Generator) -> tuple[int, int]:
    length = max(1, int(round(rate * axis_len)))
    start = int(rng.integers(0, axis_len - length + 1))
    return start, length


def sample_grid(
    rows: int,
    cols: int,
    pattern: StructuralPattern,
    rate: float,
    rng: np.random.Generator,
    axis_semantics: AxisSemantics,
) -> np.ndarray:
    """Draw one keep/drop grid from an already-seeded generator."""
    if rows < 1 or cols < 1:
        raise ContractError(f"mask grid must be at least 1x1, got {rows}x{cols}")
    if not (0.0 <= rate < 1.0):
        raise ContractError(f"dropout rate must lie in [0, 1), got {rate}")
    if rate == 0.0:
        return np.ones((rows, cols), dtype=np.uint8)

    attention = axis_semantics is AxisSemantics.KEYS_QUERIES

    if pattern is StructuralPattern.ELEMENT:
        grid = (rng.random((rows, cols)) >= rate).astype(np.uint8)
        if attention:
            dead = np.flatnonzero(grid.sum(axis=1) == 0)
            for r in dead:
                grid[r, int(rng.integers(0, cols))] = 1
    elif pattern is StructuralPattern.COLUMN:
        keep_cols = (rng.random(cols) >= rate).astype(np.uint8)
        if attention and keep_cols.sum() == 0:
            keep_cols[int(rng.integers(0, cols))] = 1
        grid = np.broadcast_to(keep_cols, (rows, cols)).copy()
    elif pattern is StructuralPattern.SPAN:
        if attention:
            start, length = _span_bounds_checked(cols, rate, rng)
            grid = np.ones((rows, cols), dtype=np.uint8)
            grid[:, start:start + length] = 0
        else:
            # hidden-state spans run along tokens (rows)
            start, length = _span_bounds(rows, rate, rng)
            grid = np.ones((rows, cols), dtype=np.uint8)
            grid[start:start + length, :] = 0
    else:  # pragma: no cover
        raise ContractError(f"unknown pattern {pattern}")
    return grid


def _span_bounds_checked(axis_len: int, rate: float, rng: np.random.Generator) -> tuple[int, int]:
    length = max(1, int(round(rate * axis_len)))
    if length >= axis_len:
        raise DegeneracyError(
            f"span of length {length} would drop every key on a {axis_len}-column grid"
        )
    start = int(rng.integers(0, axis_len - length + 1))
    return start, length


def sample_mask(
    rows: int,
    cols: int,
    pattern: StructuralPattern,
    rate: float,
    seed: int,
    axis_semantics: AxisSemantics = AxisSemantics.KEYS_QUERIES,
) -> MaskPlan:
    """Sample one mask; deterministic in (rows, cols, pattern, rate, seed)."""
    rng = np.random.default_rng(seed)
    grid = sample_grid(rows, cols, pattern, rate, rng, axis_semantics)
    return MaskPlan(grid=grid, pattern=pattern, rate=rate, seed=int(seed), axis_semantics=axis_semantics)


def sample_mask_stack(
    n: int,
    rows: int,
    cols: int,
    pattern: StructuralPattern,
    rate: float,
    seed: int,
    axis_semantics: AxisSemantics,
) -> np.ndarray:
    """n independent grids drawn from one seeded stream, stacked [n, rows, cols].

    Training-path sampler: one mask per (batch element, head), drawn in
    vectorized blocks so the stack stays cheap on the hot path. Same
    per-grid distribution and repairs as sample_mask.
    """
    if rows < 1 or cols < 1 or n < 1:
        raise ContractError(f"mask stack must be at least 1x1x1, got {n}x{rows}x{cols}")
    if not (0.0 <= rate < 1.0):
        raise ContractError(f"dropout rate must lie in [0, 1), got {rate}")
    if rate == 0.0:
        return np.ones((n, rows, cols), dtype=np.uint8)
    rng = np.random.default_rng(seed)
    attention = axis_semantics is AxisSemantics.KEYS_QUERIES

    if pattern is StructuralPattern.ELEMENT:
        grid = (rng.random((n, rows, cols)) >= rate).astype(np.uint8)
        if attention:
            dead = grid.sum(axis=2) == 0
            if dead.any():
                ii, rr = np.nonzero(dead)
                grid[ii, rr, rng.integers(0, cols, size=ii.size)] = 1
        return grid

    if pattern is StructuralPattern.COLUMN:
        keep_cols = (rng.random((n, cols)) >= rate).astype(np.uint8)
        if attention:
            dead = keep_cols.sum(axis=1) == 0
            if dead.any():
                jj = np.nonzero(dead)[0]
                keep_cols[jj, rng.integers(0, cols, size=jj.size)] = 1
        return np.broadcast_to(keep_cols[:, None, :], (n, rows, cols)).copy()

    # span
    axis_len = cols if attention else rows
    length = max(1, int(round(rate * axis_len)))
    if attention and length >= axis_len:
        raise DegeneracyError(
            f"span of length {length} would drop every key on a {axis_len}-column grid"
        )
    hi = max(1, axis_len - length + 1)
    starts = rng.integers(0, hi, size=n)
    pos = np.arange(axis_len)
    in_span = (pos >= starts[:, None]) & (pos < (starts + length)[:, None])  # [n, axis_len]
    keep_axis = (~in_span).astype(np.uint8)
    if attention:
        return np.broadcast_to(keep_axis[:, None, :], (n, rows, cols)).copy()
    return np.broadcast_to(keep_axis[:, :, None], (n, rows, cols)).copy()


def kept_fraction(mask: MaskPlan) -> float:
    """Fraction of keep entries in the grid."""
    return float(mask.grid.mean(dtype=np.float64))
