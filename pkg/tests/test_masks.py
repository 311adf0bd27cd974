"""Structural mask sampling: pattern geometry, determinism, statistics,
and degeneracy protection."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from loradrop.errors import ContractError, DegeneracyError
from loradrop.masks import (
    AxisSemantics,
    StructuralPattern,
    kept_fraction,
    sample_mask,
    sample_mask_stack,
)

ATTN = AxisSemantics.KEYS_QUERIES
HID = AxisSemantics.LENGTH_HIDDEN


class TestDeterminism:
    @given(st.integers(0, 2**32 - 1), st.sampled_from(list(StructuralPattern)))
    @settings(max_examples=50, deadline=None)
    def test_pure_function_of_arguments(self, seed, pattern):
        a = sample_mask(6, 9, pattern, 0.3, seed, ATTN)
        b = sample_mask(6, 9, pattern, 0.3, seed, ATTN)
        assert np.array_equal(a.grid, b.grid)

    def test_stack_deterministic(self):
        a = sample_mask_stack(5, 4, 8, StructuralPattern.ELEMENT, 0.25, 99, ATTN)
        b = sample_mask_stack(5, 4, 8, StructuralPattern.ELEMENT, 0.25, 99, ATTN)
        assert np.array_equal(a, b)
        # grids within the stack are not all identical
        assert not all(np.array_equal(a[0], a[i]) for i in range(1, 5))


class TestPatterns:
    @pytest.mark.parametrize("pattern", list(StructuralPattern))
    def test_rate_zero_is_all_keep(self, pattern):
        plan = sample_mask(4, 6, pattern, 0.0, 1, ATTN)
        assert plan.grid.all()

    def test_span_forced_length(self):
        # max(1, round(0.2 * 10)) == 2, and the drop set is one interval
        plan = sample_mask(5, 10, StructuralPattern.SPAN, 0.2, 3, ATTN)
        dropped = np.flatnonzero(plan.grid[0] == 0)
        assert dropped.size == 2
        assert dropped[1] - dropped[0] == 1
        assert np.all(plan.grid == plan.grid[0])
        assert kept_fraction(plan) == 0.8

    def test_span_drop_set_single_interval_property(self):
        for seed in range(50):
            plan = sample_mask(3, 17, StructuralPattern.SPAN, 0.31, seed, ATTN)
            dropped = np.flatnonzero(plan.grid[0] == 0)
            assert dropped.size == max(1, round(0.31 * 17))
            assert np.all(np.diff(dropped) == 1)

    def test_hidden_span_runs_along_token_rows(self):
        plan = sample_mask(10, 6, StructuralPattern.SPAN, 0.2, 5, HID)
        dropped_rows = np.flatnonzero(plan.grid.sum(axis=1) == 0)
        assert dropped_rows.size == 2
        assert np.all(np.diff(dropped_rows) == 1)
        kept_rows = np.flatnonzero(plan.grid.sum(axis=1) > 0)
        assert np.all(plan.grid[kept_rows] == 1)

    def test_column_pattern_columns_uniform(self):
        plan = sample_mask(7, 12, StructuralPattern.COLUMN, 0.4, 11, ATTN)
        for c in range(12):
            col = plan.grid[:, c]
            assert col.all() or not col.any()
        # every row identical to every other row
        assert np.all(plan.grid == plan.grid[0])

    def test_element_statistics(self):
        plan = sample_mask(1000, 1000, StructuralPattern.ELEMENT, 0.1, 17, ATTN)
        drop_frac = 1.0 - plan.grid.mean()
        assert 0.095 <= drop_frac <= 0.105

    def test_column_statistics(self):
        plan = sample_mask(3, 20000, StructuralPattern.COLUMN, 0.3, 23, HID)
        drop_frac = 1.0 - plan.grid[0].mean()
        assert 0.29 <= drop_frac <= 0.31


class TestDegeneracyProtection:
    def test_every_query_row_keeps_a_key_element(self):
        # high rate on a narrow grid: raw sampling would kill rows often
        for seed in range(200):
            plan = sample_mask(8, 3, StructuralPattern.ELEMENT, 0.85, seed, ATTN)
            assert np.all(plan.grid.sum(axis=1) >= 1)

    def test_column_repair_keeps_one_column(self):
        hit_repair = False
        for seed in range(300):
            plan = sample_mask(4, 2, StructuralPattern.COLUMN, 0.9, seed, ATTN)
            sums = plan.grid.sum(axis=1)
            assert np.all(sums >= 1)
            for c in range(2):
                col = plan.grid[:, c]
                assert col.all() or not col.any()
            if plan.grid.sum() == 4:  # exactly one surviving column
                hit_repair = True
        assert hit_repair

    def test_hidden_semantics_may_drop_everything(self):
        # no repair outside attention grids: a fully dropped feature set is legal
        full_drop = False
        for seed in range(200):
            plan = sample_mask(3, 2, StructuralPattern.COLUMN, 0.9, seed, HID)
            if plan.grid.sum() == 0:
                full_drop = True
        assert full_drop

    def test_one_column_span_degeneracy_error(self):
        with pytest.raises(DegeneracyError):
            sample_mask(4, 1, StructuralPattern.SPAN, 0.2, 1, ATTN)

    def test_span_covering_all_keys_rejected(self):
        # round(0.96 * 10) == 10 would drop every key column
        with pytest.raises(DegeneracyError):
            sample_mask(4, 10, StructuralPattern.SPAN, 0.96, 1, ATTN)


class TestContracts:
    def test_rate_one_rejected(self):
        with pytest.raises(ContractError):
            sample_mask(4, 4, StructuralPattern.ELEMENT, 1.0, 1, ATTN)

    def test_negative_rate_rejected(self):
        with pytest.raises(ContractError):
            sample_mask(4, 4, StructuralPattern.ELEMENT, -0.1, 1, ATTN)

    def test_empty_grid_rejected(self):
        with pytest.raises(ContractError):
            sample_mask(0, 4, StructuralPattern.ELEMENT, 0.1, 1, ATTN)


class TestKeptFraction:
    def test_all_keep(self):
        assert kept_fraction(sample_mask(3, 3, StructuralPattern.ELEMENT, 0.0, 1, ATTN)) == 1.0

    def test_single_drop(self):
        plan = sample_mask(2, 2, StructuralPattern.ELEMENT, 0.0, 1, ATTN)
        grid = plan.grid.copy()
        grid[0, 0] = 0
        modified = type(plan)(grid=grid, pattern=plan.pattern, rate=plan.rate,
                              seed=plan.seed, axis_semantics=plan.axis_semantics)
        assert kept_fraction(modified) == 0.75
