from __future__ import annotations

from collections import Counter, deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from fedmim.errors import ContractViolation
from fedmim.masking import MaskPlan, blockwise_mask, make_mask, random_mask, round_half_up, sample_mask_blocks


def _components(mask: np.ndarray) -> int:
    """Componentes 4-conexas de patches mascarados."""
    rows, cols = mask.shape
    seen = np.zeros_like(mask)
    count = 0
    for r in range(rows):
        for c in range(cols):
            if not mask[r, c] or seen[r, c]:
                continue
            count += 1
            queue = deque([(r, c)])
            seen[r, c] = True
            while queue:
                y, x = queue.popleft()
                for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    ny, nx = y + dy, x + dx
                    if 0 <= ny < rows and 0 <= nx < cols and mask[ny, nx] and not seen[ny, nx]:
                        seen[ny, nx] = True
                        queue.append((ny, nx))
    return count


def _assert_partition(plan: MaskPlan, num_patches: int, expected: int):
    assert plan.masked.size == expected
    assert np.intersect1d(plan.masked, plan.visible).size == 0
    assert np.array_equal(np.union1d(plan.masked, plan.visible), np.arange(num_patches))


def test_round_half_up():
    assert round_half_up(0.5, 5) == 3
    assert round_half_up(0.75, 196) == 147
    assert round_half_up(0.4, 196) == 78
    assert round_half_up(0.25, 2) == 1


def test_random_mask_example():
    plan = random_mask(196, 0.75, np.random.default_rng(0))
    _assert_partition(plan, 196, 147)
    assert plan.grid == (14, 14)


def test_random_mask_is_uniform_over_subsets():
    rng = np.random.default_rng(3)
    counts = Counter(tuple(random_mask(4, 0.5, rng, grid=(2, 2)).masked.tolist()) for _ in range(6000))
    assert len(counts) == 6
    assert stats.chisquare(list(counts.values())).pvalue > 1e-3


def test_degenerate_ratios_rejected():
    rng = np.random.default_rng(0)
    with pytest.raises(ContractViolation):
        random_mask(4, 0.1, rng)
    with pytest.raises(ContractViolation):
        random_mask(4, 0.95, rng)
    with pytest.raises(ContractViolation):
        random_mask(16, 0.0, rng)
    with pytest.raises(ContractViolation):
        blockwise_mask((4, 4), 1.0, rng)


def test_min_block_larger_than_target():
    with pytest.raises(ContractViolation):
        blockwise_mask((4, 4), 0.2, np.random.default_rng(0), min_block=8)


@settings(max_examples=150, deadline=None)
@given(side=st.integers(2, 20), ratio=st.floats(0.1, 0.9), seed=st.integers(0, 2**32 - 1))
def test_both_strategies_are_exact_disjoint_covers(side, ratio, seed):
    num_patches = side * side
    n = round_half_up(ratio, num_patches)
    if not 1 <= n <= num_patches - 1:
        with pytest.raises(ContractViolation):
            random_mask(num_patches, ratio, np.random.default_rng(seed))
        return
    for strategy in ("random", "block"):
        plan = make_mask(strategy, (side, side), ratio, np.random.default_rng(seed), min_block=1)
        _assert_partition(plan, num_patches, n)
        again = make_mask(strategy, (side, side), ratio, np.random.default_rng(seed), min_block=1)
        assert np.array_equal(plan.masked, again.masked)


def test_block_masks_are_less_fragmented_than_random():
    grid, ratio = (14, 14), 0.4
    block = [_components(blockwise_mask(grid, ratio, np.random.default_rng(s)).mask_grid()) for s in range(1000)]
    rand = [_components(random_mask(196, ratio, np.random.default_rng(s), grid=grid).mask_grid()) for s in range(1000)]
    assert np.mean(block) < np.mean(rand)


def test_block_sampler_respects_shape_limits():
    blocks, order = sample_mask_blocks((14, 14), 78, np.random.default_rng(5), min_block=4, max_aspect=3.0)
    assert order.size >= 78
    assert np.unique(order).size == order.size
    for b in blocks:
        assert b.height * b.width >= 4
        assert max(b.height / b.width, b.width / b.height) <= 3.0
        assert b.top + b.height <= 14 and b.left + b.width <= 14


def test_plan_validation():
    with pytest.raises(ContractViolation):
        MaskPlan(ratio=0.5, masked=np.array([0, 1]), visible=np.array([1, 2, 3]), grid=(2, 2))
    with pytest.raises(ContractViolation):
        MaskPlan(ratio=0.5, masked=np.array([1, 0]), visible=np.array([2, 3]), grid=(2, 2))
    unmasked = MaskPlan.unmasked((2, 3))
    assert unmasked.masked.size == 0 and unmasked.visible.tolist() == list(range(6))


def test_unknown_strategy():
    with pytest.raises(ContractViolation):
        make_mask("grid", (4, 4), 0.5, np.random.default_rng(0))
