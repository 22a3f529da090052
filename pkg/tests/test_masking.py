"""Patch mask generation properties."""

import numpy as np
import pytest

from maskclust.masking import (
    STRATEGIES,
    LatticeShape,
    MaskSpec,
    PatchMask,
    generate_mask,
    load_mask_fixture,
    roll_mask,
    sample_prediction_targets,
    save_mask_fixture,
)
from maskclust.rng import substream


def test_lattice_shape_validation():
    with pytest.raises(ValueError, match="degenerate"):
        LatticeShape(0, 4)
    assert LatticeShape(3, 5).n == 15


def test_mask_spec_validation():
    with pytest.raises(ValueError, match="unknown strategy"):
        MaskSpec("diagonal", 0.5)
    with pytest.raises(ValueError, match="ratio"):
        MaskSpec("random", 1.5)


def test_patch_mask_requires_2d():
    with pytest.raises(ValueError, match="2-D"):
        PatchMask(np.zeros(6, dtype=bool))


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_exact_count_across_triples(strategy):
    shapes = [(4, 4), (14, 14), (7, 11), (1, 9), (16, 4)]
    ratios = [0.0, 0.25, 0.4, 0.65, 0.75, 1.0]
    for rows, cols in shapes:
        shape = LatticeShape(rows, cols)
        for ratio in ratios:
            for seed in range(5):
                mask = generate_mask(shape, MaskSpec(strategy, ratio), substream(seed, "m"))
                assert mask.masked_count == int(np.floor(ratio * shape.n)), (
                    strategy, rows, cols, ratio, seed,
                )


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_determinism(strategy):
    shape = LatticeShape(14, 14)
    spec = MaskSpec(strategy, 0.65)
    a = generate_mask(shape, spec, substream(3, "mask", 17))
    b = generate_mask(shape, spec, substream(3, "mask", 17))
    assert np.array_equal(a.grid, b.grid)


def _is_truncated_rectangle(grid: np.ndarray) -> bool:
    """True iff the set cells are the first k raster cells of their own
    bounding box, which is the shape _block_mask produces."""
    coords = np.argwhere(grid)
    if len(coords) == 0:
        return True
    top, left = coords.min(axis=0)
    bot, right = coords.max(axis=0)
    w = right - left + 1
    box = grid[top : bot + 1, left : right + 1].reshape(-1)
    k = int(box.sum())
    return bool(box[:k].all() and not box[k:].any()) and k == len(coords) and (
        len(coords) >= w or (bot == top)
    )


def test_block_masks_are_contiguous():
    shape = LatticeShape(10, 13)
    for seed in range(40):
        mask = generate_mask(shape, MaskSpec("block", 0.4), substream(seed, "blk"))
        assert _is_truncated_rectangle(mask.grid)


def test_inverse_block_complement_is_block():
    # the kept region of an inverse mask is itself a truncated rectangle
    shape = LatticeShape(9, 9)
    for seed in range(40):
        mask = generate_mask(shape, MaskSpec("inverse_block", 0.65), substream(seed, "inv"))
        assert _is_truncated_rectangle(~mask.grid)


def test_roll_definition_and_inverse():
    grid = np.zeros((5, 7), dtype=bool)
    grid[1, 2] = grid[4, 6] = True
    rolled = roll_mask(PatchMask(grid), (2, 3))
    assert rolled.grid[(1 + 2) % 5, (2 + 3) % 7]
    assert rolled.grid[(4 + 2) % 5, (6 + 3) % 7]
    assert rolled.masked_count == 2
    back = roll_mask(rolled, (-2, -3))
    assert np.array_equal(back.grid, grid)


def test_rolled_inverse_preserves_count_and_mixes_positions():
    shape = LatticeShape(4, 4)
    spec = MaskSpec("inverse_block_roll", 0.65)
    hits = np.zeros(16)
    trials = 3000
    for seed in range(trials):
        mask = generate_mask(shape, spec, substream(seed, "roll"))
        assert mask.masked_count == 10
        hits += mask.grid.reshape(-1)
    freq = hits / trials
    # every cell is masked at close to the overall ratio 10/16
    assert np.abs(freq - 10 / 16).max() < 0.03


def test_extreme_ratios():
    shape = LatticeShape(6, 6)
    for strategy in STRATEGIES:
        rng = substream(0, strategy)
        empty = generate_mask(shape, MaskSpec(strategy, 0.0), rng)
        assert empty.masked_count == 0
        full = generate_mask(shape, MaskSpec(strategy, 1.0), rng)
        assert full.masked_count == 36


def test_coords_accessors_partition_lattice():
    shape = LatticeShape(8, 8)
    mask = generate_mask(shape, MaskSpec("random", 0.65), substream(1, "c"))
    masked = {tuple(c) for c in mask.masked_coords()}
    kept = {tuple(c) for c in mask.kept_coords()}
    assert not masked & kept
    assert len(masked | kept) == 64
    assert all(mask.grid[r, c] for r, c in masked)


def test_sample_prediction_targets():
    shape = LatticeShape(4, 4)
    mask = generate_mask(shape, MaskSpec("inverse_block_roll", 0.65), substream(2, "t"))
    rng = substream(2, "targets")
    coords = sample_prediction_targets(mask, 7, rng)
    assert coords.shape == (7, 2)
    assert len({tuple(c) for c in coords}) == 7
    assert all(mask.grid[r, c] for r, c in coords)
    assert sample_prediction_targets(mask, 0, rng).shape == (0, 2)
    with pytest.raises(ValueError, match="insufficient targets"):
        sample_prediction_targets(mask, 11, rng)


def test_fixture_roundtrip(tmp_path):
    shape = LatticeShape(14, 14)
    spec = MaskSpec("inverse_block_roll", 0.65)
    mask = generate_mask(shape, spec, substream(9, "fix"))
    path = tmp_path / "mask.pmsk"
    save_mask_fixture(path, mask, spec, seed=9)
    loaded, loaded_spec, loaded_seed = load_mask_fixture(path)
    assert np.array_equal(loaded.grid, mask.grid)
    assert loaded_spec == spec
    assert loaded_seed == 9


def test_fixture_rejects_other_files(tmp_path):
    path = tmp_path / "bogus.bin"
    path.write_bytes(b"not a mask at all")
    with pytest.raises(ValueError, match="not a mask fixture"):
        load_mask_fixture(path)
