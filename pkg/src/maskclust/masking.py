"""Patch-lattice mask generation.

Masks live on the patch lattice of a vision transformer: a boolean grid
where True marks a dropped (to-be-predicted) patch. Four strategies are
supported: uniform random, block (inpainting), inverse block (outpainting)
and inverse block with a random circular shift. All strategies produce an
exact masked count of floor(ratio * n), so batches of masks are always
rectangular.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

STRATEGIES = ("random", "block", "inverse_block", "inverse_block_roll")


@dataclass(frozen=True)
class LatticeShape:
    """Patch grid dimensions (rows x cols)."""

    rows: int
    cols: int

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError(
                f"degenerate lattice {self.rows}x{self.cols}: both sides must be >= 1"
            )

    @property
    def n(self) -> int:
        return self.rows * self.cols


@dataclass(frozen=True)
class MaskSpec:
    """Masking strategy and the fraction of patches to drop."""

    strategy: str
    ratio: float

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}, expected one of {STRATEGIES}")
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError(f"ratio must lie in [0, 1], got {self.ratio}")


@dataclass
class PatchMask:
    """Boolean occupancy grid; True = masked/dropped patch."""

    grid: np.ndarray

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=bool)
        if self.grid.ndim != 2:
            raise ValueError(f"mask grid must be 2-D, got shape {self.grid.shape}")

    @property
    def shape(self) -> LatticeShape:
        return LatticeShape(*self.grid.shape)

    @property
    def masked_count(self) -> int:
        return int(self.grid.sum())

    def masked_coords(self) -> np.ndarray:
        """(masked_count, 2) array of (row, col) indices in row-major order."""
        return np.argwhere(self.grid)

    def kept_coords(self) -> np.ndarray:
        """(n - masked_count, 2) array of unmasked (row, col) indices."""
        return np.argwhere(~self.grid)


def _sample_block_rectangle(shape: LatticeShape, target: int, rng: np.random.Generator):
    """Sample an axis-aligned rectangle covering at least ``target`` cells.

    Aspect ratio is log-uniform in [1/2, 2], sides are clamped to the
    lattice and then grown (alternating, where room remains) until the
    rectangle covers the target. Position is uniform over valid placements.
    """
    aspect = np.exp(rng.uniform(np.log(0.5), np.log(2.0)))
    h = int(np.clip(round(np.sqrt(target * aspect)), 1, shape.rows))
    w = int(np.clip(round(np.sqrt(target / aspect)), 1, shape.cols))
    while h * w < target:
        if h < shape.rows and (w >= shape.cols or h <= w):
            h += 1
        elif w < shape.cols:
            w += 1
        else:  # rectangle already fills the lattice
            break
    top = int(rng.integers(0, shape.rows - h + 1))
    left = int(rng.integers(0, shape.cols - w + 1))
    return top, left, h, w


def _block_mask(shape: LatticeShape, target: int, rng: np.random.Generator) -> np.ndarray:
    """Rectangle truncated to exactly ``target`` cells.

    Excess cells are removed from the rectangle's lower-right end in
    row-major order, i.e. the kept cells are the first ``target`` cells of
    the rectangle enumerated row by row.
    """
    grid = np.zeros((shape.rows, shape.cols), dtype=bool)
    if target == 0:
        return grid
    top, left, h, w = _sample_block_rectangle(shape, target, rng)
    keep = min(target, h * w)
    rr, cc = np.divmod(np.arange(keep), w)
    grid[top + rr, left + cc] = True
    return grid


def generate_mask(shape: LatticeShape, spec: MaskSpec, rng: np.random.Generator) -> PatchMask:
    """Generate a patch mask with exactly floor(ratio * n) masked cells.

    Parameters
    ----------
    shape : LatticeShape
        Patch grid dimensions.
    spec : MaskSpec
        Strategy and masking ratio.
    rng : np.random.Generator
        Seeded random source; masks are reproducible from it.

    Returns
    -------
    PatchMask
    """
    n = shape.n
    target = int(np.floor(spec.ratio * n))
    if spec.strategy == "random":
        grid = np.zeros(n, dtype=bool)
        grid[rng.choice(n, size=target, replace=False)] = True
        return PatchMask(grid.reshape(shape.rows, shape.cols))
    if spec.strategy == "block":
        return PatchMask(_block_mask(shape, target, rng))
    if spec.strategy == "inverse_block":
        return PatchMask(~_block_mask(shape, n - target, rng))
    # inverse_block_roll
    grid = ~_block_mask(shape, n - target, rng)
    dr = int(rng.integers(0, shape.rows))
    dc = int(rng.integers(0, shape.cols))
    return roll_mask(PatchMask(grid), (dr, dc))


def roll_mask(mask: PatchMask, shift: tuple[int, int]) -> PatchMask:
    """Circularly shift a mask by (delta_row, delta_col).

    output[r, c] = input[(r - dr) % rows, (c - dc) % cols]; the masked
    count is unchanged.
    """
    return PatchMask(np.roll(mask.grid, shift, axis=(0, 1)))


def sample_prediction_targets(
    mask: PatchMask, n_pred: int, rng: np.random.Generator
) -> np.ndarray:
    """Sample ``n_pred`` distinct masked coordinates, uniformly without replacement.

    Returns an (n_pred, 2) int array of (row, col) pairs. Raises if the
    mask has fewer masked cells than requested.
    """
    coords = mask.masked_coords()
    if n_pred > len(coords):
        raise ValueError(
            f"insufficient targets: requested {n_pred}, mask has {len(coords)} masked cells"
        )
    if n_pred == 0:
        return np.zeros((0, 2), dtype=np.int64)
    idx = rng.choice(len(coords), size=n_pred, replace=False)
    return coords[idx]


# -- fixture serialization ---------------------------------------------------
#
# Masks are stored as a one-line JSON header (rows, cols, strategy, ratio,
# seed) followed by the grid as a packed row-major bit array.

_MAGIC = b"PMSK1\n"


def save_mask_fixture(path, mask: PatchMask, spec: MaskSpec, seed: int) -> None:
    header = {
        "rows": mask.grid.shape[0],
        "cols": mask.grid.shape[1],
        "strategy": spec.strategy,
        "ratio": spec.ratio,
        "seed": seed,
    }
    payload = np.packbits(mask.grid.reshape(-1)).tobytes()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
        fh.write(payload)


def load_mask_fixture(path) -> tuple[PatchMask, MaskSpec, int]:
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError(f"not a mask fixture file: {path}")
        header = json.loads(fh.readline().decode())
        payload = fh.read()
    rows, cols = header["rows"], header["cols"]
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), count=rows * cols)
    mask = PatchMask(bits.astype(bool).reshape(rows, cols))
    return mask, MaskSpec(header["strategy"], header["ratio"]), header["seed"]
