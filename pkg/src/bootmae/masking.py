"""Patch grids and the random / block-wise masking strategies."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .exceptions import ConfigError, ContractError

Block = Tuple[int, int, int, int]  # top, left, height, width


@dataclass(frozen=True)
class PatchGrid:
    H: int
    W: int
    C: int
    P: int

    def __post_init__(self):
        if self.P <= 0 or self.H % self.P or self.W % self.P:
            raise ConfigError(f"patch size {self.P} must divide image extents {self.H}x{self.W}")

    @property
    def grid_h(self) -> int:
        return self.H // self.P

    @property
    def grid_w(self) -> int:
        return self.W // self.P

    @property
    def N(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def patch_dim(self) -> int:
        return self.P * self.P * self.C


@dataclass
class MaskPlan:
    """Partition of ``N`` patch indices into masked and visible sets.

    ``masked`` is sorted ascending. ``weights`` holds one non-negative loss
    weight per masked index (aligned with ``masked``). ``blocks`` is only
    populated by :func:`block_mask`.
    """

    N: int
    masked: np.ndarray
    weights: Optional[np.ndarray] = None
    blocks: Optional[List[Block]] = None
    grid_shape: Optional[Tuple[int, int]] = None
    visible: np.ndarray = field(init=False)

    def __post_init__(self):
        masked = np.asarray(self.masked, dtype=np.int64)
        if masked.size and (masked.min() < 0 or masked.max() >= self.N):
            raise ContractError(f"masked indices out of range for N={self.N}")
        uniq = np.unique(masked)
        if uniq.size != masked.size:
            raise ContractError("masked indices contain duplicates")
        self.masked = uniq
        keep = np.ones(self.N, dtype=bool)
        keep[uniq] = False
        self.visible = np.flatnonzero(keep)
        if self.weights is None:
            self.weights = np.ones(uniq.size)
        else:
            w = np.asarray(self.weights, dtype=np.float64)
            if w.shape != uniq.shape or (w < 0).any():
                raise ContractError("weights must be non-negative and aligned with masked indices")
            self.weights = w

    @property
    def N_m(self) -> int:
        return int(self.masked.size)

    @property
    def N_v(self) -> int:
        return self.N - self.N_m

    def as_grid(self, grid_h: int, grid_w: int) -> np.ndarray:
        """Boolean ``[grid_h, grid_w]`` map, True where masked."""
        m = np.zeros(self.N, dtype=bool)
        m[self.masked] = True
        return m.reshape(grid_h, grid_w)

    def digest(self) -> str:
        return hashlib.sha1(self.masked.tobytes()).hexdigest()[:12]


def masked_count(N: int, ratio: float) -> int:
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(f"mask ratio must lie in [0, 1], got {ratio}")
    return int(round(ratio * N))


# patchify -------------------------------------------------------------------

def patchify(image: np.ndarray, P: int) -> np.ndarray:
    """``[.., H, W, C]`` -> ``[.., N, P*P*C]`` in row-major patch order."""
    *lead, H, W, C = image.shape
    if H % P or W % P:
        raise ConfigError(f"patch size {P} does not divide {H}x{W}")
    gh, gw = H // P, W // P
    x = image.reshape(*lead, gh, P, gw, P, C)
    n = len(lead)
    x = x.transpose(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    return x.reshape(*lead, gh * gw, P * P * C)


def unpatchify(patches: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Inverse of :func:`patchify`."""
    *lead, N, D = patches.shape
    if N != grid.N or D != grid.patch_dim:
        raise ConfigError(f"patches {patches.shape} do not fit grid {grid}")
    P, C = grid.P, grid.C
    x = patches.reshape(*lead, grid.grid_h, grid.grid_w, P, P, C)
    n = len(lead)
    x = x.transpose(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    return x.reshape(*lead, grid.H, grid.W, C)


# strategies -----------------------------------------------------------------

def random_mask(N: int, ratio: float, rng: np.random.Generator) -> MaskPlan:
    """Mask ``round(ratio * N)`` patches drawn uniformly without replacement."""
    k = masked_count(N, ratio)
    return MaskPlan(N, rng.permutation(N)[:k])


def block_mask(grid_h: int, grid_w: int, ratio: float, min_block: int, max_block: int,
               rng: np.random.Generator, aspect_min: float = 0.3) -> MaskPlan:
    """Union of random rectangles, trimmed to exactly ``round(ratio * N)`` cells.

    Each block has area uniform in ``[min_block, max_block]`` and aspect
    ratio log-uniform in ``[aspect_min, 1 / aspect_min]``; its sides are
    clipped to the grid. Blocks are added until the target count is reached,
    then a uniformly random subset of the last block's new cells is released
    so the count is exact.
    """
    N = grid_h * grid_w
    target = masked_count(N, ratio)
    if min_block < 1 or min_block > max_block or min_block > N:
        raise ConfigError(f"infeasible block bounds [{min_block}, {max_block}] for N={N}")
    if not 0.0 < aspect_min <= 1.0:
        raise ConfigError(f"aspect_min must lie in (0, 1], got {aspect_min}")
    mask = np.zeros((grid_h, grid_w), dtype=bool)
    blocks: List[Block] = []
    log_aspect = (math.log(aspect_min), math.log(1.0 / aspect_min))
    count = 0
    while count < target:
        area = rng.uniform(min_block, max_block)
        aspect = math.exp(rng.uniform(*log_aspect))
        h = min(grid_h, max(1, int(round(math.sqrt(area * aspect)))))
        w = min(grid_w, max(1, int(round(math.sqrt(area / aspect)))))
        top = int(rng.integers(0, grid_h - h + 1))
        left = int(rng.integers(0, grid_w - w + 1))
        region = mask[top:top + h, left:left + w]
        fresh = np.argwhere(~region)
        if fresh.size == 0:
            continue
        excess = count + len(fresh) - target
        if excess > 0:
            drop = rng.choice(len(fresh), size=excess, replace=False)
            fresh = np.delete(fresh, drop, axis=0)
        region[fresh[:, 0], fresh[:, 1]] = True
        count += len(fresh)
        blocks.append((top, left, h, w))
    return MaskPlan(N, np.flatnonzero(mask.reshape(-1)), blocks=blocks,
                    grid_shape=(grid_h, grid_w))


def center_weights(plan: MaskPlan, w_center: float = 1.0) -> MaskPlan:
    """Raise the loss weight of cells lying inside a block's interior.

    A masked cell is interior when it is at least one cell away from the
    boundary of some recorded block; it receives ``w_center``, all other
    masked cells keep weight 1.
    """
    if plan.blocks is None or plan.grid_shape is None:
        raise ContractError("center_weights needs a plan produced by block_mask")
    if w_center < 1:
        raise ConfigError(f"w_center must be >= 1, got {w_center}")
    gh, gw = plan.grid_shape
    interior = np.zeros((gh, gw), dtype=bool)
    for top, left, h, w in plan.blocks:
        if h > 2 and w > 2:
            interior[top + 1:top + h - 1, left + 1:left + w - 1] = True
    inside = interior.reshape(-1)[plan.masked]
    weights = np.where(inside, float(w_center), 1.0)
    return MaskPlan(plan.N, plan.masked, weights=weights, blocks=plan.blocks,
                    grid_shape=plan.grid_shape)


def largest_component(masked_grid: np.ndarray) -> int:
    """Size of the largest 4-connected group of masked cells."""
    labels, n = ndimage.label(masked_grid)
    if n == 0:
        return 0
    return int(np.bincount(labels.reshape(-1))[1:].max())


def make_plan(strategy: str, grid_h: int, grid_w: int, ratio: float, rng: np.random.Generator,
              min_block: int = 16, max_block: int = 60, aspect_min: float = 0.3,
              w_center: float = 1.0) -> MaskPlan:
    """Dispatch on a strategy name (``"random"`` or ``"block"``)."""
    if strategy == "random":
        return random_mask(grid_h * grid_w, ratio, rng)
    if strategy == "block":
        plan = block_mask(grid_h, grid_w, ratio, min_block, max_block, rng, aspect_min)
        return center_weights(plan, w_center) if w_center != 1.0 else plan
    raise ConfigError(f"unknown mask strategy {strategy!r}")


def stack_plans(plans: Sequence[MaskPlan]):
    """Stack equally sized plans into ``(masked, visible, weights)`` arrays."""
    sizes = {p.N_m for p in plans}
    if len(sizes) != 1 or len({p.N for p in plans}) != 1:
        raise ContractError("all plans in a batch must share N and N_m")
    return (np.stack([p.masked for p in plans]),
            np.stack([p.visible for p in plans]),
            np.stack([p.weights for p in plans]))
