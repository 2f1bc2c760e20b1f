"""
Pillarization of point clouds and the one-layer pillar feature net.

Feature maps are laid out (C, nx, ny): rows index x, columns index y, so the
pillar at cell (ix, iy) is element [:, ix, iy].
"""
import logging
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

import tensor as T
from layers import Linear
from optim import ParamStore
from tensor import Tensor

logger = logging.getLogger(__name__)

GRID_EPS = 1e-6
NUM_POINT_FEATURES = 9

# Voxel path constants; only the pillar backbone is built.
VOXEL_CONFIG = {
    'voxel_size': (0.05, 0.05, 0.1),
    'x_range': (0.0, 70.4),
    'y_range': (-40.0, 40.0),
    'z_range': (-3.0, 1.0),
}


@dataclass(frozen=True)
class BevGrid:
    x_range: Tuple[float, float]
    y_range: Tuple[float, float]
    z_range: Tuple[float, float]
    cell: Tuple[float, float, float]
    nx: int = field(init=False)
    ny: int = field(init=False)

    def __post_init__(self):
        dx, dy, _ = self.cell
        if dx <= 0 or dy <= 0 or self.cell[2] <= 0:
            raise ValueError(f"Cell size must be positive, got {self.cell}")
        for label, (lo, hi), step in (('x', self.x_range, dx), ('y', self.y_range, dy)):
            n = (hi - lo) / step
            if hi <= lo or abs(n - round(n)) > GRID_EPS:
                raise ValueError(f"{label} range {(lo, hi)} is not a whole number of {step} m cells")
        object.__setattr__(self, 'nx', int(round((self.x_range[1] - self.x_range[0]) / dx)))
        object.__setattr__(self, 'ny', int(round((self.y_range[1] - self.y_range[0]) / dy)))

    @classmethod
    def kitti(cls) -> 'BevGrid':
        return cls((0.0, 69.12), (-39.68, 39.68), (-3.0, 1.0), (0.16, 0.16, 4.0))

    @classmethod
    def desk(cls) -> 'BevGrid':
        return cls((0.0, 20.48), (-10.24, 10.24), (-3.0, 1.0), (0.32, 0.32, 4.0))

    @property
    def dx(self) -> float:
        return self.cell[0]

    @property
    def dy(self) -> float:
        return self.cell[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.nx, self.ny

    def downsample(self, stride: int) -> 'BevGrid':
        """Same extent with cells ``stride`` times larger."""
        if self.nx % stride or self.ny % stride:
            raise ValueError(f"Grid {self.shape} does not divide by stride {stride}")
        return BevGrid(self.x_range, self.y_range, self.z_range,
                       (self.dx * stride, self.dy * stride, self.cell[2]))

    def in_range(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points)
        return ((p[:, 0] >= self.x_range[0]) & (p[:, 0] < self.x_range[1])
                & (p[:, 1] >= self.y_range[0]) & (p[:, 1] < self.y_range[1])
                & (p[:, 2] >= self.z_range[0]) & (p[:, 2] < self.z_range[1]))

    def cell_index(self, xy: np.ndarray) -> np.ndarray:
        """Integer (ix, iy) for metric xy (N, 2+); not clipped."""
        xy = np.asarray(xy, dtype=np.float64)
        ix = np.floor((xy[:, 0] - self.x_range[0]) / self.dx).astype(np.int64)
        iy = np.floor((xy[:, 1] - self.y_range[0]) / self.dy).astype(np.int64)
        return np.column_stack([ix, iy])

    def cell_centers(self, ix, iy) -> Tuple[np.ndarray, np.ndarray]:
        return (self.x_range[0] + (np.asarray(ix) + 0.5) * self.dx,
                self.y_range[0] + (np.asarray(iy) + 0.5) * self.dy)

    def to_uv(self, xy: np.ndarray, stride: int = 1) -> np.ndarray:
        """Continuous (row, col) map coordinates with cell centres at integers."""
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        u = (xy[:, 0] - self.x_range[0]) / (self.dx * stride) - 0.5
        v = (xy[:, 1] - self.y_range[0]) / (self.dy * stride) - 0.5
        return np.column_stack([u, v])

    def to_dict(self) -> dict:
        return {'x_range': self.x_range, 'y_range': self.y_range,
                'z_range': self.z_range, 'cell': self.cell}


@dataclass
class PillarBatch:
    """Points grouped by pillar: (P, N, 4) buffers with a validity mask."""
    grid: BevGrid
    points: np.ndarray
    mask: np.ndarray
    coords: np.ndarray
    counts: np.ndarray

    @property
    def num_pillars(self) -> int:
        return int(len(self.coords))


def pillarize(points: np.ndarray, grid: BevGrid, max_points: int = 32) -> PillarBatch:
    """Group in-range points by BEV cell.

    Pillars are ordered by flat cell id; within a pillar the first
    ``max_points`` points in input order are kept.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 4)
    points = points[grid.in_range(points)] if len(points) else points
    if not len(points):
        return PillarBatch(grid, np.zeros((0, max_points, 4)), np.zeros((0, max_points), dtype=bool),
                           np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.int64))
    coords = grid.cell_index(points)
    flat = coords[:, 0] * grid.ny + coords[:, 1]
    order = np.argsort(flat, kind='stable')
    flat_sorted = flat[order]
    cells, starts, totals = np.unique(flat_sorted, return_index=True, return_counts=True)
    rank = np.arange(len(order)) - np.repeat(starts, totals)
    keep = rank < max_points
    pillar_of = np.repeat(np.arange(len(cells)), totals)

    buffers = np.zeros((len(cells), max_points, 4))
    mask = np.zeros((len(cells), max_points), dtype=bool)
    buffers[pillar_of[keep], rank[keep]] = points[order[keep]]
    mask[pillar_of[keep], rank[keep]] = True
    overflow = int((~keep).sum())
    if overflow:
        logger.debug(f"Dropped {overflow} points over the {max_points}-point pillar cap")
    pillar_coords = np.column_stack([cells // grid.ny, cells % grid.ny]).astype(np.int64)
    return PillarBatch(grid, buffers, mask, pillar_coords, np.minimum(totals, max_points))


def augment_points(batch: PillarBatch) -> np.ndarray:
    """(P, N, 9): x, y, z, r, offsets to the pillar mean, offsets to the pillar centre."""
    p, n = batch.mask.shape
    feats = np.zeros((p, n, NUM_POINT_FEATURES))
    if not p:
        return feats
    pts = batch.points
    counts = np.maximum(batch.mask.sum(axis=1), 1)[:, None]
    mean = (pts[..., :3] * batch.mask[..., None]).sum(axis=1) / counts
    cx, cy = batch.grid.cell_centers(batch.coords[:, 0], batch.coords[:, 1])
    feats[..., :4] = pts
    feats[..., 4:7] = pts[..., :3] - mean[:, None, :]
    feats[..., 7] = pts[..., 0] - cx[:, None]
    feats[..., 8] = pts[..., 1] - cy[:, None]
    feats *= batch.mask[..., None]
    return feats


class PillarFeatureNet:
    """Shared linear + ReLU over augmented points, max-pooled per pillar and scattered."""

    def __init__(self, store: ParamStore, channels: int = 64, name: str = 'pfn'):
        self.channels = channels
        self.linear = Linear(store, f'{name}.linear', NUM_POINT_FEATURES, channels)

    def __call__(self, batch: PillarBatch) -> Tensor:
        return pillar_features(batch, self)


def pillar_features(batch: PillarBatch, net: PillarFeatureNet) -> Tensor:
    """BEV pseudo-image (C, nx, ny); empty pillars are zero columns."""
    p, n = batch.mask.shape
    feats = augment_points(batch).reshape(p * n, NUM_POINT_FEATURES)
    h = T.relu(net.linear(T.Tensor(feats)))
    pooled = T.masked_max(T.reshape(h, (p, n, net.channels)), batch.mask)
    return T.scatter_to_grid(pooled, batch.coords, batch.grid.shape)


def feature_stride_for(grid: BevGrid, feature_shape: Tuple[int, int]) -> int:
    stride = grid.nx // feature_shape[0]
    if stride < 1 or grid.nx != stride * feature_shape[0] or grid.ny != stride * feature_shape[1]:
        raise ValueError(f"Feature map {feature_shape} is not an integer stride of grid {grid.shape}")
    return stride
