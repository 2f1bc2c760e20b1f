"""
Ground-truth BEV shape heatmaps.

For every labelled object the visible points are completed with their mirror
image across the heading axis and with the surfaces of the most similar
objects in the shape bank, flattened onto the pillar grid, and spread with a
size-adaptive Gaussian. Objects of one class are merged by element-wise max.
"""
import logging
import math
import struct
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from bev_grid import BevGrid
from errors import DataError
from geometry import Box3D, bev_corners, from_box_frame, points_in_box, to_box_frame

logger = logging.getLogger(__name__)

SIZE_WEIGHT = 1.0
COUNT_WEIGHT = 0.5
ASSEMBLY_MARGIN = 0.05
MIN_OVERLAP = 0.7
SPLAT_SIGMAS = 3.0

HEATMAP_MAGIC = b'BSH1'
HEATMAP_HEADER = struct.Struct('<4sIIIffff')


@dataclass
class ShapeBankEntry:
    """Canonical surface sampling of one object: centred and yaw-aligned."""
    class_name: str
    size: Tuple[float, float, float]
    points: np.ndarray
    entry_id: Optional[int] = None
    source: str = ''

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not len(self.points):
            raise ValueError("Shape bank entries need at least one point")

    @property
    def count(self) -> int:
        return int(len(self.points))


@dataclass
class ShapeBank:
    entries: List[ShapeBankEntry] = field(default_factory=list)

    def add(self, entry: ShapeBankEntry) -> ShapeBankEntry:
        self.entries.append(entry)
        return entry

    def extend(self, entries: Iterable[ShapeBankEntry]) -> None:
        for entry in entries:
            self.add(entry)

    def for_class(self, class_name: Optional[str]) -> List[ShapeBankEntry]:
        if class_name is None:
            return list(self.entries)
        return [e for e in self.entries if e.class_name == class_name]

    def __len__(self) -> int:
        return len(self.entries)


def canonicalize(points: np.ndarray, box: Box3D) -> np.ndarray:
    """Points inside ``box`` expressed in its object frame."""
    box_arr = box.as_array()
    inside = points_in_box(points, box_arr)
    return to_box_frame(np.asarray(points)[inside], box_arr)


def mirror_local(local: np.ndarray) -> np.ndarray:
    """Reflect object-frame points across the heading (x) axis."""
    out = np.array(local, dtype=np.float64, copy=True)
    out[:, 1] = -out[:, 1]
    return out


def _distinct_count(local: np.ndarray) -> int:
    if not len(local):
        return 0
    return int(len(np.unique(np.round(local, 6), axis=0)))


def retrieval_cost(entry: ShapeBankEntry, size: np.ndarray, mirrored_count: int) -> float:
    """w_s·‖(s_entry − s_target)/s_target‖ + w_c·|m − n| / max(m, n, 1)."""
    size_gap = float(np.linalg.norm((np.asarray(entry.size) - size) / size))
    count_gap = abs(mirrored_count - entry.count) / max(mirrored_count, entry.count, 1)
    return SIZE_WEIGHT * size_gap + COUNT_WEIGHT * count_gap


def retrieve_similar(target_points: np.ndarray, box: Box3D, bank: ShapeBank, k: int = 3,
                     class_name: Optional[str] = None) -> Tuple[List[ShapeBankEntry], bool]:
    """Top-k bank entries by ascending similarity cost.

    Returns (entries, short) where ``short`` is True when fewer than ``k``
    candidates exist.
    """
    candidates = bank.for_class(class_name)
    if not candidates:
        raise ValueError("retrieve_similar needs a non-empty shape bank")
    local = canonicalize(target_points, box) if len(target_points) else np.zeros((0, 3))
    mirrored = np.vstack([local, mirror_local(local)])
    m = _distinct_count(mirrored)
    size = np.array([box.l, box.w, box.h])
    costs = np.array([retrieval_cost(e, size, m) for e in candidates])
    order = np.argsort(costs, kind='stable')[:k]
    short = len(candidates) < k
    if short:
        logger.warning(f"Shape bank holds {len(candidates)} candidates, fewer than k={k}")
    return [candidates[i] for i in order], short


def assemble_shape(target_points: np.ndarray, box: Box3D,
                   donors: Sequence[ShapeBankEntry], margin: float = ASSEMBLY_MARGIN) -> np.ndarray:
    """Completed shape S_c in world coordinates (M, 3)."""
    box_arr = box.as_array()
    local = canonicalize(target_points, box) if len(target_points) else np.zeros((0, 3))
    parts = [local, mirror_local(local)]
    size = np.array([box.l, box.w, box.h])
    for donor in donors:
        parts.append(donor.points * (size / np.asarray(donor.size)))
    merged = np.vstack(parts) if parts else np.zeros((0, 3))
    half = size * (1.0 + margin) / 2.0
    merged = merged[np.all(np.abs(merged) <= half, axis=1)]
    return from_box_frame(merged, box_arr) if len(merged) else np.zeros((0, 3))


def compress_to_bev(shape_points: np.ndarray, grid: BevGrid, class_id: int = 0,
                    num_classes: int = 1) -> np.ndarray:
    """Binary occupancy (K, nx, ny): 1 where any point projects into the cell."""
    occ = np.zeros((num_classes,) + grid.shape)
    if len(shape_points):
        idx = grid.cell_index(np.asarray(shape_points)[:, :2])
        ok = (idx[:, 0] >= 0) & (idx[:, 0] < grid.nx) & (idx[:, 1] >= 0) & (idx[:, 1] < grid.ny)
        occ[class_id, idx[ok, 0], idx[ok, 1]] = 1.0
    return occ


def gaussian_radius(det_size: Tuple[float, float], min_overlap: float = MIN_OVERLAP) -> float:
    """Radius (same units as ``det_size``) keeping IoU ≥ ``min_overlap`` with the shifted box."""
    height, width = det_size

    a1 = 1
    b1 = height + width
    c1 = width * height * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 + math.sqrt(b1 ** 2 - 4 * a1 * c1)) / 2

    a2 = 4
    b2 = 2 * (height + width)
    c2 = (1 - min_overlap) * width * height
    r2 = (b2 + math.sqrt(b2 ** 2 - 4 * a2 * c2)) / 2

    a3 = 4 * min_overlap
    b3 = -2 * min_overlap * (height + width)
    c3 = (min_overlap - 1) * width * height
    r3 = (b3 + math.sqrt(b3 ** 2 - 4 * a3 * c3)) / 2
    return min(r1, r2, r3)


def sigma_for_box(box: Box3D, grid: BevGrid) -> float:
    """Splat standard deviation in cells: max(r / 3, 1)."""
    radius = gaussian_radius((box.l / grid.dx, box.w / grid.dy))
    return max(radius / 3.0, 1.0)


def splat_cells(channel: np.ndarray, cells: np.ndarray, sigma: float) -> np.ndarray:
    """Max-combine exp(−d²/2σ²) around every cell in ``cells`` into ``channel`` (in place).

    Support is truncated at 3σ.
    """
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 2)
    if not len(cells):
        return channel
    nx, ny = channel.shape
    reach = int(math.ceil(SPLAT_SIGMAS * sigma))
    x0, x1 = max(cells[:, 0].min() - reach, 0), min(cells[:, 0].max() + reach + 1, nx)
    y0, y1 = max(cells[:, 1].min() - reach, 0), min(cells[:, 1].max() + reach + 1, ny)
    gx, gy = np.meshgrid(np.arange(x0, x1), np.arange(y0, y1), indexing='ij')
    d2 = ((gx[..., None] - cells[:, 0]) ** 2 + (gy[..., None] - cells[:, 1]) ** 2).min(axis=-1)
    values = np.where(d2 <= (SPLAT_SIGMAS * sigma) ** 2, np.exp(-d2 / (2.0 * sigma * sigma)), 0.0)
    np.maximum(channel[x0:x1, y0:y1], values, out=channel[x0:x1, y0:y1])
    return channel


def gaussian_render(occupancy: np.ndarray, boxes: Sequence[Box3D], grid: BevGrid,
                    class_ids: Optional[Sequence[int]] = None) -> np.ndarray:
    """Spread each occupied cell with the σ of the nearest same-class box; clamp to [0, 1]."""
    occupancy = np.asarray(occupancy, dtype=np.float64)
    heat = occupancy.copy()
    class_ids = list(class_ids) if class_ids is not None else [0] * len(boxes)
    for k in range(occupancy.shape[0]):
        cells = np.argwhere(occupancy[k] > 0)
        if not len(cells):
            continue
        own = [b for b, c in zip(boxes, class_ids) if c == k]
        if not own:
            splat_cells(heat[k], cells, 1.0)
            continue
        cx, cy = grid.cell_centers(cells[:, 0], cells[:, 1])
        centres = np.array([[b.x, b.y] for b in own])
        nearest = np.argmin((cx[:, None] - centres[:, 0]) ** 2 + (cy[:, None] - centres[:, 1]) ** 2, axis=1)
        for j, box in enumerate(own):
            splat_cells(heat[k], cells[nearest == j], sigma_for_box(box, grid))
    return np.clip(heat, 0.0, 1.0)


def footprint_cells(box: Box3D, grid: BevGrid) -> np.ndarray:
    """Cells whose centres fall inside the box footprint."""
    corners = bev_corners(box.as_array())
    lo = grid.cell_index(corners.min(axis=0, keepdims=True))[0]
    hi = grid.cell_index(corners.max(axis=0, keepdims=True))[0]
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, [grid.nx - 1, grid.ny - 1])
    if np.any(hi < lo):
        return np.zeros((0, 2), dtype=np.int64)
    gx, gy = np.meshgrid(np.arange(lo[0], hi[0] + 1), np.arange(lo[1], hi[1] + 1), indexing='ij')
    cells = np.column_stack([gx.ravel(), gy.ravel()])
    cx, cy = grid.cell_centers(cells[:, 0], cells[:, 1])
    centres = np.column_stack([cx, cy, np.full(len(cells), box.z)])
    return cells[points_in_box(centres, box)]


@dataclass
class LabelStats:
    objects: int = 0
    empty_objects: int = 0
    short_retrievals: int = 0
    occupied_cells: int = 0


def make_shape_label(points: np.ndarray, objects: Sequence, bank: Optional[ShapeBank], grid: BevGrid,
                     class_names: Sequence[str] = ('Car',), k: int = 3,
                     use_gaussian: bool = True) -> Tuple[np.ndarray, LabelStats]:
    """S_g (K, nx, ny) for one frame.

    ``objects`` carry ``class_name`` and ``box``; objects of other classes are
    skipped. With ``use_gaussian`` False the binary S_2d map is returned.
    """
    heat = np.zeros((len(class_names),) + grid.shape)
    stats = LabelStats()
    points = np.asarray(points, dtype=np.float64).reshape(-1, 4) if len(points) else np.zeros((0, 4))
    for obj in objects:
        if obj.class_name not in class_names:
            continue
        class_id = list(class_names).index(obj.class_name)
        box = obj.box
        stats.objects += 1
        target = points[points_in_box(points, box)] if len(points) else points
        if not len(target):
            stats.empty_objects += 1
            logger.warning(f"{obj.class_name} at ({box.x:.1f}, {box.y:.1f}) has no points; "
                           f"rendering its footprint")
            cells = footprint_cells(box, grid)
        else:
            donors: List[ShapeBankEntry] = []
            if bank is not None and len(bank.for_class(obj.class_name)):
                donors, short = retrieve_similar(target, box, bank, k, obj.class_name)
                stats.short_retrievals += int(short)
            shape = assemble_shape(target, box, donors)
            cells = np.argwhere(compress_to_bev(shape, grid)[0] > 0)
        stats.occupied_cells += len(cells)
        if use_gaussian:
            splat_cells(heat[class_id], cells, sigma_for_box(box, grid))
        elif len(cells):
            heat[class_id, cells[:, 0], cells[:, 1]] = 1.0
    return np.clip(heat, 0.0, 1.0), stats


# ---------------------------
# Heatmap file
# ---------------------------

def write_heatmap(path: str, heat: np.ndarray, grid: BevGrid) -> str:
    """32-byte header (magic, K, H, W, dx, dy, x0, y0) then float32 data, all little-endian."""
    heat = np.asarray(heat)
    if heat.ndim != 3:
        raise ValueError(f"Heatmap must be (K, H, W), got {heat.shape}")
    k, h, w = heat.shape
    header = HEATMAP_HEADER.pack(HEATMAP_MAGIC, k, h, w, grid.dx, grid.dy,
                                 grid.x_range[0], grid.y_range[0])
    with open(path, 'wb') as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(heat, dtype='<f4').tobytes())
    return path


def read_heatmap(path: str) -> Tuple[np.ndarray, dict]:
    with open(path, 'rb') as fh:
        raw = fh.read()
    if len(raw) < HEATMAP_HEADER.size:
        raise DataError(f"{path}: heatmap header truncated at byte {len(raw)}")
    magic, k, h, w, dx, dy, x0, y0 = HEATMAP_HEADER.unpack_from(raw)
    if magic != HEATMAP_MAGIC:
        raise DataError(f"{path}: bad heatmap magic {magic!r}")
    expected = HEATMAP_HEADER.size + 4 * k * h * w
    if len(raw) != expected:
        raise DataError(f"{path}: expected {expected} bytes, file ends at byte {len(raw)}")
    data = np.frombuffer(raw, dtype='<f4', offset=HEATMAP_HEADER.size).reshape(k, h, w).copy()
    return data, {'dx': dx, 'dy': dy, 'x0': x0, 'y0': y0}
