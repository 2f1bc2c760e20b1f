"""
Oriented-box algebra shared by the detector and the evaluator.

Boxes are (x, y, z, l, w, h, theta) in the LiDAR frame: z is the box centre,
l runs along the heading, theta is the yaw about +Z normalised to (-pi, pi].
Rotated BEV overlap is computed by Sutherland-Hodgman clipping of the two
footprint rectangles followed by the shoelace area.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

CLIP_EPS = 1e-9

# Per-class anchor (l, w, h, z_center) in metres.
ANCHOR_SIZES: Dict[str, Tuple[float, float, float, float]] = {
    'Car': (3.9, 1.6, 1.56, -1.0),
    'Pedestrian': (0.8, 0.6, 1.73, -0.87),
    'Cyclist': (1.76, 0.6, 1.73, -0.87),
}
ANCHOR_YAWS = (0.0, math.pi / 2)


def normalize_angle(theta):
    """Map angles (scalar or array) into (-pi, pi]."""
    return theta - 2.0 * np.pi * np.ceil((theta - np.pi) / (2.0 * np.pi))


@dataclass(frozen=True)
class Box3D:
    x: float
    y: float
    z: float
    l: float
    w: float
    h: float
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, 'theta', float(normalize_angle(float(self.theta))))

    @classmethod
    def from_array(cls, values: Sequence[float]) -> 'Box3D':
        return cls(*(float(v) for v in values[:7]))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.l, self.w, self.h, self.theta], dtype=np.float64)

    @property
    def volume(self) -> float:
        return self.l * self.w * self.h

    def is_valid(self) -> bool:
        return self.l > 0 and self.w > 0 and self.h > 0

    def corners_bev(self) -> np.ndarray:
        return bev_corners(self.as_array())


@dataclass(frozen=True)
class ScoredBox:
    box: Box3D
    score: float
    class_id: int = 0

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"ScoredBox score must lie in [0, 1], got {self.score}")


def boxes_to_array(boxes: Sequence[Box3D]) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 7))
    return np.stack([b.as_array() for b in boxes])


# ---------------------------
# Polygons
# ---------------------------

def bev_corners(box: np.ndarray) -> np.ndarray:
    """Counter-clockwise footprint corners (4, 2) of a (7,) box array."""
    x, y, _, l, w, _, theta = box[:7]
    c, s = math.cos(theta), math.sin(theta)
    local = np.array([[l / 2, w / 2], [-l / 2, w / 2], [-l / 2, -w / 2], [l / 2, -w / 2]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([x, y])


def box_corners_3d(box: np.ndarray) -> np.ndarray:
    """(8, 3) corners; the first four are the bottom face."""
    foot = bev_corners(box)
    z, h = box[2], box[5]
    bottom = np.column_stack([foot, np.full(4, z - h / 2)])
    top = np.column_stack([foot, np.full(4, z + h / 2)])
    return np.vstack([bottom, top])


def polygon_area(poly: np.ndarray) -> float:
    """Shoelace area of an ordered polygon."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _cross(o: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def _line_intersection(p1, p2, a, b) -> np.ndarray:
    d1 = p2 - p1
    d2 = b - a
    denom = d1[0] * d2[1] - d1[1] * d2[0]
    if abs(denom) < CLIP_EPS:
        return p2.copy()
    t = ((a[0] - p1[0]) * d2[1] - (a[1] - p1[1]) * d2[0]) / denom
    return p1 + t * d1


def clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman: part of ``subject`` inside the convex CCW polygon ``clip``."""
    output = [np.asarray(p, dtype=np.float64) for p in subject]
    n = len(clip)
    for i in range(n):
        if not output:
            break
        a, b = clip[i], clip[(i + 1) % n]
        polygon, output = output, []
        prev = polygon[-1]
        prev_in = _cross(a, b, prev) >= -CLIP_EPS
        for cur in polygon:
            cur_in = _cross(a, b, cur) >= -CLIP_EPS
            if cur_in:
                if not prev_in:
                    output.append(_line_intersection(prev, cur, a, b))
                output.append(cur)
            elif prev_in:
                output.append(_line_intersection(prev, cur, a, b))
            prev, prev_in = cur, cur_in
    return np.array(output) if output else np.zeros((0, 2))


def bev_intersection_area(a: np.ndarray, b: np.ndarray) -> float:
    return polygon_area(clip_polygon(bev_corners(a), bev_corners(b)))


# ---------------------------
# IoU
# ---------------------------

def _as_box_array(box) -> np.ndarray:
    return box.as_array() if isinstance(box, Box3D) else np.asarray(box, dtype=np.float64)


def bev_iou(a, b) -> float:
    """Rotated footprint IoU; zero-area boxes give 0."""
    a, b = _as_box_array(a), _as_box_array(b)
    area_a, area_b = a[3] * a[4], b[3] * b[4]
    if area_a <= 0 or area_b <= 0:
        return 0.0
    inter = bev_intersection_area(a, b)
    union = area_a + area_b - inter
    return float(min(max(inter / union, 0.0), 1.0)) if union > 0 else 0.0


def iou3d(a, b) -> float:
    """Footprint intersection × Z overlap over the union volume."""
    a, b = _as_box_array(a), _as_box_array(b)
    vol_a, vol_b = a[3] * a[4] * a[5], b[3] * b[4] * b[5]
    if vol_a <= 0 or vol_b <= 0:
        return 0.0
    z_overlap = min(a[2] + a[5] / 2, b[2] + b[5] / 2) - max(a[2] - a[5] / 2, b[2] - b[5] / 2)
    if z_overlap <= 0:
        return 0.0
    inter = bev_intersection_area(a, b) * z_overlap
    union = vol_a + vol_b - inter
    return float(min(max(inter / union, 0.0), 1.0)) if union > 0 else 0.0


def _near_pairs(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Index pairs whose circumscribed footprint circles touch."""
    ra = 0.5 * np.hypot(a[:, 3], a[:, 4])
    rb = 0.5 * np.hypot(b[:, 3], b[:, 4])
    dist = np.hypot(a[:, None, 0] - b[None, :, 0], a[:, None, 1] - b[None, :, 1])
    return np.nonzero(dist < ra[:, None] + rb[None, :])


def iou_matrix(a: np.ndarray, b: np.ndarray, metric: str = 'bev') -> np.ndarray:
    """Pairwise IoU between box arrays (N, 7) and (M, 7)."""
    if metric not in ('bev', '3d'):
        raise ValueError(f"Unknown IoU metric '{metric}'")
    a = np.asarray(a, dtype=np.float64).reshape(-1, 7)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 7)
    out = np.zeros((len(a), len(b)))
    if not len(a) or not len(b):
        return out
    fn = bev_iou if metric == 'bev' else iou3d
    for i, j in zip(*_near_pairs(a, b)):
        out[i, j] = fn(a[i], b[j])
    return out


# ---------------------------
# NMS
# ---------------------------

def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float,
                metric: str = 'bev') -> List[int]:
    """Greedy suppression; survivors in descending score, ties by lower index."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind='stable')
    ious = iou_matrix(boxes, boxes, metric)
    suppressed = np.zeros(len(boxes), dtype=bool)
    keep: List[int] = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        suppressed |= ious[i] > iou_thresh
    return keep


def nms(dets: Sequence[ScoredBox], iou_thresh: float, metric: str = 'bev') -> List[ScoredBox]:
    if not dets:
        return []
    keep = nms_indices(boxes_to_array([d.box for d in dets]),
                       np.array([d.score for d in dets]), iou_thresh, metric)
    return [dets[i] for i in keep]


# ---------------------------
# Residual codec
# ---------------------------

def encode_boxes(gts: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Residuals (N, 7) of gt boxes against anchors, both (N, 7)."""
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 7)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 7)
    if np.any(gts[:, 3:6] <= 0) or np.any(anchors[:, 3:6] <= 0):
        raise ValueError("encode_boxes needs strictly positive box sizes")
    diag = np.hypot(anchors[:, 3], anchors[:, 4])
    return np.column_stack([
        (gts[:, 0] - anchors[:, 0]) / diag,
        (gts[:, 1] - anchors[:, 1]) / diag,
        (gts[:, 2] - anchors[:, 2]) / anchors[:, 5],
        np.log(gts[:, 3] / anchors[:, 3]),
        np.log(gts[:, 4] / anchors[:, 4]),
        np.log(gts[:, 5] / anchors[:, 5]),
        np.sin(gts[:, 6] - anchors[:, 6]),
    ])


def decode_boxes(residuals: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    residuals = np.asarray(residuals, dtype=np.float64).reshape(-1, 7)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 7)
    diag = np.hypot(anchors[:, 3], anchors[:, 4])
    return np.column_stack([
        residuals[:, 0] * diag + anchors[:, 0],
        residuals[:, 1] * diag + anchors[:, 1],
        residuals[:, 2] * anchors[:, 5] + anchors[:, 2],
        np.exp(residuals[:, 3]) * anchors[:, 3],
        np.exp(residuals[:, 4]) * anchors[:, 4],
        np.exp(residuals[:, 5]) * anchors[:, 5],
        normalize_angle(anchors[:, 6] + np.arcsin(np.clip(residuals[:, 6], -1.0, 1.0))),
    ])


def encode_box(gt: Box3D, anchor: Box3D) -> np.ndarray:
    """(Δx, Δy, Δz, Δl, Δw, Δh, Δθ) of ``gt`` relative to ``anchor``."""
    return encode_boxes(gt.as_array(), anchor.as_array())[0]


def decode_box(residual: Sequence[float], anchor: Box3D) -> Box3D:
    return Box3D.from_array(decode_boxes(np.asarray(residual), anchor.as_array())[0])


# ---------------------------
# Anchors
# ---------------------------

@dataclass
class AnchorSet:
    """Anchors on a feature map of shape (nx, ny), ordered (ix, iy, class, yaw)."""
    grid: object
    class_names: Tuple[str, ...]
    sizes: np.ndarray
    yaws: Tuple[float, ...]
    feature_shape: Tuple[int, int]
    boxes: np.ndarray = field(repr=False)
    class_ids: np.ndarray = field(repr=False)

    @property
    def num_per_cell(self) -> int:
        return len(self.class_names) * len(self.yaws)

    def __len__(self) -> int:
        return len(self.boxes)


def make_anchors(grid, class_names: Sequence[str] = ('Car',), stride: int = 1,
                 sizes: Optional[Dict[str, Tuple[float, float, float, float]]] = None) -> AnchorSet:
    """One anchor per feature cell, class and yaw in ``ANCHOR_YAWS``.

    ``stride`` is the feature-map stride relative to the pillar grid.
    """
    sizes = sizes or ANCHOR_SIZES
    nx, ny = grid.nx // stride, grid.ny // stride
    dx, dy = grid.dx * stride, grid.dy * stride
    cx = grid.x_range[0] + (np.arange(nx) + 0.5) * dx
    cy = grid.y_range[0] + (np.arange(ny) + 0.5) * dy
    table = np.array([sizes[name] for name in class_names], dtype=np.float64)
    k, a = len(class_names), len(ANCHOR_YAWS)

    boxes = np.zeros((nx, ny, k, a, 7))
    boxes[..., 0] = cx[:, None, None, None]
    boxes[..., 1] = cy[None, :, None, None]
    boxes[..., 2] = table[None, None, :, None, 3]
    boxes[..., 3] = table[None, None, :, None, 0]
    boxes[..., 4] = table[None, None, :, None, 1]
    boxes[..., 5] = table[None, None, :, None, 2]
    boxes[..., 6] = np.array(ANCHOR_YAWS)[None, None, None, :]
    class_ids = np.broadcast_to(np.arange(k)[None, None, :, None], (nx, ny, k, a))
    logger.debug(f"Built {nx * ny * k * a} anchors on a {nx}x{ny} feature map")
    return AnchorSet(grid=grid, class_names=tuple(class_names), sizes=table, yaws=ANCHOR_YAWS,
                     feature_shape=(nx, ny), boxes=boxes.reshape(-1, 7),
                     class_ids=class_ids.reshape(-1).copy())


# ---------------------------
# Points and frames
# ---------------------------

def rotate_z(points: np.ndarray, angle: float) -> np.ndarray:
    """Rotate the xy columns of ``points`` counter-clockwise about the origin."""
    c, s = math.cos(angle), math.sin(angle)
    out = np.array(points, dtype=np.float64, copy=True)
    x, y = out[:, 0].copy(), out[:, 1].copy()
    out[:, 0] = c * x - s * y
    out[:, 1] = s * x + c * y
    return out


def to_box_frame(points: np.ndarray, box: np.ndarray) -> np.ndarray:
    """xyz of ``points`` expressed in the box's centred, yaw-aligned frame."""
    local = np.array(points[:, :3], dtype=np.float64, copy=True)
    local -= box[:3]
    return rotate_z(local, -box[6])


def from_box_frame(local: np.ndarray, box: np.ndarray) -> np.ndarray:
    world = rotate_z(np.asarray(local, dtype=np.float64)[:, :3], box[6])
    return world + box[:3]


def points_in_box(points: np.ndarray, box, margin: float = 0.0) -> np.ndarray:
    """Boolean mask of points inside the box, each extent grown by ``margin`` (fraction)."""
    box = _as_box_array(box)
    if len(points) == 0:
        return np.zeros(0, dtype=bool)
    local = to_box_frame(points, box)
    half = box[3:6] * (1.0 + margin) / 2.0
    return np.all(np.abs(local) <= half + CLIP_EPS, axis=1)
