"""
KITTI-format I/O, the synthetic occlusion-scene generator and training-time
augmentation.

Datasets use the KITTI layout (velodyne/, label_2/, calib/, ImageSets/).
Synthetic frames are written in the same layout with a canonical calibration
and -1 placeholders in the 2D box fields, which is how they are recognised
when difficulty levels are assigned.
"""
import logging
import math
import os
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import DataError
from geometry import (ANCHOR_SIZES, Box3D, ScoredBox, box_corners_3d, boxes_to_array,
                      iou_matrix, normalize_angle, points_in_box, rotate_z, to_box_frame)
from shape_labels import ShapeBank, ShapeBankEntry

logger = logging.getLogger(__name__)

POINT_BYTES = 16
LABEL_FIELDS = 15
RESULT_FIELDS = 16
GROUND_Z = -1.73
PLACEHOLDER_BBOX = (-1.0, -1.0, -1.0, -1.0)
PLACEHOLDER_ALPHA = -10.0


# ---------------------------
# Frames and labels
# ---------------------------

@dataclass
class ObjectLabel:
    class_name: str
    box: Box3D
    truncated: float = 0.0
    occluded: int = 0
    alpha: float = PLACEHOLDER_ALPHA
    bbox: Tuple[float, float, float, float] = PLACEHOLDER_BBOX
    score: Optional[float] = None

    @property
    def is_synthetic(self) -> bool:
        return tuple(self.bbox) == PLACEHOLDER_BBOX

    @property
    def bbox_height(self) -> float:
        return float(self.bbox[3] - self.bbox[1])

    @property
    def distance(self) -> float:
        return math.hypot(self.box.x, self.box.y)


@dataclass
class Calibration:
    """P2 (3×4), R0_rect (3×3) and Tr_velo_to_cam (3×4)."""
    P2: np.ndarray
    R0: np.ndarray
    Tr: np.ndarray
    synthetic: bool = False

    @classmethod
    def canonical(cls) -> 'Calibration':
        """Pure axis swap: x_cam = -y_lidar, y_cam = -z_lidar, z_cam = x_lidar."""
        tr = np.array([[0.0, -1.0, 0.0, 0.0], [0.0, 0.0, -1.0, 0.0], [1.0, 0.0, 0.0, 0.0]])
        p2 = np.array([[721.5377, 0.0, 609.5593, 0.0], [0.0, 721.5377, 172.854, 0.0], [0.0, 0.0, 1.0, 0.0]])
        return cls(p2, np.eye(3), tr, synthetic=True)

    def _velo_to_rect(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :4] = self.Tr
        r = np.eye(4)
        r[:3, :3] = self.R0
        return r @ m

    def lidar_to_rect(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        hom = np.column_stack([pts, np.ones(len(pts))])
        return (hom @ self._velo_to_rect().T)[:, :3]

    def rect_to_lidar(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        hom = np.column_stack([pts, np.ones(len(pts))])
        return (hom @ np.linalg.inv(self._velo_to_rect()).T)[:, :3]

    def rect_to_image(self, pts: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Pixel coordinates (N, 2) and depths (N,)."""
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        hom = np.column_stack([pts, np.ones(len(pts))]) @ self.P2.T
        depth = hom[:, 2]
        return hom[:, :2] / np.where(np.abs(depth) < 1e-9, 1e-9, depth)[:, None], depth


@dataclass
class Frame:
    frame_id: str
    points: np.ndarray
    objects: List[ObjectLabel] = field(default_factory=list)
    dontcare: List[ObjectLabel] = field(default_factory=list)
    calib: Optional[Calibration] = None

    def boxes(self, class_names: Optional[Sequence[str]] = None) -> np.ndarray:
        return boxes_to_array([o.box for o in self.objects
                               if class_names is None or o.class_name in class_names])

    def class_ids(self, class_names: Sequence[str]) -> np.ndarray:
        return np.array([list(class_names).index(o.class_name) for o in self.objects
                         if o.class_name in class_names], dtype=np.int64)


def occlusion_level(fraction: float) -> int:
    """KITTI occluded code for a synthetic occlusion fraction."""
    if fraction < 0.2:
        return 0
    if fraction < 0.5:
        return 1
    return 2


# ---------------------------
# Velodyne
# ---------------------------

def read_velodyne(path: str) -> np.ndarray:
    """(N, 4) float32 x, y, z, reflectance from a little-endian binary scan."""
    if not os.path.exists(path):
        raise DataError(f"Velodyne file not found: {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % POINT_BYTES:
        offset = raw.size - raw.size % POINT_BYTES
        raise DataError(f"{path}: truncated point record at byte offset {offset} "
                        f"(file is {raw.size} bytes)")
    return raw.view('<f4').reshape(-1, 4).astype(np.float32)


def write_velodyne(path: str, points: np.ndarray) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    np.ascontiguousarray(np.asarray(points).reshape(-1, 4), dtype='<f4').tofile(path)
    return path


# ---------------------------
# Calibration
# ---------------------------

def read_calib(path: str) -> Calibration:
    if not os.path.exists(path):
        raise DataError(f"Calibration file not found: {path}")
    values: Dict[str, np.ndarray] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            key, sep, rest = line.partition(':')
            if not sep:
                raise DataError(f"{path}:{lineno}: expected 'KEY: values'")
            try:
                values[key.strip()] = np.array([float(v) for v in rest.split()])
            except ValueError as e:
                raise DataError(f"{path}:{lineno}: {e}") from e
    try:
        calib = Calibration(values['P2'].reshape(3, 4), values['R0_rect'].reshape(3, 3),
                            values['Tr_velo_to_cam'].reshape(3, 4))
    except KeyError as e:
        raise DataError(f"{path}: missing calibration entry {e}") from e
    except ValueError as e:
        raise DataError(f"{path}: malformed calibration matrix: {e}") from e
    return calib


def write_calib(path: str, calib: Calibration) -> str:
    def fmt(m):
        return ' '.join(f'{v:.12e}' for v in np.asarray(m).ravel())
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'w') as fh:
        for name in ('P0', 'P1', 'P2', 'P3'):
            fh.write(f'{name}: {fmt(calib.P2)}\n')
        fh.write(f'R0_rect: {fmt(calib.R0)}\n')
        fh.write(f'Tr_velo_to_cam: {fmt(calib.Tr)}\n')
        fh.write(f'Tr_imu_to_velo: {fmt(np.eye(4)[:3])}\n')
    return path


# ---------------------------
# Labels and results
# ---------------------------

def camera_to_lidar_box(h: float, w: float, l: float, loc: Sequence[float], ry: float,
                        calib: Calibration) -> Box3D:
    """KITTI camera box (bottom-centre location) → LiDAR-frame Box3D."""
    centre_cam = np.array([loc[0], loc[1] - h / 2.0, loc[2]])
    centre = calib.rect_to_lidar(centre_cam)[0]
    return Box3D(centre[0], centre[1], centre[2], l, w, h, -ry - math.pi / 2)


def lidar_to_camera_box(box: Box3D, calib: Calibration) -> Tuple[np.ndarray, float]:
    """(bottom-centre location in the rectified camera frame, ry)."""
    centre = calib.lidar_to_rect(np.array([box.x, box.y, box.z]))[0]
    return np.array([centre[0], centre[1] + box.h / 2.0, centre[2]]), float(normalize_angle(-box.theta - math.pi / 2))


def parse_label_line(line: str, calib: Calibration, where: str = '', result: bool = False) -> ObjectLabel:
    """Ground-truth lines have exactly 15 fields; result lines may add a 16th score column."""
    fields_ = line.split()
    allowed = (LABEL_FIELDS, RESULT_FIELDS) if result else (LABEL_FIELDS,)
    if len(fields_) not in allowed:
        expected = ' or '.join(str(n) for n in allowed)
        raise DataError(f"{where}: expected {expected} fields, got {len(fields_)}")
    try:
        nums = [float(v) for v in fields_[1:]]
    except ValueError as e:
        raise DataError(f"{where}: {e}") from e
    truncated, occluded, alpha = nums[0], int(nums[1]), nums[2]
    bbox = tuple(nums[3:7])
    h, w, l = nums[7:10]
    loc = nums[10:13]
    ry = nums[13]
    score = nums[14] if len(nums) > 14 else None
    if fields_[0] == 'DontCare':
        box = Box3D(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    else:
        box = camera_to_lidar_box(h, w, l, loc, ry, calib)
    return ObjectLabel(fields_[0], box, truncated, occluded, alpha, bbox, score)


def read_labels(path: str, calib: Optional[Calibration] = None,
                result: bool = False) -> Tuple[List[ObjectLabel], List[ObjectLabel]]:
    """(objects, dontcare regions) with boxes in the LiDAR frame."""
    if not os.path.exists(path):
        raise DataError(f"Label file not found: {path}")
    calib = calib or Calibration.canonical()
    objects, dontcare = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            label = parse_label_line(line, calib, f"{path}:{lineno}", result=result)
            (dontcare if label.class_name == 'DontCare' else objects).append(label)
    return objects, dontcare


def project_bbox(box: Box3D, calib: Calibration) -> Tuple[Tuple[float, float, float, float], float]:
    """Image-plane 2D box of the projected corners and the observation angle alpha."""
    if calib.synthetic:
        return PLACEHOLDER_BBOX, PLACEHOLDER_ALPHA
    corners = calib.lidar_to_rect(box_corners_3d(box.as_array()))
    uv, depth = calib.rect_to_image(corners)
    if np.any(depth <= 0):
        return PLACEHOLDER_BBOX, PLACEHOLDER_ALPHA
    loc, ry = lidar_to_camera_box(box, calib)
    alpha = float(normalize_angle(ry - math.atan2(loc[0], loc[2])))
    return (float(uv[:, 0].min()), float(uv[:, 1].min()), float(uv[:, 0].max()), float(uv[:, 1].max())), alpha


def format_label_line(label: ObjectLabel, calib: Calibration) -> str:
    """One KITTI line; a 16th score column is written when ``label.score`` is set."""
    if label.class_name == 'DontCare':
        loc, ry, dims = np.array([-1000.0, -1000.0, -1000.0]), -10.0, (-1.0, -1.0, -1.0)
    else:
        loc, ry = lidar_to_camera_box(label.box, calib)
        dims = (label.box.h, label.box.w, label.box.l)
    parts = [label.class_name, f'{label.truncated:.2f}', f'{int(label.occluded)}', f'{label.alpha:.2f}']
    parts += [f'{v:.2f}' for v in label.bbox]
    parts += [f'{v:.2f}' for v in dims]
    parts += [f'{v:.2f}' for v in loc]
    parts.append(f'{ry:.2f}')
    if label.score is not None:
        parts.append(f'{label.score:.4f}')
    return ' '.join(parts)


def write_labels(path: str, labels: Sequence[ObjectLabel], calib: Optional[Calibration] = None) -> str:
    calib = calib or Calibration.canonical()
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'w') as fh:
        for label in labels:
            fh.write(format_label_line(label, calib) + '\n')
    return path


def detection_to_label(det: ScoredBox, class_names: Sequence[str], calib: Calibration) -> ObjectLabel:
    bbox, alpha = project_bbox(det.box, calib)
    return ObjectLabel(class_names[det.class_id], det.box, 0.0, 0, alpha, bbox, float(det.score))


def write_results(path: str, dets: Sequence[ScoredBox], class_names: Sequence[str],
                  calib: Optional[Calibration] = None) -> str:
    """KITTI result file: label lines with a trailing score."""
    calib = calib or Calibration.canonical()
    return write_labels(path, [detection_to_label(d, class_names, calib) for d in dets], calib)


# ---------------------------
# Dataset directories
# ---------------------------

class KittiDataset:
    """Frames under ``root`` in the KITTI layout; ``split`` names an ImageSets file."""

    def __init__(self, root: str, split: Optional[str] = None):
        if os.path.isdir(os.path.join(root, 'training', 'velodyne')):
            root = os.path.join(root, 'training')
        self.root = root
        if not os.path.isdir(os.path.join(root, 'velodyne')):
            raise DataError(f"No velodyne/ directory under {root}")
        split_file = os.path.join(root, 'ImageSets', f'{split}.txt') if split else None
        if split_file and os.path.exists(split_file):
            with open(split_file) as fh:
                self.frame_ids = [line.strip() for line in fh if line.strip()]
        elif split_file and split not in ('all',):
            raise DataError(f"Split file not found: {split_file}")
        else:
            self.frame_ids = sorted(os.path.splitext(f)[0] for f in os.listdir(os.path.join(root, 'velodyne'))
                                    if f.endswith('.bin'))
        logger.info(f"Dataset {root} ({split or 'all'}): {len(self.frame_ids)} frames")

    def __len__(self) -> int:
        return len(self.frame_ids)

    def path(self, kind: str, frame_id: str) -> str:
        ext = '.bin' if kind == 'velodyne' else '.txt'
        return os.path.join(self.root, kind, f'{frame_id}{ext}')

    def load_frame(self, frame_id: str) -> Frame:
        calib_path = self.path('calib', frame_id)
        calib = read_calib(calib_path) if os.path.exists(calib_path) else Calibration.canonical()
        if calib.Tr.tolist() == Calibration.canonical().Tr.tolist():
            calib.synthetic = True
        points = read_velodyne(self.path('velodyne', frame_id))
        label_path = self.path('label_2', frame_id)
        objects, dontcare = read_labels(label_path, calib) if os.path.exists(label_path) else ([], [])
        return Frame(frame_id, points, objects, dontcare, calib)

    def __iter__(self):
        for frame_id in self.frame_ids:
            yield self.load_frame(frame_id)


def save_frame(root: str, frame: Frame) -> None:
    calib = frame.calib or Calibration.canonical()
    write_velodyne(os.path.join(root, 'velodyne', f'{frame.frame_id}.bin'), frame.points)
    write_labels(os.path.join(root, 'label_2', f'{frame.frame_id}.txt'), frame.objects + frame.dontcare, calib)
    write_calib(os.path.join(root, 'calib', f'{frame.frame_id}.txt'), calib)


def write_split(root: str, split: str, frame_ids: Sequence[str]) -> str:
    path = os.path.join(root, 'ImageSets', f'{split}.txt')
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, 'w') as fh:
        fh.write(''.join(f'{fid}\n' for fid in frame_ids))
    return path


# ---------------------------
# Synthetic scenes
# ---------------------------

OCCLUDER_POLICIES = ('none', 'between', 'random')


@dataclass
class SynthSceneCfg:
    seed: int = 0
    class_name: str = 'Car'
    num_objects: Tuple[int, int] = (3, 8)
    size_std: float = 0.05
    x_range: Tuple[float, float] = (0.0, 20.48)
    y_range: Tuple[float, float] = (-10.24, 10.24)
    min_range: float = 4.0
    max_range: float = 60.0
    azimuth_res_deg: float = 0.2
    rings: int = 26
    elevation_deg: Tuple[float, float] = (-24.9, 2.0)
    occluder_policy: str = 'between'
    occluder_prob: float = 0.6
    occluder_size: Tuple[Tuple[float, float], Tuple[float, float], Tuple[float, float]] = (
        (0.8, 2.5), (0.4, 1.2), (1.2, 2.2))
    ground: bool = True
    bank_points: int = 600

    def __post_init__(self):
        if self.occluder_policy not in OCCLUDER_POLICIES:
            raise ValueError(f"occluder_policy must be one of {OCCLUDER_POLICIES}")


def lidar_rays(cfg: SynthSceneCfg) -> np.ndarray:
    """Unit directions (R, 3) over the azimuths spanned by the scene area and ``rings`` elevations."""
    corners = np.array([[x, y] for x in cfg.x_range for y in cfg.y_range])
    angles = np.arctan2(corners[:, 1], np.maximum(corners[:, 0], 1e-6))
    lo, hi = angles.min(), angles.max()
    step = math.radians(cfg.azimuth_res_deg)
    azimuth = np.arange(lo, hi + step / 2, step)
    elevation = np.radians(np.linspace(cfg.elevation_deg[0], cfg.elevation_deg[1], cfg.rings))
    az, el = np.meshgrid(azimuth, elevation, indexing='ij')
    return np.column_stack([(np.cos(el) * np.cos(az)).ravel(),
                            (np.cos(el) * np.sin(az)).ravel(),
                            np.sin(el).ravel()])


def ray_box_distance(rays: np.ndarray, box: np.ndarray) -> np.ndarray:
    """Entry distance of rays from the origin into an oriented box (slab test); inf on a miss."""
    origin = rotate_z(-box[None, :3], -box[6])[0]
    dirs = rotate_z(rays, -box[6])
    half = box[3:6] / 2.0
    with np.errstate(divide='ignore', invalid='ignore'):
        inv = 1.0 / dirs
        t1 = (-half - origin) * inv
        t2 = (half - origin) * inv
    t_near = np.nanmax(np.minimum(t1, t2), axis=1)
    t_far = np.nanmin(np.maximum(t1, t2), axis=1)
    hit = (t_near <= t_far) & (t_near > 0)
    return np.where(hit, t_near, np.inf)


def cast(rays: np.ndarray, boxes: np.ndarray, ground: bool, max_range: float) -> Tuple[np.ndarray, np.ndarray]:
    """First-hit distance per ray and the index of what was hit (-1 ground, -2 nothing)."""
    best = np.full(len(rays), np.inf)
    owner = np.full(len(rays), -2, dtype=np.int64)
    if ground:
        with np.errstate(divide='ignore'):
            t = np.where(rays[:, 2] < 0, GROUND_Z / rays[:, 2], np.inf)
        best, owner = t, np.where(np.isfinite(t), -1, -2)
    for i, box in enumerate(boxes):
        t = ray_box_distance(rays, box)
        closer = t < best
        best = np.where(closer, t, best)
        owner = np.where(closer, i, owner)
    far = best > max_range
    best[far] = np.inf
    owner[far] = -2
    return best, owner


def sample_box_surface(size: Sequence[float], count: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform samples over the four sides and the top of a centred box (canonical frame)."""
    l, w, h = size
    faces = np.array([w * h, w * h, l * h, l * h, l * w])
    face = rng.choice(5, size=count, p=faces / faces.sum())
    u = rng.uniform(-0.5, 0.5, size=(count, 3)) * np.array([l, w, h])
    u[face == 0, 0] = l / 2
    u[face == 1, 0] = -l / 2
    u[face == 2, 1] = w / 2
    u[face == 3, 1] = -w / 2
    u[face == 4, 2] = h / 2
    return u


def _sample_size(rng: np.random.Generator, class_name: str, std: float) -> Tuple[float, float, float]:
    l, w, h, _ = ANCHOR_SIZES[class_name]
    scale = 1.0 + rng.normal(0.0, std, size=3)
    return float(l * scale[0]), float(w * scale[1]), float(h * scale[2])


def _fits(candidate: np.ndarray, placed: List[np.ndarray]) -> bool:
    if not placed:
        return True
    return not np.any(iou_matrix(candidate[None], np.stack(placed), 'bev') > 0)


def synth_scene(cfg: SynthSceneCfg, frame_id: str = '000000',
                forced_boxes: Optional[Sequence[Box3D]] = None,
                forced_occluders: Optional[Sequence[Box3D]] = None) -> Tuple[Frame, List[ShapeBankEntry]]:
    """Seeded ray-cast scene with labelled objects, unlabelled occluders and bank samplings.

    ``forced_boxes`` / ``forced_occluders`` replace the random layout.
    """
    rng = np.random.default_rng(cfg.seed)
    rays = lidar_rays(cfg)
    margin = 1.0
    objects: List[np.ndarray] = []
    if forced_boxes is not None:
        objects = [b.as_array() for b in forced_boxes]
    else:
        target = int(rng.integers(cfg.num_objects[0], cfg.num_objects[1] + 1))
        for _ in range(target * 20):
            if len(objects) >= target:
                break
            l, w, h = _sample_size(rng, cfg.class_name, cfg.size_std)
            x = rng.uniform(max(cfg.x_range[0], cfg.min_range) + margin, cfg.x_range[1] - margin)
            y = rng.uniform(cfg.y_range[0] + margin, cfg.y_range[1] - margin)
            box = np.array([x, y, GROUND_Z + h / 2, l, w, h, rng.uniform(-math.pi, math.pi)])
            if _fits(box, objects):
                objects.append(box)

    occluders: List[np.ndarray] = []
    if forced_occluders is not None:
        occluders = [b.as_array() for b in forced_occluders]
    elif cfg.occluder_policy != 'none':
        for obj in objects:
            if rng.uniform() >= cfg.occluder_prob:
                continue
            (l0, l1), (w0, w1), (h0, h1) = cfg.occluder_size
            l, w, h = rng.uniform(l0, l1), rng.uniform(w0, w1), rng.uniform(h0, h1)
            if cfg.occluder_policy == 'between':
                frac = rng.uniform(0.4, 0.75)
                x, y = obj[0] * frac, obj[1] * frac
                yaw = math.atan2(obj[1], obj[0]) + math.pi / 2 + rng.normal(0.0, 0.2)
            else:
                x = rng.uniform(max(cfg.x_range[0], cfg.min_range) / 2, cfg.x_range[1])
                y = rng.uniform(*cfg.y_range)
                yaw = rng.uniform(-math.pi, math.pi)
            box = np.array([x, y, GROUND_Z + h / 2, l, w, h, yaw])
            if _fits(box, objects + occluders):
                occluders.append(box)

    everything = objects + occluders
    dist, owner = cast(rays, everything, cfg.ground, cfg.max_range)
    hit = np.isfinite(dist)
    xyz = rays[hit] * dist[hit, None]
    reflect = np.where(owner[hit] >= len(objects), 0.3, np.where(owner[hit] == -1, 0.1, 0.6))
    reflect = np.clip(reflect + rng.uniform(-0.05, 0.05, size=reflect.shape), 0.0, 1.0)
    points = np.column_stack([xyz, reflect]).astype(np.float32)

    labels: List[ObjectLabel] = []
    bank: List[ShapeBankEntry] = []
    for i, box in enumerate(objects):
        visible = int(np.sum(owner == i))
        alone, _ = cast(rays, [box], False, cfg.max_range)
        full = int(np.isfinite(alone).sum())
        occlusion = 1.0 - visible / full if full else 1.0
        labels.append(ObjectLabel(cfg.class_name, Box3D.from_array(box), 0.0, occlusion_level(occlusion)))
        bank.append(ShapeBankEntry(cfg.class_name, tuple(box[3:6]),
                                   sample_box_surface(box[3:6], cfg.bank_points, rng),
                                   source=f'{frame_id}:{i}'))
    logger.debug(f"Frame {frame_id}: {len(points)} points, {len(objects)} objects, {len(occluders)} occluders")
    return Frame(frame_id, points, labels, [], Calibration.canonical()), bank


# ---------------------------
# Augmentation
# ---------------------------

@dataclass
class AugmentCfg:
    flip_prob: float = 0.5
    rotation: Tuple[float, float] = (-math.pi / 4, math.pi / 4)
    scaling: Tuple[float, float] = (0.95, 1.05)
    gt_samples: int = 5
    gt_attempts: int = 20


def _with_boxes(frame: Frame, boxes: np.ndarray, points: np.ndarray) -> Frame:
    objects = [replace(o, box=Box3D.from_array(b)) for o, b in zip(frame.objects, boxes)]
    return replace(frame, points=points, objects=objects)


def random_flip_along_x(frame: Frame, enable: bool) -> Frame:
    """y → -y and θ → -θ."""
    if not enable:
        return frame
    boxes = frame.boxes()
    points = np.array(frame.points, copy=True)
    boxes[:, 1] = -boxes[:, 1]
    boxes[:, 6] = -boxes[:, 6]
    points[:, 1] = -points[:, 1]
    return _with_boxes(frame, boxes, points)


def global_rotation(frame: Frame, angle: float) -> Frame:
    boxes = frame.boxes()
    points = np.array(frame.points, copy=True)
    points[:, :3] = rotate_z(points[:, :3], angle)
    if len(boxes):
        boxes[:, :3] = rotate_z(boxes[:, :3], angle)
        boxes[:, 6] += angle
    return _with_boxes(frame, boxes, points)


def global_scaling(frame: Frame, scale: float) -> Frame:
    boxes = frame.boxes()
    points = np.array(frame.points, copy=True)
    points[:, :3] *= scale
    boxes[:, :6] *= scale
    return _with_boxes(frame, boxes, points)


def visible_surface(local: np.ndarray, box: np.ndarray) -> np.ndarray:
    """Mask of canonical surface samples whose face looks towards the sensor at the origin."""
    half = box[3:6] / 2.0
    ratio = np.abs(local) / half
    axis = np.argmax(ratio, axis=1)
    normal = np.zeros_like(local)
    normal[np.arange(len(local)), axis] = np.sign(local[np.arange(len(local)), axis])
    sensor = to_box_frame(np.zeros((1, 3)), box)[0]
    return np.einsum('ij,ij->i', normal, sensor - local) > 0


def gt_sample(frame: Frame, bank: ShapeBank, count: int, rng: np.random.Generator,
              x_range: Tuple[float, float], y_range: Tuple[float, float], attempts: int = 20) -> Frame:
    """Inject up to ``count`` bank objects at free positions, keeping their sensor-facing surfaces."""
    if not len(bank) or count <= 0:
        return frame
    placed = [o.box.as_array() for o in frame.objects]
    points = np.asarray(frame.points)
    new_objects = list(frame.objects)
    added = 0
    for _ in range(count * attempts):
        if added >= count:
            break
        entry = bank.entries[int(rng.integers(len(bank)))]
        l, w, h = entry.size
        box = np.array([rng.uniform(x_range[0] + 4.0, x_range[1] - 1.0), rng.uniform(y_range[0] + 1.0, y_range[1] - 1.0),
                        GROUND_Z + h / 2, l, w, h, rng.uniform(-math.pi, math.pi)])
        if not _fits(box, placed):
            continue
        local = entry.points[visible_surface(entry.points, box)]
        world = rotate_z(local, box[6]) + box[:3]
        points = points[~points_in_box(points, box, margin=0.05)] if len(points) else points
        injected = np.column_stack([world, np.full(len(world), 0.6)]).astype(points.dtype if len(points) else np.float32)
        points = np.vstack([points, injected]) if len(points) else injected
        placed.append(box)
        new_objects.append(ObjectLabel(entry.class_name, Box3D.from_array(box), 0.0, 0))
        added += 1
    logger.debug(f"gt-sampling injected {added} objects into frame {frame.frame_id}")
    return replace(frame, points=points, objects=new_objects)


def augment(frame: Frame, rng: np.random.Generator, bank: Optional[ShapeBank] = None,
            cfg: AugmentCfg = None, x_range=(0.0, 20.48), y_range=(-10.24, 10.24)) -> Frame:
    """gt-sampling, then flip, rotation and scaling applied to points and boxes together."""
    cfg = cfg or AugmentCfg()
    if bank is not None:
        frame = gt_sample(frame, bank, cfg.gt_samples, rng, x_range, y_range, cfg.gt_attempts)
    frame = random_flip_along_x(frame, bool(rng.uniform() < cfg.flip_prob))
    frame = global_rotation(frame, float(rng.uniform(*cfg.rotation)))
    frame = global_scaling(frame, float(rng.uniform(*cfg.scaling)))
    return frame


def in_range_objects(frame: Frame, x_range, y_range) -> Frame:
    """Drop labels whose centre left the grid."""
    keep = [o for o in frame.objects
            if x_range[0] <= o.box.x < x_range[1] and y_range[0] <= o.box.y < y_range[1]]
    return replace(frame, objects=keep)
