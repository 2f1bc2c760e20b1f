"""
Detection heads and losses.

Stage one is an anchor RPN over the fused BEV map: per anchor a class logit
and seven box residuals, trained with focal classification and smooth-L1
regression. Stage two pools a 6×6×6 lattice inside each proposal from the
fused features and the shape heatmap and predicts an IoU-guided confidence
plus refinement residuals against the proposal.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

import tensor as T
from bev_grid import BevGrid
from errors import NumericError
from geometry import (AnchorSet, Box3D, ScoredBox, decode_boxes, encode_boxes, iou_matrix,
                      nms_indices)
from layers import MLP, Conv2d, Linear
from optim import ParamStore
from tensor import Tensor

logger = logging.getLogger(__name__)

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
SMOOTH_L1_DELTA = 1.0 / 9.0
GRID_SIZE = 6
PRIOR_LOGIT = -float(np.log(99.0))


@dataclass
class AssignCfg:
    pos_iou: float = 0.6
    neg_iou: float = 0.45
    roi_samples: int = 128
    roi_pos_fraction: float = 0.5
    roi_pos_iou: float = 0.55
    roi_neg_iou: float = 0.25

    def __post_init__(self):
        if not self.neg_iou < self.pos_iou:
            raise ValueError(f"neg_iou {self.neg_iou} must be below pos_iou {self.pos_iou}")


@dataclass
class AnchorTargets:
    """labels: 1 positive, 0 negative, -1 ignore; residuals are valid on positives."""
    labels: np.ndarray
    matched: np.ndarray
    residuals: np.ndarray
    max_iou: np.ndarray

    @property
    def num_positive(self) -> int:
        return int((self.labels == 1).sum())


# ---------------------------
# Stage one
# ---------------------------

class RpnHead:
    """1×1 convs: K·A class logits and K·A·7 residuals per cell."""

    def __init__(self, store: ParamStore, in_channels: int, anchors_per_cell: int, name: str = 'rpn'):
        self.anchors_per_cell = anchors_per_cell
        self.cls = Conv2d(store, f'{name}.cls', in_channels, anchors_per_cell, 1, bias_init=PRIOR_LOGIT)
        self.box = Conv2d(store, f'{name}.box', in_channels, anchors_per_cell * 7, 1)

    def __call__(self, features: Tensor) -> Tuple[Tensor, Tensor]:
        """(N,) logits and (N, 7) residuals in anchor order (ix, iy, class, yaw)."""
        c, nx, ny = features.shape
        cls = T.transpose(self.cls(features), (1, 2, 0))
        box = T.transpose(self.box(features), (1, 2, 0))
        n = nx * ny * self.anchors_per_cell
        return T.reshape(cls, (n,)), T.reshape(box, (n, 7))


def assign_targets(anchors: AnchorSet, gt_boxes: np.ndarray, gt_classes: Optional[np.ndarray] = None,
                   cfg: AssignCfg = None) -> AnchorTargets:
    """BEV IoU matching with force-match of each gt's best anchor (lowest index on ties)."""
    cfg = cfg or AssignCfg()
    n = len(anchors.boxes)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 7)
    labels = np.zeros(n, dtype=np.int64)
    matched = np.full(n, -1, dtype=np.int64)
    residuals = np.zeros((n, 7))
    if not len(gt_boxes):
        return AnchorTargets(labels, matched, residuals, np.zeros(n))
    gt_classes = np.zeros(len(gt_boxes), dtype=np.int64) if gt_classes is None else np.asarray(gt_classes)

    ious = iou_matrix(anchors.boxes, gt_boxes, 'bev')
    ious[anchors.class_ids[:, None] != gt_classes[None, :]] = 0.0
    best_gt = np.argmax(ious, axis=1)
    max_iou = ious[np.arange(n), best_gt]
    labels[:] = -1
    labels[max_iou < cfg.neg_iou] = 0
    pos = max_iou >= cfg.pos_iou
    labels[pos] = 1
    matched[pos] = best_gt[pos]

    best_anchor = np.argmax(ious, axis=0)
    for j, a in enumerate(best_anchor):
        if ious[a, j] <= 0:
            logger.debug(f"Ground truth {j} overlaps no anchor")
            continue
        labels[a] = 1
        matched[a] = j

    pos_idx = np.nonzero(labels == 1)[0]
    if len(pos_idx):
        residuals[pos_idx] = encode_boxes(gt_boxes[matched[pos_idx]], anchors.boxes[pos_idx])
    return AnchorTargets(labels, matched, residuals, max_iou)


def sigmoid_focal_loss(logits: Tensor, labels: np.ndarray, alpha: float = FOCAL_ALPHA,
                       gamma: float = FOCAL_GAMMA) -> Tensor:
    """Mean of α(1 − p_t)^γ·(−log p_t) over anchors whose label is not -1."""
    labels = np.asarray(labels)
    valid = (labels >= 0).astype(np.float64)
    y = (labels == 1).astype(np.float64)
    # p_t = σ(±x), so log p_t comes straight from the signed logit.
    signed = T.as_tensor(logits) * (2.0 * y - 1.0)
    p_t = T.sigmoid(signed)
    per_anchor = T.power(1.0 - p_t, gamma) * T.log_sigmoid(signed) * (-alpha * valid)
    return T.mul(T.tensor_sum(per_anchor), 1.0 / max(valid.sum(), 1.0))


def rpn_loss(logits: Tensor, residuals: Tensor, targets: AnchorTargets,
             alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA,
             delta: float = SMOOTH_L1_DELTA) -> Dict[str, Tensor]:
    """{'cls', 'reg', 'rpn', 'no_positives'}; regression is averaged over positive anchors."""
    l_cls = sigmoid_focal_loss(logits, targets.labels, alpha, gamma)
    pos_idx = np.nonzero(targets.labels == 1)[0]
    if len(pos_idx):
        diff = T.take(residuals, pos_idx, axis=0) - targets.residuals[pos_idx]
        l_reg = T.mul(T.tensor_sum(T.smooth_l1(diff, delta)), 1.0 / len(pos_idx))
    else:
        logger.debug("No positive anchors in frame; regression loss is 0")
        l_reg = T.Tensor(0.0)
    return {'cls': l_cls, 'reg': l_reg, 'rpn': l_cls + l_reg, 'no_positives': not len(pos_idx)}


def clip_to_range(boxes: np.ndarray, grid: BevGrid) -> np.ndarray:
    out = np.array(boxes, dtype=np.float64, copy=True).reshape(-1, 7)
    out[:, 0] = np.clip(out[:, 0], grid.x_range[0], grid.x_range[1])
    out[:, 1] = np.clip(out[:, 1], grid.y_range[0], grid.y_range[1])
    return out


def decode_proposals(logits, residuals, anchors: AnchorSet, pre_nms_top: int = 512,
                     nms_thresh: float = 0.7, keep: int = 100,
                     score_thresh: float = 0.0) -> List[ScoredBox]:
    """Top-scoring anchors decoded, clipped to the grid and suppressed per class."""
    scores = T._stable_sigmoid(np.asarray(T.as_tensor(logits).data, dtype=np.float64)).reshape(-1)
    deltas = np.asarray(T.as_tensor(residuals).data, dtype=np.float64).reshape(-1, 7)
    order = np.argsort(-scores, kind='stable')[:pre_nms_top]
    order = order[scores[order] >= score_thresh]
    boxes = clip_to_range(decode_boxes(deltas[order], anchors.boxes[order]), anchors.grid)
    classes = anchors.class_ids[order]

    survivors: List[Tuple[float, int, int]] = []
    for k in np.unique(classes):
        idx = np.nonzero(classes == k)[0]
        for i in nms_indices(boxes[idx], scores[order][idx], nms_thresh):
            survivors.append((-scores[order][idx[i]], int(idx[i]), int(k)))
    survivors.sort()
    return [ScoredBox(Box3D.from_array(boxes[i]), float(-neg), k) for neg, i, k in survivors[:keep]]


# ---------------------------
# Stage two
# ---------------------------

@dataclass
class RoiGrid:
    proposal: np.ndarray
    points: np.ndarray
    features: Tensor = field(repr=False)


def roi_grid_points(box: np.ndarray, size: int = GRID_SIZE) -> np.ndarray:
    """size³ corner-aligned lattice in world coordinates, ordered (i_x, i_y, i_z)."""
    box = np.asarray(box, dtype=np.float64)
    lin = np.linspace(-0.5, 0.5, size)
    gx, gy, gz = np.meshgrid(lin * box[3], lin * box[4], lin * box[5], indexing='ij')
    local = np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()])
    c, s = np.cos(box[6]), np.sin(box[6])
    world = np.empty_like(local)
    world[:, 0] = c * local[:, 0] - s * local[:, 1] + box[0]
    world[:, 1] = s * local[:, 0] + c * local[:, 1] + box[1]
    world[:, 2] = local[:, 2] + box[2]
    return world


def roi_grid_pool(proposal, levels: Sequence[Tuple[Tensor, int]], heatmap: Tensor,
                  grid: BevGrid, size: int = GRID_SIZE) -> RoiGrid:
    """Per lattice point: normalised local position, Ŝ_BEV sample and one sample per F_adf level.

    ``levels`` are (feature map, stride relative to the pillar grid). Points
    that fall off a map read 0.
    """
    box = proposal.as_array() if isinstance(proposal, Box3D) else np.asarray(proposal, dtype=np.float64)
    points = roi_grid_points(box, size)
    # Lattice columns share their BEV position across the size z-levels.
    columns = points[::size, :2]
    repeat = np.repeat(np.arange(len(columns)), size)
    positions = np.column_stack([np.repeat(np.linspace(-0.5, 0.5, size), size * size),
                                 np.tile(np.repeat(np.linspace(-0.5, 0.5, size), size), size),
                                 np.tile(np.linspace(-0.5, 0.5, size), size * size)])
    parts = [T.Tensor(positions), T.take(T.bilinear_sample(heatmap, grid.to_uv(columns, 1)), repeat, 0)]
    for feature, stride in levels:
        parts.append(T.take(T.bilinear_sample(feature, grid.to_uv(columns, stride)), repeat, 0))
    return RoiGrid(box, points, T.concat(parts, axis=1))


class RcnnHead:
    """Point-wise linear, flatten, shared MLP, then confidence and residual branches."""

    def __init__(self, store: ParamStore, point_features: int, point_width: int = 16,
                 hidden: Sequence[int] = (128, 128), size: int = GRID_SIZE, name: str = 'rcnn'):
        self.num_points = size ** 3
        self.point_width = point_width
        self.pointwise = Linear(store, f'{name}.pointwise', point_features, point_width)
        self.shared = MLP(store, f'{name}.shared', [self.num_points * point_width] + list(hidden))
        self.conf = Linear(store, f'{name}.conf', hidden[-1], 1)
        self.reg = Linear(store, f'{name}.reg', hidden[-1], 7)

    def __call__(self, rois: Sequence[RoiGrid]) -> Tuple[Tensor, Tensor]:
        return rcnn_head(rois, self)


def rcnn_head(rois: Sequence[RoiGrid], head: RcnnHead) -> Tuple[Tensor, Tensor]:
    """(R,) IoU-confidence logits and (R, 7) refinement residuals."""
    r = len(rois)
    feats = T.concat([roi.features for roi in rois], axis=0)
    h = T.relu(head.pointwise(feats))
    h = T.reshape(h, (r, head.num_points * head.point_width))
    h = T.relu(head.shared(h))
    return T.reshape(head.conf(h), (r,)), head.reg(h)


def confidence_target(iou) -> np.ndarray:
    """clamp(2·IoU − 0.5, 0, 1)."""
    return np.clip(2.0 * np.asarray(iou, dtype=np.float64) - 0.5, 0.0, 1.0)


@dataclass
class RoiSample:
    boxes: np.ndarray
    ious: np.ndarray
    matched: np.ndarray


def sample_proposals(proposals: np.ndarray, gt_boxes: np.ndarray, cfg: AssignCfg,
                     rng: np.random.Generator, add_gt: bool = True) -> RoiSample:
    """Up to ``roi_samples`` proposals, ``roi_pos_fraction`` of them above ``roi_pos_iou`` (3D)."""
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 7)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 7)
    pool = np.vstack([proposals, gt_boxes]) if add_gt and len(gt_boxes) else proposals
    if not len(pool):
        return RoiSample(np.zeros((0, 7)), np.zeros(0), np.zeros(0, dtype=np.int64))
    if len(gt_boxes):
        ious = iou_matrix(pool, gt_boxes, '3d')
        matched = np.argmax(ious, axis=1)
        best = ious[np.arange(len(pool)), matched]
    else:
        matched = np.full(len(pool), -1, dtype=np.int64)
        best = np.zeros(len(pool))
    fg = np.nonzero(best >= cfg.roi_pos_iou)[0]
    bg = np.nonzero(best < cfg.roi_pos_iou)[0]
    n_fg = min(len(fg), int(round(cfg.roi_samples * cfg.roi_pos_fraction)))
    n_bg = min(len(bg), cfg.roi_samples - n_fg)
    chosen = np.concatenate([rng.choice(fg, n_fg, replace=False) if n_fg else np.zeros(0, dtype=np.int64),
                             rng.choice(bg, n_bg, replace=False) if n_bg else np.zeros(0, dtype=np.int64)])
    chosen = chosen.astype(np.int64)
    return RoiSample(pool[chosen], best[chosen], matched[chosen])


def rcnn_loss(conf_logits: Tensor, residuals: Tensor, sample: RoiSample, gt_boxes: np.ndarray,
              reg_iou: float = 0.55, delta: float = SMOOTH_L1_DELTA) -> Dict[str, Tensor]:
    """{'iou', 'reg', 'rcnn'}: BCE to the IoU-guided target plus smooth-L1 on positives."""
    if np.isnan(conf_logits.data).any():
        raise NumericError("NaN in refinement confidence")
    target = confidence_target(sample.ious)
    r = max(len(target), 1)
    bce = T.log_sigmoid(conf_logits) * target + T.log_sigmoid(-conf_logits) * (1.0 - target)
    l_iou = T.mul(T.tensor_sum(bce), -1.0 / r)
    pos = np.nonzero((sample.ious >= reg_iou) & (sample.matched >= 0))[0]
    if len(pos):
        gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 7)
        goal = encode_boxes(gt_boxes[sample.matched[pos]], sample.boxes[pos])
        diff = T.take(residuals, pos, axis=0) - goal
        l_reg = T.mul(T.tensor_sum(T.smooth_l1(diff, delta)), 1.0 / len(pos))
    else:
        l_reg = T.Tensor(0.0)
    return {'iou': l_iou, 'reg': l_reg, 'rcnn': l_iou + l_reg}


def refine(proposals: np.ndarray, confidence: np.ndarray, residuals: np.ndarray, classes: Sequence[int],
           grid: BevGrid, nms_thresh: float = 0.1) -> List[ScoredBox]:
    """Apply refinement residuals, score by confidence and suppress duplicates."""
    if not len(proposals):
        return []
    boxes = clip_to_range(decode_boxes(residuals, proposals), grid)
    confidence = np.clip(np.asarray(confidence, dtype=np.float64).reshape(-1), 0.0, 1.0)
    keep = nms_indices(boxes, confidence, nms_thresh)
    return [ScoredBox(Box3D.from_array(boxes[i]), float(confidence[i]), int(classes[i])) for i in keep]


def total_loss(l_shape, l_rpn, l_rcnn=None, lam: float = 6.0) -> Tensor:
    """λ·L_shape + L_rpn (+ L_rcnn in two-stage mode)."""
    total = T.mul(T.as_tensor(l_shape), lam) + T.as_tensor(l_rpn)
    if l_rcnn is not None:
        total = total + T.as_tensor(l_rcnn)
    if not np.all(np.isfinite(total.data)):
        raise NumericError(f"Non-finite total loss {total.data}")
    return total
