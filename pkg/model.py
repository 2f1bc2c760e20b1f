"""
The composed detector: pillar features → shape completion → backbone →
fusion → RPN (→ RoI-grid refinement).
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

import adf
import tensor as T
from bev_grid import BevGrid, PillarBatch, PillarFeatureNet, pillarize
from detect import (AssignCfg, RcnnHead, RpnHead, assign_targets, decode_proposals, rcnn_head,
                    rcnn_loss, refine, roi_grid_pool, rpn_loss, sample_proposals, total_loss)
from geometry import ScoredBox, boxes_to_array, make_anchors, nms
from optim import ParamStore
from psc import OccupancyNet, ShapeLossCfg, TopDownBackbone, shape_focal_loss, threshold_heatmap
from tensor import Tensor

logger = logging.getLogger(__name__)

FUSION_MODES = ('none', 'concat', 'adf')
HEATMAP_SOURCES = ('psc', 'gt')


@dataclass
class ModelCfg:
    grid: BevGrid = field(default_factory=BevGrid.desk)
    class_names: Tuple[str, ...] = ('Car',)
    max_points: int = 32
    pfn_channels: int = 16
    use_psc: bool = True
    psc_widths: Tuple[int, ...] = (16, 32, 64)
    psc_up_width: int = 16
    psc_head_width: int = 16
    det_widths: Tuple[int, ...] = (16, 32, 64)
    det_up_width: int = 16
    det_stride: int = 2
    fusion: str = 'adf'
    heatmap_source: str = 'psc'
    adf_channels: int = 32
    adf_reduction: int = 8
    two_stage: bool = False
    rcnn_point_width: int = 8
    rcnn_hidden: Tuple[int, ...] = (64, 64)
    pre_nms_top: int = 512
    nms_thresh: float = 0.7
    proposals: int = 100
    post_nms_thresh: float = 0.1
    score_thresh: float = 0.05
    shape_loss: ShapeLossCfg = field(default_factory=ShapeLossCfg)
    assign: AssignCfg = field(default_factory=AssignCfg)

    def __post_init__(self):
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"fusion must be one of {FUSION_MODES}, got '{self.fusion}'")
        if self.heatmap_source not in HEATMAP_SOURCES:
            raise ValueError(f"heatmap_source must be one of {HEATMAP_SOURCES}, got '{self.heatmap_source}'")
        if self.fusion != 'none' and self.heatmap_source == 'psc' and not self.use_psc:
            raise ValueError("Fusing the PSC heatmap needs use_psc")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


@dataclass
class ForwardOutput:
    y_hat: Optional[Tensor]
    heatmap: Optional[Tensor]
    fused: Tensor
    logits: Tensor
    residuals: Tensor


class BshDet3D:
    """All sub-networks share one ParamStore; parameter names are prefixed per sub-network."""

    def __init__(self, cfg: ModelCfg, seed: int = 0, store: Optional[ParamStore] = None):
        self.cfg = cfg
        self.store = store or ParamStore(seed)
        k = cfg.num_classes
        self.pfn = PillarFeatureNet(self.store, cfg.pfn_channels)
        self.psc = (OccupancyNet(self.store, cfg.pfn_channels, k, cfg.psc_widths, cfg.psc_up_width,
                                 cfg.psc_head_width, grid_shape=cfg.grid.shape)
                    if cfg.use_psc else None)
        self.backbone = TopDownBackbone(self.store, 'backbone', cfg.pfn_channels, cfg.det_widths,
                                        cfg.det_up_width, out_stride=cfg.det_stride)
        if cfg.fusion == 'none':
            self.adf = None
            fused_channels = self.backbone.out_channels
        else:
            self.adf = adf.AdfModule(self.store, self.backbone.out_channels + k, cfg.adf_channels,
                                     cfg.adf_reduction)
            fused_channels = cfg.adf_channels
        self.fused_channels = fused_channels
        self.anchors = make_anchors(cfg.grid, cfg.class_names, stride=cfg.det_stride)
        self.rpn = RpnHead(self.store, fused_channels, self.anchors.num_per_cell)
        self.rcnn = (RcnnHead(self.store, 3 + k + 2 * fused_channels, cfg.rcnn_point_width, cfg.rcnn_hidden)
                     if cfg.two_stage else None)
        logger.info(f"Built model with {self.store.num_parameters()} parameters "
                    f"(fusion={cfg.fusion}, psc={cfg.use_psc}, two_stage={cfg.two_stage})")

    def pillarize(self, points: np.ndarray) -> PillarBatch:
        return pillarize(points, self.cfg.grid, self.cfg.max_points)

    def forward(self, points: np.ndarray, gt_heatmap: Optional[np.ndarray] = None,
                training: bool = True) -> ForwardOutput:
        cfg = self.cfg
        f_p = self.pfn(self.pillarize(points))
        y_hat = self.psc(f_p, training) if self.psc is not None else None
        heatmap = None
        if cfg.heatmap_source == 'gt':
            if gt_heatmap is None:
                raise ValueError("heatmap_source 'gt' needs the ground-truth heatmap")
            heatmap = T.Tensor(gt_heatmap)
        elif y_hat is not None:
            heatmap = threshold_heatmap(y_hat)
        f_b = self.backbone(f_p, training)
        if cfg.fusion == 'none':
            fused = f_b
        elif cfg.fusion == 'concat':
            fused = adf.densify(f_b, heatmap, self.adf, training)
        else:
            fused = self.adf(f_b, heatmap, training)
        logits, residuals = self.rpn(fused)
        return ForwardOutput(y_hat, heatmap, fused, logits, residuals)

    def _levels(self, fused: Tensor) -> List[Tuple[Tensor, int]]:
        stride = self.cfg.det_stride
        h, w = fused.shape[1:]
        if h % 2 or w % 2:
            return [(fused, stride), (fused, stride)]
        return [(fused, stride), (T.avg_pool2d(fused, 2), 2 * stride)]

    def _pool_heatmap(self, out: ForwardOutput) -> Tensor:
        if out.heatmap is not None:
            return out.heatmap
        return T.Tensor(np.zeros((self.cfg.num_classes,) + self.cfg.grid.shape))

    def losses(self, out: ForwardOutput, gt_boxes: np.ndarray, gt_classes: np.ndarray,
               shape_target: Optional[np.ndarray], rng: np.random.Generator) -> Dict[str, Tensor]:
        """Every loss term plus 'total'; L_shape and L_rcnn are 0 when their branch is off."""
        cfg = self.cfg
        targets = assign_targets(self.anchors, gt_boxes, gt_classes, cfg.assign)
        rpn = rpn_loss(out.logits, out.residuals, targets)
        if out.y_hat is not None and shape_target is not None:
            l_shape = shape_focal_loss(out.y_hat, shape_target, cfg.shape_loss)
        else:
            l_shape = T.Tensor(0.0)
        l_rcnn = None
        if self.rcnn is not None:
            proposals = decode_proposals(out.logits, out.residuals, self.anchors, cfg.pre_nms_top,
                                         cfg.nms_thresh, cfg.proposals)
            sample = sample_proposals(boxes_to_array([p.box for p in proposals]), gt_boxes, cfg.assign, rng)
            if len(sample.boxes):
                levels = self._levels(out.fused)
                heat = self._pool_heatmap(out)
                rois = [roi_grid_pool(box, levels, heat, cfg.grid) for box in sample.boxes]
                conf, res = rcnn_head(rois, self.rcnn)
                l_rcnn = rcnn_loss(conf, res, sample, gt_boxes)['rcnn']
            else:
                l_rcnn = T.Tensor(0.0)
        total = total_loss(l_shape, rpn['rpn'], l_rcnn, cfg.shape_loss.lam)
        return {'total': total, 'shape': l_shape, 'rpn': rpn['rpn'], 'rpn_cls': rpn['cls'],
                'rpn_reg': rpn['reg'], 'rcnn': l_rcnn if l_rcnn is not None else T.Tensor(0.0)}

    def predict(self, points: np.ndarray, gt_heatmap: Optional[np.ndarray] = None) -> List[ScoredBox]:
        """Inference with running BatchNorm statistics."""
        cfg = self.cfg
        out = self.forward(points, gt_heatmap, training=False)
        proposals = decode_proposals(out.logits, out.residuals, self.anchors, cfg.pre_nms_top,
                                     cfg.nms_thresh, cfg.proposals, cfg.score_thresh)
        if self.rcnn is None or not proposals:
            return nms(proposals, cfg.post_nms_thresh)
        boxes = boxes_to_array([p.box for p in proposals])
        levels = self._levels(out.fused)
        heat = self._pool_heatmap(out)
        rois = [roi_grid_pool(box, levels, heat, cfg.grid) for box in boxes]
        conf, res = rcnn_head(rois, self.rcnn)
        return refine(boxes, T.sigmoid(conf).data, res.data, [p.class_id for p in proposals], cfg.grid,
                      cfg.post_nms_thresh)

    def heatmap(self, points: np.ndarray) -> Optional[np.ndarray]:
        """Thresholded PSC estimate Ŝ_BEV, or None without PSC."""
        if self.psc is None:
            return None
        f_p = self.pfn(self.pillarize(points))
        return threshold_heatmap(self.psc(f_p, training=False)).data
