"""
Pillar-based shape completion: the occupancy network, its focal loss and the
0.5 threshold that turns the predicted heatmap into the fused shape prior.
"""
import logging
import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

import tensor as T
from errors import NumericError
from layers import Conv2d, ConvBnRelu, TConvBnRelu
from optim import ParamStore
from tensor import Tensor

logger = logging.getLogger(__name__)

PRIOR_PROB = 0.01
HEATMAP_THRESHOLD = 0.5


@dataclass
class ShapeLossCfg:
    alpha: float = 2.0
    beta: float = 4.0
    lam: float = 6.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"Focal exponents must be non-negative, got α={self.alpha}, β={self.beta}")


class _Downsample:
    """kernel = stride conv + BN + ReLU for branches finer than the output stride."""

    def __init__(self, store: ParamStore, name: str, in_channels: int, out_channels: int, stride: int):
        self.block = ConvBnRelu(store, name, in_channels, out_channels, kernel=stride, stride=stride)
        self.block.conv.pad = 0

    def __call__(self, x: Tensor, training: bool = True) -> Tensor:
        return self.block(x, training)


class TopDownBackbone:
    """Three conv blocks at strides 1, 2, 4, each branch resampled to ``out_stride`` and concatenated."""

    def __init__(self, store: ParamStore, name: str, in_channels: int,
                 widths: Sequence[int] = (64, 128, 256), up_width: int = 128,
                 layers_per_block: int = 2, out_stride: int = 1):
        self.out_stride = out_stride
        self.blocks: List[List[ConvBnRelu]] = []
        self.branches = []
        channels, cumulative = in_channels, 1
        for i, width in enumerate(widths):
            stride = 1 if i == 0 else 2
            cumulative *= stride
            block = [ConvBnRelu(store, f'{name}.block{i}.0', channels, width, 3, stride)]
            block += [ConvBnRelu(store, f'{name}.block{i}.{j}', width, width, 3, 1)
                      for j in range(1, layers_per_block)]
            self.blocks.append(block)
            if cumulative >= out_stride:
                if cumulative % out_stride:
                    raise ValueError(f"Block stride {cumulative} is not a multiple of output stride {out_stride}")
                branch = TConvBnRelu(store, f'{name}.up{i}', width, up_width, cumulative // out_stride)
            else:
                if out_stride % cumulative:
                    raise ValueError(f"Output stride {out_stride} is not a multiple of block stride {cumulative}")
                branch = _Downsample(store, f'{name}.up{i}', width, up_width, out_stride // cumulative)
            self.branches.append(branch)
            channels = width
        self.out_channels = up_width * len(widths)
        self.total_stride = cumulative

    def __call__(self, x: Tensor, training: bool = True) -> Tensor:
        outs = []
        for block, branch in zip(self.blocks, self.branches):
            for layer in block:
                x = layer(x, training)
            outs.append(branch(x, training))
        return T.concat_channels(outs)


class OccupancyNet:
    """Top-down backbone + two 3×3 conv/BN/ReLU layers + a 3×3 conv to K logits."""

    def __init__(self, store: ParamStore, in_channels: int, num_classes: int = 1,
                 widths: Sequence[int] = (64, 128, 256), up_width: int = 128,
                 head_width: int = 64, grid_shape: Tuple[int, int] = None, name: str = 'psc'):
        self.name = name
        self.grid_shape = tuple(grid_shape) if grid_shape is not None else None
        self.num_classes = num_classes
        self.backbone = TopDownBackbone(store, f'{name}.backbone', in_channels, widths, up_width)
        self.head = [ConvBnRelu(store, f'{name}.head.0', self.backbone.out_channels, head_width, 3),
                     ConvBnRelu(store, f'{name}.head.1', head_width, head_width, 3)]
        self.out = Conv2d(store, f'{name}.head.out', head_width, num_classes, 3,
                          bias_init=-math.log((1.0 - PRIOR_PROB) / PRIOR_PROB))

    def logits(self, f_p: Tensor, training: bool = True) -> Tensor:
        h = self.backbone(f_p, training)
        for layer in self.head:
            h = layer(h, training)
        return self.out(h)

    def __call__(self, f_p: Tensor, training: bool = True) -> Tensor:
        return psc_forward(f_p, self, training)


def psc_forward(f_p: Tensor, net: OccupancyNet, training: bool = True) -> Tensor:
    """Ŷ (K, nx, ny), sigmoid probabilities on the pillar grid."""
    if net.grid_shape is not None and tuple(f_p.shape[1:]) != net.grid_shape:
        raise ValueError(f"Pillar features {f_p.shape[1:]} do not match the PSC grid {net.grid_shape}")
    return T.sigmoid(net.logits(f_p, training))


def shape_focal_loss(pred: Tensor, target: np.ndarray, cfg: ShapeLossCfg = None) -> Tensor:
    """Penalty-reduced focal loss over the heatmap, normalised by the count of Y = 1 cells."""
    cfg = cfg or ShapeLossCfg()
    target = np.asarray(target, dtype=np.float64)
    if target.shape != pred.shape:
        raise ValueError(f"Heatmap shapes differ: prediction {pred.shape}, target {target.shape}")
    if np.isnan(pred.data).any() or np.isnan(target).any():
        raise NumericError("NaN in shape heatmap prediction or target")
    pos = (target == 1.0).astype(np.float64)
    neg_weight = (1.0 - pos) * np.power(1.0 - target, cfg.beta)
    n = max(float(pos.sum()), 1.0)

    pos_term = T.power(1.0 - pred, cfg.alpha) * T.log(pred) * pos
    neg_term = T.power(pred, cfg.alpha) * T.log(1.0 - pred) * neg_weight
    return T.mul(T.tensor_sum(pos_term + neg_term), -1.0 / n)


def threshold_heatmap(pred, threshold: float = HEATMAP_THRESHOLD) -> Tensor:
    """Ŝ_BEV: values below ``threshold`` zeroed, the rest kept."""
    pred = T.as_tensor(pred)
    return T.mul(pred, (pred.data >= threshold).astype(pred.data.dtype))


def mask_iou(pred: np.ndarray, target: np.ndarray, threshold: float = HEATMAP_THRESHOLD) -> float:
    """IoU of the two maps binarised at ``threshold``; 1.0 when both are empty."""
    a = np.asarray(pred) >= threshold
    b = np.asarray(target) >= threshold
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 1.0
