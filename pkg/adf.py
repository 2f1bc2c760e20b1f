"""
Attention-based densification fusion.

The shape heatmap is concatenated with the backbone features and densified by
two conv layers into F_id. Channel attention M_c and grid attention M_g are
both computed from F_id and applied together: F_adf = M_g ⊗ M_c ⊗ F_id.
"""
import logging

import tensor as T
from layers import MLP, Conv2d, ConvBnRelu
from optim import ParamStore
from tensor import Tensor

logger = logging.getLogger(__name__)


class AdfModule:
    def __init__(self, store: ParamStore, in_channels: int, channels: int,
                 reduction: int = 8, kernel: int = 7, name: str = 'adf'):
        self.channels = channels
        self.densify = [ConvBnRelu(store, f'{name}.densify.0', in_channels, channels, 3),
                        ConvBnRelu(store, f'{name}.densify.1', channels, channels, 3)]
        # One MLP instance serves both the avg and the max descriptor.
        self.shared_mlp = MLP(store, f'{name}.channel_mlp', [channels, max(channels // reduction, 1), channels])
        self.grid_conv = Conv2d(store, f'{name}.grid_conv', 2, 1, kernel, pad=kernel // 2)

    def __call__(self, f_b: Tensor, heatmap: Tensor, training: bool = True) -> Tensor:
        f_id = densify(f_b, heatmap, self, training)
        return adf_fuse(f_id, channel_attention(f_id, self), grid_attention(f_id, self))


def align_heatmap(heatmap: Tensor, spatial_shape) -> Tensor:
    """Average-pool the heatmap down to ``spatial_shape`` when strides differ."""
    heatmap = T.as_tensor(heatmap)
    h, w = heatmap.shape[1:]
    th, tw = spatial_shape
    if (h, w) == (th, tw):
        return heatmap
    if h % th or w % tw or h // th != w // tw:
        raise ValueError(f"Heatmap {(h, w)} cannot be pooled onto features {(th, tw)}")
    return T.avg_pool2d(heatmap, h // th)


def concat_heatmap(f_b: Tensor, heatmap: Tensor) -> Tensor:
    """F_c = concat(F_b, Ŝ_BEV) with Ŝ_BEV resampled to F_b's grid."""
    return T.concat_channels([f_b, align_heatmap(heatmap, f_b.shape[1:])])


def densify(f_b: Tensor, heatmap: Tensor, module: AdfModule, training: bool = True) -> Tensor:
    h = concat_heatmap(f_b, heatmap)
    for layer in module.densify:
        h = layer(h, training)
    return h


def channel_attention(f_id: Tensor, module: AdfModule) -> Tensor:
    """M_c (C, 1, 1) = σ(MLP(avgpool F_id) + MLP(maxpool F_id))."""
    avg, mx = T.pooled_descriptors(f_id)
    c = f_id.shape[0]
    logits = module.shared_mlp(T.reshape(avg, (1, c))) + module.shared_mlp(T.reshape(mx, (1, c)))
    return T.reshape(T.sigmoid(logits), (c, 1, 1))


def grid_attention(f_id: Tensor, module: AdfModule) -> Tensor:
    """M_g (1, H, W) = σ(conv7×7([channel-avg; channel-max]))."""
    avg, mx = T.channel_pool(f_id)
    h, w = f_id.shape[1:]
    stacked = T.concat([T.reshape(avg, (1, h, w)), T.reshape(mx, (1, h, w))], axis=0)
    return T.sigmoid(module.grid_conv(stacked))


def adf_fuse(f_id: Tensor, m_c, m_g) -> Tensor:
    """M_g ⊗ M_c ⊗ F_id, broadcasting the masks over their missing axes."""
    return T.mul(m_g, T.mul(m_c, f_id))
