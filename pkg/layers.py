"""
Parameterised building blocks registered in a ParamStore.

A block owns parameter names under its prefix (``<prefix>.weight`` ...) and is
called with its input tensor; BatchNorm blocks also take ``training``.
"""
import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np

import tensor as T
from optim import ParamStore
from tensor import Tensor

logger = logging.getLogger(__name__)


class Conv2d:
    """k×k cross-correlation, Kaiming-uniform weights, optional bias."""

    def __init__(self, store: ParamStore, name: str, in_channels: int, out_channels: int,
                 kernel: int = 3, stride: int = 1, pad: Optional[int] = None,
                 bias: bool = True, bias_init: float = 0.0):
        self.name = name
        self.stride = stride
        self.pad = kernel // 2 if pad is None else pad
        self.weight = store.create(f'{name}.weight', (out_channels, in_channels, kernel, kernel),
                                   init='kaiming', fan_in=in_channels * kernel * kernel)
        self.bias = (store.create(f'{name}.bias', (out_channels,), init='constant', value=bias_init)
                     if bias else None)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class TConv2d:
    """Transposed convolution used to bring strided maps back to full resolution."""

    def __init__(self, store: ParamStore, name: str, in_channels: int, out_channels: int,
                 kernel: int, stride: int, bias: bool = False):
        self.name = name
        self.stride = stride
        self.weight = store.create(f'{name}.weight', (in_channels, out_channels, kernel, kernel),
                                   init='kaiming', fan_in=in_channels * kernel * kernel)
        self.bias = store.create(f'{name}.bias', (out_channels,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.tconv2d(x, self.weight, self.bias, stride=self.stride)


class BatchNorm2d:
    def __init__(self, store: ParamStore, name: str, channels: int, momentum: float = 0.1):
        self.name = name
        self.momentum = momentum
        self.gamma = store.create(f'{name}.gamma', (channels,), init='ones')
        self.beta = store.create(f'{name}.beta', (channels,))
        self.running_mean = store.create_buffer(f'{name}.running_mean', np.zeros(channels))
        self.running_var = store.create_buffer(f'{name}.running_var', np.ones(channels))

    def __call__(self, x: Tensor, training: bool = True) -> Tensor:
        return T.batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                             training=training, momentum=self.momentum)


class ConvBnRelu:
    """conv (no bias) → BatchNorm → ReLU."""

    def __init__(self, store: ParamStore, name: str, in_channels: int, out_channels: int,
                 kernel: int = 3, stride: int = 1):
        self.conv = Conv2d(store, f'{name}.conv', in_channels, out_channels, kernel, stride, bias=False)
        self.bn = BatchNorm2d(store, f'{name}.bn', out_channels)

    def __call__(self, x: Tensor, training: bool = True) -> Tensor:
        return T.relu(self.bn(self.conv(x), training))


class TConvBnRelu:
    def __init__(self, store: ParamStore, name: str, in_channels: int, out_channels: int, stride: int):
        self.tconv = TConv2d(store, f'{name}.tconv', in_channels, out_channels, kernel=stride, stride=stride)
        self.bn = BatchNorm2d(store, f'{name}.bn', out_channels)

    def __call__(self, x: Tensor, training: bool = True) -> Tensor:
        return T.relu(self.bn(self.tconv(x), training))


class Linear:
    """x (N, in) → (N, out)."""

    def __init__(self, store: ParamStore, name: str, in_features: int, out_features: int,
                 bias: bool = True, bias_init: float = 0.0):
        self.weight = store.create(f'{name}.weight', (in_features, out_features),
                                   init='kaiming', fan_in=in_features)
        self.bias = (store.create(f'{name}.bias', (out_features,), init='constant', value=bias_init)
                     if bias else None)

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class MLP:
    """Linear layers of the given widths with ReLU between them."""

    def __init__(self, store: ParamStore, name: str, widths: Sequence[int], bias: bool = True):
        if len(widths) < 2:
            raise ValueError(f"MLP needs at least input and output widths, got {list(widths)}")
        self.layers: List[Linear] = [
            Linear(store, f'{name}.{i}', widths[i], widths[i + 1], bias=bias)
            for i in range(len(widths) - 1)
        ]

    @property
    def params(self) -> List[Tuple[Tensor, Optional[Tensor]]]:
        return [(layer.weight, layer.bias) for layer in self.layers]

    def __call__(self, x: Tensor) -> Tensor:
        return T.mlp(x, self.params)
