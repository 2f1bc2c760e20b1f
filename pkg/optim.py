"""
Parameter storage, the Adam optimizer, the cosine learning-rate schedule and
the checkpoint archive.
"""
import logging
import math
import os
import zlib
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from tensor import Tensor, default_dtype

logger = logging.getLogger(__name__)


class ParamStore:
    """Named parameters, non-trainable buffers and per-parameter Adam moments.

    Names are unique and shapes are fixed once created. Initial values are
    drawn from a generator keyed on (seed, name), so a parameter's initial
    value does not depend on which other parameters were created before it.
    """

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.params: Dict[str, Tensor] = {}
        self.buffers: Dict[str, np.ndarray] = {}
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.step = 0
        self.frozen: set = set()

    def _rng(self, name: str) -> np.random.Generator:
        return np.random.default_rng([self.seed, zlib.crc32(name.encode('utf-8'))])

    def create(self, name: str, shape: Sequence[int], init: str = 'zeros',
               fan_in: Optional[int] = None, value: float = 0.0) -> Tensor:
        """Register a parameter.

        init: 'zeros', 'ones', 'constant' (``value``) or 'kaiming' (uniform,
        bound sqrt(6 / fan_in)).
        """
        if name in self.params:
            raise ValueError(f"Parameter '{name}' already exists")
        shape = tuple(int(s) for s in shape)
        if init == 'kaiming':
            fan_in = fan_in or int(np.prod(shape[1:]))
            bound = math.sqrt(6.0 / max(fan_in, 1))
            data = self._rng(name).uniform(-bound, bound, size=shape)
        elif init == 'ones':
            data = np.ones(shape)
        elif init == 'constant':
            data = np.full(shape, float(value))
        elif init == 'zeros':
            data = np.zeros(shape)
        else:
            raise ValueError(f"Unknown init '{init}'")
        tensor = Tensor(data.astype(default_dtype()), requires_grad=True, name=name)
        self.params[name] = tensor
        self.m[name] = np.zeros(shape, dtype=tensor.data.dtype)
        self.v[name] = np.zeros(shape, dtype=tensor.data.dtype)
        return tensor

    def create_buffer(self, name: str, data: np.ndarray) -> np.ndarray:
        if name in self.buffers:
            raise ValueError(f"Buffer '{name}' already exists")
        self.buffers[name] = np.array(data, dtype=default_dtype())
        return self.buffers[name]

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self, prefix: str = '') -> List[str]:
        return [n for n in self.params if n.startswith(prefix)]

    def freeze(self, prefix: str) -> int:
        """Exclude every parameter whose name starts with ``prefix`` from updates."""
        names = self.names(prefix)
        self.frozen.update(names)
        return len(names)

    def zero_grad(self) -> None:
        for tensor in self.params.values():
            tensor.grad = None

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.params.values()))


def cosine_lr(base_lr: float, step: int, total_steps: int, min_lr: float = 0.0) -> float:
    """Cosine annealing from ``base_lr`` at step 0 to ``min_lr`` at ``total_steps``."""
    if total_steps <= 0:
        return base_lr
    progress = min(max(step / total_steps, 0.0), 1.0)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * progress))


def adam_step(store: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, names: Optional[Iterable[str]] = None) -> ParamStore:
    """One bias-corrected Adam update over every populated, non-frozen gradient."""
    store.step += 1
    t = store.step
    correction1 = 1.0 - beta1 ** t
    correction2 = 1.0 - beta2 ** t
    for name in (names if names is not None else store.params):
        tensor = store.params[name]
        if tensor.grad is None or name in store.frozen:
            continue
        g = tensor.grad
        store.m[name] = beta1 * store.m[name] + (1.0 - beta1) * g
        store.v[name] = beta2 * store.v[name] + (1.0 - beta2) * g * g
        m_hat = store.m[name] / correction1
        v_hat = store.v[name] / correction2
        tensor.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(tensor.data.dtype)
    return store


# ---------------------------
# Checkpoint archive
# ---------------------------

def _little_endian(array: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(array, dtype=array.dtype.newbyteorder('<'))


def save_checkpoint(store: ParamStore, path: str) -> str:
    """Write every parameter, buffer and Adam moment to a little-endian .npz archive."""
    arrays = {'meta/step': np.array([store.step], dtype='<i8'),
              'meta/seed': np.array([store.seed], dtype='<i8')}
    for name, tensor in store.params.items():
        arrays[f'param/{name}'] = _little_endian(tensor.data)
        arrays[f'adam_m/{name}'] = _little_endian(store.m[name])
        arrays[f'adam_v/{name}'] = _little_endian(store.v[name])
    for name, buf in store.buffers.items():
        arrays[f'buffer/{name}'] = _little_endian(buf)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, 'wb') as fh:
        np.savez(fh, **arrays)
    logger.info(f"Saved checkpoint with {len(store.params)} parameters to {path}")
    return path


def load_checkpoint(store: ParamStore, path: str, strict: bool = True) -> ParamStore:
    """Restore a checkpoint into an already-built store (shapes must match)."""
    with np.load(path) as archive:
        names = set(archive.files)
        for name, tensor in store.params.items():
            key = f'param/{name}'
            if key not in names:
                if strict:
                    raise KeyError(f"Checkpoint {path} has no parameter '{name}'")
                continue
            data = archive[key]
            if data.shape != tensor.shape:
                raise ValueError(f"Shape mismatch for '{name}': {data.shape} vs {tensor.shape}")
            tensor.data = data.astype(tensor.data.dtype)
            store.m[name] = archive[f'adam_m/{name}'].astype(tensor.data.dtype)
            store.v[name] = archive[f'adam_v/{name}'].astype(tensor.data.dtype)
        for name in store.buffers:
            key = f'buffer/{name}'
            if key in names:
                store.buffers[name][...] = archive[key]
            elif strict:
                raise KeyError(f"Checkpoint {path} has no buffer '{name}'")
        store.step = int(archive['meta/step'][0])
    logger.info(f"Loaded checkpoint {path} at step {store.step}")
    return store
