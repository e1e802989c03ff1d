"""NetworkParams: 名前付きパラメータと BatchNorm 統計量の集合。"""
from __future__ import annotations

import hashlib
from typing import Dict, Iterator, Mapping, Tuple

import numpy as np

from ..errors import ConfigurationError, PersistenceError
from .ops import BatchNormState
from .optim import AdamState, adam_step
from .tensor import Tensor, parameter


def glorot_kernel(rng: np.random.Generator, out_ch: int, in_ch: int, k: int, dtype=np.float32) -> np.ndarray:
    """一様分布 [-s, s], s = sqrt(6 / (fan_in + fan_out))"""
    fan_in, fan_out = in_ch * k * k, out_ch * k * k
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=(out_ch, in_ch, k, k)).astype(dtype)


def glorot_matrix(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float32) -> np.ndarray:
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=(fan_in, fan_out)).astype(dtype)


class NetworkParams:
    """ネットワーク 1 つ分の学習パラメータ・BatchNorm 状態・Adam 状態"""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.tensors: Dict[str, Tensor] = {}
        self.batchnorms: Dict[str, BatchNormState] = {}
        self.optimizer = AdamState()

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.tensors:
            raise ConfigurationError(f"パラメータ名が重複しています: {name}")
        tensor = parameter(np.asarray(data, dtype=self.dtype), name=name)
        self.tensors[name] = tensor
        return tensor

    def add_batchnorm(self, name: str, channels: int, eps: float, momentum: float) -> BatchNormState:
        state = BatchNormState.fresh(channels, dtype=self.dtype, eps=eps, momentum=momentum)
        self.batchnorms[name] = state
        return state

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self.tensors.items())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def grads(self) -> Dict[str, np.ndarray]:
        return {n: t.grad for n, t in self.tensors.items() if t.grad is not None}

    def step(self) -> None:
        """蓄積済み勾配で Adam を 1 ステップ進め、勾配をクリアする。"""
        adam_step({n: t.data for n, t in self.tensors.items()}, self.grads(), self.optimizer)
        self.zero_grad()

    def arrays(self) -> Dict[str, np.ndarray]:
        out = {f"param/{n}": t.data for n, t in self.tensors.items()}
        for n, bn in self.batchnorms.items():
            out[f"bn/{n}/mean"] = bn.running_mean
            out[f"bn/{n}/var"] = bn.running_var
        return out

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        for n, t in self.tensors.items():
            key = f"param/{n}"
            if key not in arrays:
                raise PersistenceError(f"チェックポイントにパラメータがありません: {key}")
            if arrays[key].shape != t.shape:
                raise PersistenceError(f"パラメータ形状が一致しません: {key} {arrays[key].shape} != {t.shape}")
            t.data = arrays[key].astype(self.dtype, copy=True)
        for n, bn in self.batchnorms.items():
            bn.running_mean = arrays[f"bn/{n}/mean"].astype(self.dtype, copy=True)
            bn.running_var = arrays[f"bn/{n}/var"].astype(self.dtype, copy=True)

    def digest(self) -> str:
        """パラメータ配列の SHA-256（凍結区間の検証用）"""
        h = hashlib.sha256()
        for name in sorted(self.tensors):
            h.update(name.encode("utf-8"))
            h.update(np.ascontiguousarray(self.tensors[name].data).tobytes())
        return h.hexdigest()
