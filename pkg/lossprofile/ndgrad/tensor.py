"""逆伝播付きの密配列ノード。

各演算は出力 Tensor に「親ノード」と「勾配を親へ配る関数」を持たせる。
backward() はトポロジカル順に一度ずつノードを訪問する。
"""
from __future__ import annotations

from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import ConfigurationError

MAX_RANK = 4

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def as_array(value, dtype=None) -> np.ndarray:
    """Tensor / 配列 / スカラーを ndarray にそろえる。"""
    if isinstance(value, Tensor):
        value = value.data
    arr = np.asarray(value, dtype=dtype)
    return arr


class Tensor:
    """DenseArray（data）と勾配（grad）と親参照を束ねたノード。"""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(
        self,
        data,
        parents: Tuple["Tensor", ...] = (),
        backward: Optional[BackwardFn] = None,
        requires_grad: bool = False,
        name: Optional[str] = None,
    ):
        arr = np.asarray(data)
        if arr.ndim > MAX_RANK:
            raise ConfigurationError(f"配列の次元は最大 {MAX_RANK} です: shape={arr.shape}")
        if any(extent < 1 for extent in arr.shape):
            raise ConfigurationError(f"空の軸を含む配列は扱えません: shape={arr.shape}")
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self._parents = parents
        self._backward = backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def _topological_order(self) -> List["Tensor"]:
        # 再帰を使わず後順（post-order）で並べる。深いネットでもスタックを溢れさせない
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if id(parent) not in visited and parent.requires_grad:
                    stack.append((parent, False))
        return order

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """このノードを起点に逆伝播する（既存の grad には加算）。"""
        if not self.requires_grad:
            return
        if grad is None:
            if self.data.size != 1:
                raise ConfigurationError(
                    f"スカラー以外の backward には勾配の指定が必要です: shape={self.shape}"
                )
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.dtype)
        if grad.shape != self.shape:
            raise ConfigurationError(f"勾配の形状が一致しません: {grad.shape} != {self.shape}")

        order = self._topological_order()
        pending = {id(node): None for node in order}
        pending[id(self)] = grad
        for node in reversed(order):
            node_grad = pending.pop(id(node))
            if node_grad is None:
                continue
            if node._backward is None:
                # 葉ノード（パラメータ・入力）にだけ勾配を蓄積する
                node.grad = node_grad if node.grad is None else node.grad + node_grad
                continue
            parent_grads = node._backward(node_grad)
            for parent, parent_grad in zip(node._parents, parent_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                current = pending.get(key)
                pending[key] = parent_grad if current is None else current + parent_grad


def parameter(data, name: Optional[str] = None) -> Tensor:
    """学習対象の葉ノードを作る。"""
    return Tensor(np.array(data, copy=True), requires_grad=True, name=name)


def constant(data, dtype=None) -> Tensor:
    return Tensor(as_array(data, dtype=dtype))
