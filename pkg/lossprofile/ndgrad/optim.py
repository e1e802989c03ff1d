"""Adam オプティマイザ（バイアス補正付き）。"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping

import numpy as np

from ..errors import ConfigurationError


@dataclass
class AdamState:
    """パラメータごとの一次・二次モーメントとステップ数"""
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def arrays(self, prefix: str) -> Dict[str, np.ndarray]:
        """チェックポイント用のフラットな配列辞書"""
        out = {f"{prefix}/m/{k}": a for k, a in self.m.items()}
        out.update({f"{prefix}/v/{k}": a for k, a in self.v.items()})
        out[f"{prefix}/step"] = np.asarray([self.step], dtype=np.int64)
        return out

    def load_arrays(self, prefix: str, arrays: Mapping[str, np.ndarray]) -> None:
        self.m = {k[len(prefix) + 3:]: a.copy() for k, a in arrays.items() if k.startswith(f"{prefix}/m/")}
        self.v = {k[len(prefix) + 3:]: a.copy() for k, a in arrays.items() if k.startswith(f"{prefix}/v/")}
        step_key = f"{prefix}/step"
        self.step = int(arrays[step_key][0]) if step_key in arrays else 0


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
) -> None:
    """params をその場で更新する。

    grads に無いパラメータと勾配がすべて 0 のパラメータは値もモーメントも変えない。
    更新対象が 1 つも無ければステップ数も進めない。
    """
    for name, g in grads.items():
        if name not in params:
            raise ConfigurationError(f"未知のパラメータへの勾配です: {name}")
        if g.shape != params[name].shape:
            raise ConfigurationError(
                f"勾配とパラメータの形状が一致しません: {name} grad={g.shape} param={params[name].shape}"
            )

    active = {name: g for name, g in grads.items() if np.any(g)}
    if not active:
        return

    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    step_size = state.lr / bc1

    for name, g in active.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        denom = np.sqrt(v / bc2) + state.eps
        p -= (step_size * m / denom).astype(p.dtype, copy=False)
