"""予測器: 損失プロファイル空間で動く dilated FCN と重み付き BCE。"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from . import ndgrad
from .errors import ConfigurationError
from .ndgrad import NetworkParams, Tensor
from .ndgrad.optim import AdamState
from .recon import LossProfile
from .settings import TrainConfig

DILATIONS = (1, 2, 4, 8)


class PredictorNet:
    """3x3 dilated conv ×4（1→C→C→C→C）+ 1x1 ヘッド（C→1）+ sigmoid。

    全層 padding = dilation なので出力は入力と同じ空間サイズになる。
    """

    def __init__(self, params: NetworkParams, channels: int, slope: float = 0.2):
        self.params = params
        self.channels = channels
        self.slope = slope

    @classmethod
    def build(cls, config: TrainConfig, rng: np.random.Generator, dtype=np.float32) -> "PredictorNet":
        params = NetworkParams(dtype)
        widths = [1] + [config.pred_channels] * len(DILATIONS)
        for i in range(len(DILATIONS)):
            params.add(f"dil{i}.w", ndgrad.glorot_kernel(rng, widths[i + 1], widths[i], 3, dtype))
            params.add(f"dil{i}.b", np.zeros(widths[i + 1], dtype))
        params.add("head.w", ndgrad.glorot_kernel(rng, 1, config.pred_channels, 1, dtype))
        params.add("head.b", np.zeros(1, dtype))
        params.optimizer = AdamState(
            lr=config.pred_lr, beta1=config.adam_beta1, beta2=config.adam_beta2, eps=config.adam_eps
        )
        return cls(params, config.pred_channels, config.leaky_slope)

    def forward(self, batch: np.ndarray) -> Tensor:
        p = self.params
        x: Tensor = ndgrad.constant(batch, dtype=p.dtype)
        for i, d in enumerate(DILATIONS):
            x = ndgrad.conv2d(x, p[f"dil{i}.w"], p[f"dil{i}.b"], dilation=d, padding=d)
            x = ndgrad.leaky_relu(x, self.slope)
        return ndgrad.sigmoid(ndgrad.conv2d(x, p["head.w"], p["head.b"]))


ProfileLike = Union[LossProfile, np.ndarray]


def _as_profile_batch(profile: ProfileLike) -> np.ndarray:
    values = profile.values if isinstance(profile, LossProfile) else np.asarray(profile)
    if values.ndim == 2:
        return values[None, None]
    if values.ndim == 3:
        if values.shape[0] != 1:
            raise ConfigurationError(f"予測器の入力は単一チャネルのみです: {values.shape}")
        return values[None]
    if values.ndim == 4:
        if values.shape[1] != 1:
            raise ConfigurationError(f"予測器の入力は単一チャネルのみです: {values.shape}")
        return values
    raise ConfigurationError(f"予測器の入力形状が不正です: {values.shape}")


def pred_forward(profile: ProfileLike, net: PredictorNet) -> Tensor:
    """損失プロファイルから画素ごとの異常確率 ŷ ∈ (0,1) を出す。

    (H,W) / (1,H,W) / LossProfile は (1,1,H,W)、(K,1,H,W) はそのまま返す。
    """
    return net.forward(_as_profile_batch(profile))


def predict_map(profile: ProfileLike, net: PredictorNet) -> np.ndarray:
    """推論専用: (H,W) の確率マップ"""
    return pred_forward(profile, net).data[0, 0]


def weighted_bce(pred, target, alpha: float) -> Tensor:
    """-(y log ŷ + α (1-y) log(1-ŷ)) の K 枚・全画素平均"""
    return ndgrad.weighted_bce(pred, target, alpha)


@dataclass(frozen=True)
class AlphaSchedule:
    """負例重み α の線形減衰（下限つき）"""
    horizon: int
    initial: float = 1.0
    floor: float = 0.15

    @classmethod
    def from_config(cls, config: TrainConfig) -> "AlphaSchedule":
        return cls(horizon=config.resolved_alpha_horizon, initial=config.alpha_initial, floor=config.alpha_floor)


def alpha_at(step: int, schedule: AlphaSchedule) -> float:
    """max(floor, initial · (1 − step / horizon))"""
    if step < 0:
        raise ConfigurationError(f"step は 0 以上が必要です: {step}")
    if schedule.horizon < 1:
        raise ConfigurationError(f"alpha の horizon は 1 以上が必要です: {schedule.horizon}")
    return max(schedule.floor, schedule.initial * (1.0 - step / schedule.horizon))


def train_step(net: PredictorNet, profiles: np.ndarray, masks: np.ndarray, alpha: float) -> float:
    """(K,1,H,W) のプロファイルとマスクで 1 ステップ更新し、更新前の l_pred を返す。"""
    pred = pred_forward(profiles, net)
    loss = weighted_bce(pred, np.asarray(masks).reshape(pred.shape), alpha)
    loss.backward()
    net.params.step()
    return loss.item()


def evaluate_loss(net: PredictorNet, profiles: np.ndarray, masks: np.ndarray, alpha: float) -> float:
    """更新なしで l_pred を計算する（サンプラ報酬用）。"""
    pred = pred_forward(profiles, net)
    return weighted_bce(pred.data, np.asarray(masks).reshape(pred.shape), alpha).item()
