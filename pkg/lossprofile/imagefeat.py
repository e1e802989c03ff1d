"""学習しない画像統計量: Sobel 勾配・局所分散・融合マップ・履歴マップ・サンプラ入力。

画像は (C, H, W) の float 配列、マップは (H, W) の float 配列で扱う。
境界はすべて reflect（半画素対称）パディング。
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Tuple

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError
from .models import Rect

DEFAULT_FUSION_WEIGHTS = (0.7, 0.1, 0.2)
NORMALIZE_EPS = 1e-8
BLUR_TRUNCATE = 3.0
SAMPLER_CHANNELS = 6


def _as_chw(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    if image.ndim != 3 or image.shape[0] < 1:
        raise ConfigurationError(f"画像は (C,H,W) か (H,W) が必要です: {image.shape}")
    return image


def _check_same_extents(*maps: np.ndarray) -> None:
    extents = {m.shape[-2:] for m in maps}
    if len(extents) != 1:
        raise ConfigurationError(f"マップの空間サイズが一致しません: {sorted(extents)}")


def sobel_magnitude(image: np.ndarray) -> np.ndarray:
    """チャネルごとの sqrt(Sx^2 + Sy^2) をチャネル平均した単一チャネルマップ"""
    image = _as_chw(image)
    if image.shape[1] < 3 or image.shape[2] < 3:
        raise ConfigurationError(f"Sobel には 3x3 以上の画像が必要です: {image.shape}")
    mags = []
    for plane in image:
        gx = ndimage.sobel(plane, axis=1, mode="reflect")
        gy = ndimage.sobel(plane, axis=0, mode="reflect")
        mags.append(np.hypot(gx, gy))
    return np.mean(mags, axis=0)


def local_variance(image: np.ndarray, blur_sigma: float = 2.0) -> np.ndarray:
    """Blur(x^2) - Blur(x)^2 をチャネル平均し、丸め誤差分を 0 でクランプする。"""
    image = _as_chw(image)
    out = []
    for plane in image:
        mean = ndimage.gaussian_filter(plane, blur_sigma, mode="reflect", truncate=BLUR_TRUNCATE)
        mean_sq = ndimage.gaussian_filter(plane * plane, blur_sigma, mode="reflect", truncate=BLUR_TRUNCATE)
        out.append(mean_sq - mean * mean)
    return np.maximum(np.mean(out, axis=0), 0.0)


def normalize_map(values: np.ndarray) -> np.ndarray:
    """(v - min) / (max - min + eps)。定数マップは 0 になる。"""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = values.min(), values.max()
    return (values - lo) / (hi - lo + NORMALIZE_EPS)


def are_map(image: np.ndarray, reconstruction: np.ndarray) -> np.ndarray:
    """チャネル平均した絶対再構成誤差 |x - x̂|"""
    image, reconstruction = np.asarray(image), np.asarray(reconstruction)
    if image.shape != reconstruction.shape:
        raise ConfigurationError(f"入力と再構成の形状が一致しません: {image.shape} != {reconstruction.shape}")
    diff = np.abs(image.astype(np.float64) - reconstruction.astype(np.float64))
    return diff.mean(axis=-3) if diff.ndim >= 3 else diff


@dataclass
class FusedMap:
    """正規化済みの融合マップと使った重み"""
    values: np.ndarray
    weights: Tuple[float, float, float] = DEFAULT_FUSION_WEIGHTS


def fuse_maps(
    mae: np.ndarray,
    var: np.ndarray,
    grad: np.ndarray,
    weights: Tuple[float, float, float] = DEFAULT_FUSION_WEIGHTS,
) -> np.ndarray:
    """正規化前の重み付き和 w_mae*mae + w_var*var + w_grad*grad"""
    mae, var, grad = (np.asarray(m, dtype=np.float64) for m in (mae, var, grad))
    if not (mae.shape == var.shape == grad.shape):
        raise ConfigurationError(f"融合するマップの形状が一致しません: {mae.shape}, {var.shape}, {grad.shape}")
    w_mae, w_var, w_grad = weights
    return w_mae * mae + w_var * var + w_grad * grad


def build_fused_map(
    image: np.ndarray,
    mae: np.ndarray,
    weights: Tuple[float, float, float] = DEFAULT_FUSION_WEIGHTS,
    blur_sigma: float = 2.0,
) -> FusedMap:
    """画像と事前学習済み AE の ARE から固定コンテキスト（チャネル 4）を作る。"""
    fused = fuse_maps(mae, local_variance(image, blur_sigma), sobel_magnitude(image), weights)
    return FusedMap(values=normalize_map(fused), weights=tuple(weights))


@dataclass
class HistoryMap:
    """画素ごとの被サンプリング回数"""
    image_id: str
    counts: np.ndarray

    @classmethod
    def fresh(cls, image_id: str, height: int, width: int) -> "HistoryMap":
        return cls(image_id=image_id, counts=np.zeros((height, width), dtype=np.int64))

    @property
    def extents(self) -> Tuple[int, int]:
        return self.counts.shape

    def normalized(self) -> np.ndarray:
        """最大カウントで割った [0,1] のマップ（全て 0 なら 1 で割る）"""
        peak = max(int(self.counts.max()), 1)
        return self.counts / peak

    def coverage_penalty(self, rect: Rect) -> float:
        """矩形内の counts / (max + 1) の平均。未訪問なら 0、再訪で単調増加"""
        rect.check_inside(*self.extents)
        rows, cols = rect.slices()
        return float(self.counts[rows, cols].mean() / (int(self.counts.max()) + 1))


def update_history(history: HistoryMap, rect: Rect) -> HistoryMap:
    """矩形内の全セルを 1 増やす（範囲外は内部エラー）。"""
    rect.check_inside(*history.extents)
    rows, cols = rect.slices()
    history.counts[rows, cols] += 1
    return history


@dataclass
class SamplerInput:
    """方策への 6 チャネル入力の構成要素。

    チャネル 5 は履歴マップから毎回作り直すので、history の更新がそのまま反映される。
    """
    image_id: str
    rgb: np.ndarray
    fused: FusedMap
    history: HistoryMap
    prev_are: np.ndarray
    mask: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        _check_same_extents(self.rgb, self.fused.values, self.history.counts, self.prev_are)
        if self.rgb.shape[0] != 3:
            raise ConfigurationError(f"RGB は 3 チャネルが必要です: {self.rgb.shape}")

    @property
    def extents(self) -> Tuple[int, int]:
        return self.rgb.shape[-2:]

    def stack(self) -> np.ndarray:
        return build_sampler_input(self.rgb, self.fused, self.history, self.prev_are)

    def crop(self, rect: Rect) -> np.ndarray:
        """矩形部分だけの 6 チャネル入力（全体を組まずに切り出す）"""
        rect.check_inside(*self.extents)
        rows, cols = rect.slices()
        peak = max(int(self.history.counts.max()), 1)
        out = np.empty((SAMPLER_CHANNELS, rect.height, rect.width), dtype=np.float32)
        out[:3] = self.rgb[:, rows, cols]
        out[3] = self.fused.values[rows, cols]
        out[4] = self.history.counts[rows, cols] / peak
        out[5] = np.minimum(self.prev_are[rows, cols], 1.0)
        return out


def build_sampler_input(
    rgb: np.ndarray,
    fused: FusedMap,
    history: HistoryMap,
    prev_are: np.ndarray,
) -> np.ndarray:
    """RGB(1-3), 融合マップ(4), 正規化履歴(5), 前回 ARE(6) を積んだ (6,H,W)"""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ConfigurationError(f"RGB は (3,H,W) が必要です: {rgb.shape}")
    _check_same_extents(rgb, fused.values, history.counts, prev_are)
    out = np.empty((SAMPLER_CHANNELS,) + rgb.shape[1:], dtype=np.float32)
    out[:3] = rgb
    out[3] = fused.values
    out[4] = history.normalized()
    out[5] = np.minimum(np.asarray(prev_are), 1.0)
    return out
