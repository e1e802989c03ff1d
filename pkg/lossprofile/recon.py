"""オートエンコーダ: パッチ再構成（MSE）と画像全体の損失プロファイル生成。

構成（スキップ接続なし、入出力とも 3×P×P）:
    encoder  3x3/stride2 conv ×4 (3→c1→c2→c3→c4), 各層 LeakyReLU → BatchNorm
    dropout  ボトルネック直前
    bottleneck 1x1 conv c4→c4 + LeakyReLU
    decoder  最近傍 ×2 アップサンプル + 3x3 conv ×4 (c4→c3→c2→c1→3), 最終層のみ sigmoid
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, List, Literal, Optional, Sequence, Tuple

import numpy as np

from . import ndgrad
from .errors import ConfigurationError
from .imagefeat import are_map
from .ndgrad import NetworkParams, Tensor
from .ndgrad.optim import AdamState
from .settings import TrainConfig

Mode = Literal["train", "eval"]


class AutoencoderNet:
    """浅い対称エンコーダ・デコーダ"""

    def __init__(
        self,
        params: NetworkParams,
        channels: Tuple[int, int, int, int],
        patch_size: int = 64,
        dropout: float = 0.3,
        slope: float = 0.2,
    ):
        self.params = params
        self.channels = tuple(channels)
        self.patch_size = patch_size
        self.dropout = dropout
        self.slope = slope
        self.training = False

    @classmethod
    def build(cls, config: TrainConfig, rng: np.random.Generator, dtype=np.float32) -> "AutoencoderNet":
        params = NetworkParams(dtype)
        c = config.ae_channels
        enc = [3, *c]
        for i in range(4):
            params.add(f"enc{i}.w", ndgrad.glorot_kernel(rng, enc[i + 1], enc[i], 3, dtype))
            params.add(f"enc{i}.b", np.zeros(enc[i + 1], dtype))
            params.add_batchnorm(f"enc{i}", enc[i + 1], config.bn_eps, config.bn_momentum)
        params.add("neck.w", ndgrad.glorot_kernel(rng, c[3], c[3], 1, dtype))
        params.add("neck.b", np.zeros(c[3], dtype))
        dec = [c[3], c[2], c[1], c[0], 3]
        for i in range(4):
            params.add(f"dec{i}.w", ndgrad.glorot_kernel(rng, dec[i + 1], dec[i], 3, dtype))
            params.add(f"dec{i}.b", np.zeros(dec[i + 1], dtype))
            if i < 3:
                params.add_batchnorm(f"dec{i}", dec[i + 1], config.bn_eps, config.bn_momentum)
        params.optimizer = AdamState(
            lr=config.ae_lr, beta1=config.adam_beta1, beta2=config.adam_beta2, eps=config.adam_eps
        )
        return cls(params, c, config.patch_size, config.dropout, config.leaky_slope)

    def train(self) -> "AutoencoderNet":
        self.training = True
        return self

    def eval(self) -> "AutoencoderNet":
        self.training = False
        return self

    def forward(self, batch: np.ndarray, rng: Optional[np.random.Generator] = None) -> Tensor:
        p = self.params
        x: Tensor = ndgrad.constant(batch, dtype=p.dtype)
        for i in range(4):
            x = ndgrad.conv2d(x, p[f"enc{i}.w"], p[f"enc{i}.b"], stride=2, padding=1)
            x = ndgrad.leaky_relu(x, self.slope)
            x = ndgrad.batchnorm2d(x, p.batchnorms[f"enc{i}"], self.training)
        x = ndgrad.dropout(x, self.dropout, self.training, rng)
        x = ndgrad.leaky_relu(ndgrad.conv2d(x, p["neck.w"], p["neck.b"]), self.slope)
        for i in range(4):
            x = ndgrad.upsample_nearest(x, 2)
            x = ndgrad.conv2d(x, p[f"dec{i}.w"], p[f"dec{i}.b"], padding=1)
            if i < 3:
                x = ndgrad.leaky_relu(x, self.slope)
                x = ndgrad.batchnorm2d(x, p.batchnorms[f"dec{i}"], self.training)
        return ndgrad.sigmoid(x)


def _as_batch(patch: np.ndarray, patch_size: int) -> Tuple[np.ndarray, bool]:
    patch = np.asarray(patch)
    single = patch.ndim == 3
    batch = patch[None] if single else patch
    if batch.ndim != 4 or batch.shape[1:] != (3, patch_size, patch_size):
        raise ConfigurationError(f"パッチは 3×{patch_size}×{patch_size} が必要です: {patch.shape}")
    return batch, single


def ae_forward(
    net: AutoencoderNet,
    patch: np.ndarray,
    mode: Mode = "eval",
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """(3,P,P) または (N,3,P,P) のパッチを再構成する。dropout は train のときだけ効く。"""
    batch, single = _as_batch(patch, net.patch_size)
    net.training = mode == "train"
    out = net.forward(batch, rng)
    return ndgrad.reshape(out, out.shape[1:]) if single else out


def mse_loss(patch, reconstruction) -> Tensor:
    """全画素・全チャネル平均の二乗誤差（勾配は reconstruction 側へ）"""
    return ndgrad.mse_loss(reconstruction, patch)


def train_step(net: AutoencoderNet, patches: np.ndarray, rng: np.random.Generator) -> float:
    """1 ミニバッチで Adam を 1 ステップ進め、更新前の l_MSE を返す。"""
    recon = ae_forward(net, patches, mode="train", rng=rng)
    loss = mse_loss(patches, recon)
    loss.backward()
    net.params.step()
    net.eval()
    return loss.item()


@dataclass
class LossProfile:
    """画像全体の画素ごとの再構成誤差マップ"""
    image_id: str
    values: np.ndarray
    generation: int = 0

    @property
    def extents(self) -> Tuple[int, int]:
        return self.values.shape


def tile_image(image: np.ndarray, patch_size: int) -> np.ndarray:
    """(3,H,W) を重なりなしの (rows*cols, 3, P, P) に分割する（行優先）。"""
    c, h, w = image.shape
    if h % patch_size or w % patch_size:
        raise ConfigurationError(f"画像サイズ {h}x{w} が patch_size {patch_size} で割り切れません")
    rows, cols = h // patch_size, w // patch_size
    tiles = image.reshape(c, rows, patch_size, cols, patch_size).transpose(1, 3, 0, 2, 4)
    return tiles.reshape(rows * cols, c, patch_size, patch_size)


def reconstruct_image(net: AutoencoderNet, image: np.ndarray) -> np.ndarray:
    """タイルごとに再構成して画像全体の再構成を組み立てる（eval モード）。"""
    image = np.asarray(image, dtype=net.params.dtype)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ConfigurationError(f"画像は (3,H,W) が必要です: {image.shape}")
    tiles = tile_image(image, net.patch_size)
    recon = ae_forward(net, tiles, mode="eval").data
    _, h, w = image.shape
    p = net.patch_size
    grid = recon.reshape(h // p, w // p, 3, p, p).transpose(2, 0, 3, 1, 4)
    return grid.reshape(3, h, w)


def generate_loss_profile(
    image: np.ndarray,
    net: AutoencoderNet,
    image_id: str = "",
    generation: int = 0,
) -> LossProfile:
    """各タイルの |x - x̂| をチャネル平均して画像サイズのマップにする。"""
    recon = reconstruct_image(net, image)
    values = are_map(np.asarray(image, dtype=recon.dtype), recon).astype(np.float32)
    return LossProfile(image_id=image_id, values=values, generation=generation)


class PatchPool:
    """事前学習用のランダムクロップの集合（座標だけ保持し、取り出し時に切り出す）"""

    def __init__(self, images: Sequence[np.ndarray], crops_per_image: int, patch_size: int, rng: np.random.Generator):
        if not images:
            raise ConfigurationError("パッチプールには少なくとも 1 枚の正常画像が必要です")
        self.images = list(images)
        self.patch_size = patch_size
        coords: List[Tuple[int, int, int]] = []
        for idx, image in enumerate(self.images):
            _, h, w = image.shape
            if h < patch_size or w < patch_size:
                raise ConfigurationError(f"画像 {h}x{w} が patch_size {patch_size} より小さいです")
            tops = rng.integers(0, h - patch_size + 1, size=crops_per_image)
            lefts = rng.integers(0, w - patch_size + 1, size=crops_per_image)
            coords.extend((idx, int(t), int(l)) for t, l in zip(tops, lefts))
        self.coords = coords

    def __len__(self) -> int:
        return len(self.coords)

    def gather(self, indices: Sequence[int]) -> np.ndarray:
        p = self.patch_size
        out = np.empty((len(indices), 3, p, p), dtype=np.float32)
        for k, i in enumerate(indices):
            idx, top, left = self.coords[i]
            out[k] = self.images[idx][:, top:top + p, left:left + p]
        return out

    def epoch(self, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
        """シャッフルして batch_size ごとに返す（BatchNorm のため 2 枚未満の端数は捨てる）。"""
        order = rng.permutation(len(self.coords))
        for start in range(0, len(order), batch_size):
            chunk = order[start:start + batch_size]
            if len(chunk) < 2:
                break
            yield self.gather(chunk)
