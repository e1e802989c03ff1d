"""3 つのネットワークが必要とする微分可能演算。

すべて NCHW レイアウト。入力の dtype（float32 / float64）をそのまま保つ。
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from ..errors import ConfigurationError
from .tensor import Tensor, as_array

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
BCE_CLIP = 1e-7


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(as_array(x))


def conv_output_extent(size: int, kernel: int, stride: int, dilation: int, padding: int) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def conv2d(
    x,
    weight,
    bias=None,
    stride: int = 1,
    dilation: int = 1,
    padding: int = 0,
) -> Tensor:
    """相互相関による 2 次元畳み込み。

    カーネルの各オフセットごとに (N,C,Ho,Wo) × (O,C) の行列積を足し込む。
    kernel_h × kernel_w 回の tensordot で済むので im2col より省メモリ。
    """
    x, weight = _wrap(x), _wrap(weight)
    bias = _wrap(bias) if bias is not None else None
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ConfigurationError(
            f"conv2d は 4 次元の入力とカーネルが必要です: input={x.shape}, kernel={weight.shape}"
        )
    n, c, h, w = x.shape
    out_ch, k_ch, kh, kw = weight.shape
    if k_ch != c:
        raise ConfigurationError(
            f"カーネルのチャネル数が入力と一致しません: input={x.shape}, kernel={weight.shape}"
        )
    if stride < 1 or dilation < 1 or padding < 0:
        raise ConfigurationError(
            f"stride/dilation は 1 以上、padding は 0 以上が必要です: "
            f"stride={stride}, dilation={dilation}, padding={padding}"
        )
    ho = conv_output_extent(h, kh, stride, dilation, padding)
    wo = conv_output_extent(w, kw, stride, dilation, padding)
    if ho < 1 or wo < 1:
        raise ConfigurationError(
            f"出力サイズが 1 未満になります: input={x.shape}, kernel={weight.shape}, "
            f"stride={stride}, dilation={dilation}, padding={padding}"
        )
    if bias is not None and bias.shape != (out_ch,):
        raise ConfigurationError(f"バイアス形状が不正です: bias={bias.shape}, kernel={weight.shape}")

    dtype = np.result_type(x.dtype, weight.dtype)
    xp = np.pad(x.data.astype(dtype, copy=False), ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    wdata = weight.data.astype(dtype, copy=False)

    def window(i: int, j: int) -> Tuple[slice, slice]:
        r0, c0 = i * dilation, j * dilation
        return (
            slice(r0, r0 + stride * (ho - 1) + 1, stride),
            slice(c0, c0 + stride * (wo - 1) + 1, stride),
        )

    acc = np.zeros((n, ho, wo, out_ch), dtype=dtype)
    for i in range(kh):
        for j in range(kw):
            rs, cs = window(i, j)
            # (N,C,Ho,Wo) × (O,C) -> (N,Ho,Wo,O)
            acc += np.tensordot(xp[:, :, rs, cs], wdata[:, :, i, j], axes=([1], [1]))
    out = np.ascontiguousarray(acc.transpose(0, 3, 1, 2))
    if bias is not None:
        out += bias.data.astype(dtype, copy=False)[None, :, None, None]

    def backward(g: np.ndarray):
        gt = g.transpose(0, 2, 3, 1)
        dxp = np.zeros_like(xp) if x.requires_grad else None
        dw = np.zeros_like(wdata) if weight.requires_grad else None
        for i in range(kh):
            for j in range(kw):
                rs, cs = window(i, j)
                if dw is not None:
                    dw[:, :, i, j] = np.tensordot(gt, xp[:, :, rs, cs], axes=([0, 1, 2], [0, 2, 3]))
                if dxp is not None:
                    dxp[:, :, rs, cs] += np.tensordot(gt, wdata[:, :, i, j], axes=([3], [0])).transpose(0, 3, 1, 2)
        dx = dxp[:, :, padding:padding + h, padding:padding + w] if dxp is not None else None
        db = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return (dx, dw, db) if bias is not None else (dx, dw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor(out, parents, backward)


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ConfigurationError(f"leaky_relu の傾きは (0,1) の範囲が必要です: {slope}")
    x = _wrap(x)
    positive = x.data > 0
    out = np.where(positive, x.data, slope * x.data).astype(x.dtype, copy=False)

    def backward(g):
        return (np.where(positive, g, slope * g),)

    return Tensor(out, (x,), backward)


@dataclass
class BatchNormState:
    """BatchNorm2d（affine なし）の移動統計量"""
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32, eps: float = BN_EPS, momentum: float = BN_MOMENTUM) -> "BatchNormState":
        return cls(
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            eps=eps,
            momentum=momentum,
        )


def batchnorm2d(x, state: BatchNormState, train: bool) -> Tensor:
    """チャネルごとの標準化。学習可能な scale/shift は持たない。"""
    x = _wrap(x)
    if x.data.ndim != 4:
        raise ConfigurationError(f"batchnorm2d は 4 次元入力が必要です: {x.shape}")
    n, c = x.shape[0], x.shape[1]
    if state.running_mean.shape != (c,):
        raise ConfigurationError(
            f"BatchNorm のチャネル数が一致しません: input={x.shape}, stats={state.running_mean.shape}"
        )

    if not train:
        mean = state.running_mean.astype(x.dtype)[None, :, None, None]
        inv_std = (1.0 / np.sqrt(state.running_var.astype(x.dtype) + state.eps))[None, :, None, None]
        out = (x.data - mean) * inv_std

        def backward_eval(g):
            return (g * inv_std,)

        return Tensor(out.astype(x.dtype, copy=False), (x,), backward_eval)

    if n < 2:
        raise ConfigurationError(f"学習モードの BatchNorm にはバッチサイズ 2 以上が必要です: {x.shape}")
    axes = (0, 2, 3)
    count = x.data.size // c
    mean = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + state.eps)
    x_hat = (x.data - mean) * inv_std

    unbiased = var.reshape(c) * (count / max(count - 1, 1))
    m = state.momentum
    state.running_mean = ((1 - m) * state.running_mean + m * mean.reshape(c)).astype(state.running_mean.dtype)
    state.running_var = ((1 - m) * state.running_var + m * unbiased).astype(state.running_var.dtype)

    def backward(g):
        g_sum = g.sum(axis=axes, keepdims=True)
        gx_sum = (g * x_hat).sum(axis=axes, keepdims=True)
        return ((inv_std / count) * (count * g - g_sum - x_hat * gx_sum),)

    return Tensor(x_hat.astype(x.dtype, copy=False), (x,), backward)


def dropout(x, rate: float, train: bool, rng: Optional[np.random.Generator]) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout 率は [0,1) の範囲が必要です: {rate}")
    x = _wrap(x)
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ConfigurationError("学習モードの dropout には乱数生成器が必要です")
    keep = rng.random(x.shape) >= rate
    scale = 1.0 / (1.0 - rate)
    mask = keep.astype(x.dtype) * x.dtype.type(scale)

    def backward(g):
        return (g * mask,)

    return Tensor(x.data * mask, (x,), backward)


def sigmoid(x) -> Tensor:
    x = _wrap(x)
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ed = np.exp(d[~pos])
    out[~pos] = ed / (1.0 + ed)
    # 飽和しても (0,1) の開区間に留める
    tiny = np.finfo(d.dtype).eps
    out = np.clip(out, tiny, 1.0 - tiny)

    def backward(g):
        return (g * out * (1.0 - out),)

    return Tensor(out, (x,), backward)


def softmax(x) -> Tensor:
    x = _wrap(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return Tensor(out, (x,), backward)


def log_softmax(x) -> Tensor:
    x = _wrap(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - log_z
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return Tensor(out, (x,), backward)


def linear(x, weight, bias=None) -> Tensor:
    """(N,F) @ (F,O) + (O,)"""
    x, weight = _wrap(x), _wrap(weight)
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ConfigurationError(f"linear の形状が一致しません: input={x.shape}, weight={weight.shape}")
    out = x.data @ weight.data
    bias = _wrap(bias) if bias is not None else None
    if bias is not None:
        out = out + bias.data

    def backward(g):
        dx = g @ weight.data.T if x.requires_grad else None
        dw = x.data.T @ g if weight.requires_grad else None
        if bias is None:
            return (dx, dw)
        return (dx, dw, g.sum(axis=0))

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor(out, parents, backward)


def reshape(x, shape: Tuple[int, ...]) -> Tensor:
    x = _wrap(x)
    original = x.shape
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(original),)

    return Tensor(out, (x,), backward)


def flatten(x) -> Tensor:
    x = _wrap(x)
    return reshape(x, (x.shape[0], -1))


def upsample_nearest(x, factor: int = 2) -> Tensor:
    """最近傍アップサンプリング（デコーダの逆畳み込みの代わり）"""
    x = _wrap(x)
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)
    n, c, h, w = x.shape

    def backward(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return Tensor(out, (x,), backward)


def select(x, index: np.ndarray) -> Tensor:
    """(N,A) から各行 index[n] 列を取り出して (N,) にする。"""
    x = _wrap(x)
    index = np.asarray(index, dtype=np.int64)
    if x.data.ndim != 2 or index.shape != (x.shape[0],):
        raise ConfigurationError(f"select の形状が不正です: input={x.shape}, index={index.shape}")
    rows = np.arange(x.shape[0])

    def backward(g):
        dx = np.zeros_like(x.data)
        dx[rows, index] = g
        return (dx,)

    return Tensor(x.data[rows, index], (x,), backward)


def weighted_sum(x, weights) -> Tensor:
    """Σ w_i x_i をスカラーで返す。"""
    x = _wrap(x)
    weights = np.asarray(weights, dtype=x.dtype)
    if weights.shape != x.shape:
        raise ConfigurationError(f"重みの形状が一致しません: {weights.shape} != {x.shape}")

    def backward(g):
        return (weights * g.reshape(-1)[0],)

    return Tensor(np.asarray((x.data * weights).sum(), dtype=x.dtype).reshape(1), (x,), backward)


def mse_loss(prediction, target) -> Tensor:
    """全画素・全チャネル平均の二乗誤差"""
    prediction = _wrap(prediction)
    target = as_array(target, dtype=prediction.dtype)
    if target.shape != prediction.shape:
        raise ConfigurationError(f"mse_loss の形状が一致しません: {prediction.shape} != {target.shape}")
    diff = prediction.data - target
    size = diff.size

    def backward(g):
        return (diff * (2.0 * g.reshape(-1)[0] / size),)

    return Tensor(np.asarray((diff * diff).mean(), dtype=prediction.dtype).reshape(1), (prediction,), backward)


def weighted_bce(prediction, target, alpha: float) -> Tensor:
    """負例項に α を掛けた二値交差エントロピー（バッチと画素で平均）"""
    prediction = _wrap(prediction)
    target = as_array(target, dtype=prediction.dtype)
    if target.shape != prediction.shape:
        raise ConfigurationError(f"weighted_bce の形状が一致しません: {prediction.shape} != {target.shape}")
    if not np.all((target == 0) | (target == 1)):
        raise ConfigurationError("weighted_bce の正解マスクは 0/1 のみ許されます")
    p = prediction.data
    clipped = np.clip(p, BCE_CLIP, 1.0 - BCE_CLIP)
    size = p.size
    loss = -(target * np.log(clipped) + alpha * (1.0 - target) * np.log(1.0 - clipped)).sum() / size
    inside = (p > BCE_CLIP) & (p < 1.0 - BCE_CLIP)

    def backward(g):
        dp = -(target / clipped - alpha * (1.0 - target) / (1.0 - clipped)) / size
        return (np.where(inside, dp, 0.0).astype(prediction.dtype) * g.reshape(-1)[0],)

    return Tensor(np.asarray(loss, dtype=prediction.dtype).reshape(1), (prediction,), backward)
