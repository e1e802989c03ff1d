"""強化学習バッチサンプラ。

- PolicyNet: 6 チャネルのクロップから 9 行動の確率を出す
- apply_action: 行動に従ってクロップ中心を動かす（画像内にクランプ）
- compute_reward: R = β (R_clone + R_cover) + (1 − β) R_pred
- reinforce_update: Σ_t R_t ∇ log π(a_t|s_t) 方向への上昇ステップ
- run_episode: 1 エピソードで AE のミニバッチ 1 つ分のパッチを集める
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np

from . import ndgrad
from .errors import ConfigurationError
from .imagefeat import HistoryMap, SamplerInput, sobel_magnitude, update_history
from .models import Rect, RewardBreakdown, Trajectory, TrajectoryStep
from .ndgrad import NetworkParams, Tensor
from .ndgrad.optim import AdamState
from .settings import TrainConfig

SamplerMode = Literal["policy", "random"]


class Action(IntEnum):
    N = 0
    S = 1
    E = 2
    W = 3
    NE = 4
    NW = 5
    SE = 6
    SW = 7
    SKIP = 8


NUM_ACTIONS = len(Action)

# (行, 列) 方向の単位移動
_DIRECTIONS: Dict[Action, Tuple[int, int]] = {
    Action.N: (-1, 0),
    Action.S: (1, 0),
    Action.E: (0, 1),
    Action.W: (0, -1),
    Action.NE: (-1, 1),
    Action.NW: (-1, -1),
    Action.SE: (1, 1),
    Action.SW: (1, -1),
}


class PolicyNet:
    """stride 2 の 3x3 conv ×4 → 全結合 hidden → 全結合 9 → softmax"""

    def __init__(self, params: NetworkParams, crop_size: int, slope: float = 0.2):
        self.params = params
        self.crop_size = crop_size
        self.slope = slope

    @classmethod
    def build(cls, config: TrainConfig, rng: np.random.Generator, dtype=np.float32) -> "PolicyNet":
        params = NetworkParams(dtype)
        widths = [6, *config.policy_channels]
        for i in range(4):
            params.add(f"conv{i}.w", ndgrad.glorot_kernel(rng, widths[i + 1], widths[i], 3, dtype))
            params.add(f"conv{i}.b", np.zeros(widths[i + 1], dtype))
        side = config.crop_size // 16
        features = widths[-1] * side * side
        params.add("fc0.w", ndgrad.glorot_matrix(rng, features, config.policy_hidden, dtype))
        params.add("fc0.b", np.zeros(config.policy_hidden, dtype))
        params.add("fc1.w", ndgrad.glorot_matrix(rng, config.policy_hidden, NUM_ACTIONS, dtype))
        params.add("fc1.b", np.zeros(NUM_ACTIONS, dtype))
        params.optimizer = AdamState(
            lr=config.policy_lr, beta1=config.adam_beta1, beta2=config.adam_beta2, eps=config.adam_eps
        )
        return cls(params, config.crop_size, config.leaky_slope)

    def logits(self, crops: np.ndarray) -> Tensor:
        p = self.params
        x: Tensor = ndgrad.constant(crops, dtype=p.dtype)
        for i in range(4):
            x = ndgrad.conv2d(x, p[f"conv{i}.w"], p[f"conv{i}.b"], stride=2, padding=1)
            x = ndgrad.leaky_relu(x, self.slope)
        x = ndgrad.leaky_relu(ndgrad.linear(ndgrad.flatten(x), p["fc0.w"], p["fc0.b"]), self.slope)
        return ndgrad.linear(x, p["fc1.w"], p["fc1.b"])


def _as_crop_batch(crop: np.ndarray, crop_size: int) -> np.ndarray:
    crop = np.asarray(crop)
    batch = crop[None] if crop.ndim == 3 else crop
    if batch.ndim != 4 or batch.shape[1:] != (6, crop_size, crop_size):
        raise ConfigurationError(f"クロップは 6×{crop_size}×{crop_size} が必要です: {crop.shape}")
    return batch


def policy_forward(crop: np.ndarray, net: PolicyNet) -> np.ndarray:
    """(6,c,c) なら (9,)、(N,6,c,c) なら (N,9) の行動確率"""
    probs = ndgrad.softmax(net.logits(_as_crop_batch(crop, net.crop_size))).data
    return probs[0] if np.asarray(crop).ndim == 3 else probs


def action_log_probs(crops: np.ndarray, actions: Sequence[int], net: PolicyNet) -> Tensor:
    """選んだ行動の log π(a|s) を (N,) で返す（勾配つき）。"""
    log_probs = ndgrad.log_softmax(net.logits(_as_crop_batch(crops, net.crop_size)))
    return ndgrad.select(log_probs, np.asarray(actions, dtype=np.int64))


def valid_center_range(extent: int, crop_size: int) -> Tuple[int, int]:
    half = crop_size // 2
    if crop_size > extent:
        raise ConfigurationError(f"crop_size {crop_size} が画像サイズ {extent} を超えています")
    return half, extent - half


def random_center(extents: Tuple[int, int], crop_size: int, rng: np.random.Generator) -> Tuple[int, int]:
    (r_lo, r_hi), (c_lo, c_hi) = (valid_center_range(e, crop_size) for e in extents)
    return int(rng.integers(r_lo, r_hi + 1)), int(rng.integers(c_lo, c_hi + 1))


def apply_action(
    center: Tuple[int, int],
    action: Union[Action, int],
    image_extents: Tuple[int, int],
    crop_size: int,
    rng: np.random.Generator,
    shift: int = 24,
) -> Tuple[int, int]:
    """中心を (±shift, ±shift) 動かしてクランプする。SKIP は一様ランダムな中心に飛ぶ。"""
    action = Action(int(action))
    if action is Action.SKIP:
        return random_center(image_extents, crop_size, rng)
    dr, dc = _DIRECTIONS[action]
    (r_lo, r_hi), (c_lo, c_hi) = (valid_center_range(e, crop_size) for e in image_extents)
    row = min(max(center[0] + dr * shift, r_lo), r_hi)
    col = min(max(center[1] + dc * shift, c_lo), c_hi)
    return row, col


def beta_at(step: int, horizon: int, floor: float = 0.15) -> float:
    """β = max(floor, 1 − j/L)"""
    if horizon < 1:
        raise ConfigurationError(f"β の horizon L は 1 以上が必要です: {horizon}")
    if step < 0:
        raise ConfigurationError(f"ステップ j は 0 以上が必要です: {step}")
    return max(floor, 1.0 - step / horizon)


def compute_reward(
    patch: np.ndarray,
    history: HistoryMap,
    patch_rect: Rect,
    pred_loss: float,
    step: int,
    horizon: int,
    floor: float = 0.15,
) -> RewardBreakdown:
    """今回の訪問を記録する前の履歴で報酬を計算する。"""
    r_cover = -history.coverage_penalty(patch_rect)
    r_clone = float(sobel_magnitude(patch).mean())
    return RewardBreakdown.compose(
        r_pred=-float(pred_loss),
        r_clone=r_clone,
        r_cover=r_cover,
        beta=beta_at(step, horizon, floor),
    )


def reward_weights(
    trajectories: Sequence[Trajectory],
    discount: Optional[float] = None,
    use_baseline: bool = False,
) -> np.ndarray:
    """各ステップの log π に掛ける係数（全軌跡を連結した順）。"""
    weights = []
    for traj in trajectories:
        rewards = traj.rewards()
        if discount is None:
            weights.append(rewards)
            continue
        returns = np.empty_like(rewards)
        running = 0.0
        for t in range(len(rewards) - 1, -1, -1):
            running = rewards[t] + discount * running
            returns[t] = running
        weights.append(returns)
    flat = np.concatenate(weights) if weights else np.zeros(0)
    if use_baseline and flat.size:
        flat = flat - flat.mean()
    return flat


def policy_gradient(
    net: PolicyNet,
    trajectories: Sequence[Trajectory],
    discount: Optional[float] = None,
    use_baseline: bool = False,
) -> Tuple[float, Dict[str, np.ndarray]]:
    """J(θ) = Σ_t w_t log π(a_t|s_t) とその勾配（上昇方向）を返す。パラメータは変えない。"""
    steps = [s for traj in trajectories for s in traj.steps]
    if not steps:
        return 0.0, {}
    if any(s.state is None for s in steps):
        raise ConfigurationError("方策更新には各ステップの状態クロップが必要です")
    weights = reward_weights(trajectories, discount, use_baseline)
    states = np.stack([s.state for s in steps])
    actions = [s.action for s in steps]

    net.params.zero_grad()
    objective = ndgrad.weighted_sum(action_log_probs(states, actions, net), weights)
    objective.backward()
    grads = {name: g.copy() for name, g in net.params.grads().items()}
    net.params.zero_grad()
    return objective.item(), grads


def reinforce_update(
    net: PolicyNet,
    trajectories: Union[Trajectory, Sequence[Trajectory]],
    discount: Optional[float] = None,
    use_baseline: bool = False,
) -> float:
    """方策勾配で 1 ステップ上昇する。空の軌跡・全報酬 0 のときは何もしない。"""
    if isinstance(trajectories, Trajectory):
        trajectories = [trajectories]
    if not any(len(t) for t in trajectories):
        return 0.0
    if not np.any(reward_weights(trajectories, discount, use_baseline)):
        return 0.0
    objective, grads = policy_gradient(net, trajectories, discount, use_baseline)
    # Adam は最小化なので符号を反転して渡す
    for name, tensor in net.params:
        if name in grads:
            tensor.grad = -grads[name]
    net.params.step()
    return objective


@dataclass
class RewardContext:
    """報酬計算に必要な、エピソード外から与える値"""
    pred_loss: float
    policy_step: int
    beta_horizon: int
    beta_floor: float = 0.15


def sample_action(probs: np.ndarray, rng: np.random.Generator) -> int:
    """累積分布の逆関数で 1 つ選ぶ。"""
    cdf = np.cumsum(probs)
    return int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"), len(probs) - 1))


def run_episode(
    image: SamplerInput,
    net: Optional[PolicyNet],
    episode_len: int,
    rng: np.random.Generator,
    context: RewardContext,
    crop_size: int = 128,
    patch_size: int = 64,
    shift: int = 24,
    mode: SamplerMode = "policy",
) -> Tuple[Trajectory, List[np.ndarray]]:
    """一様ランダムな中心から始め、episode_len 個の RGB パッチを集める。

    各ステップ: 現在の中心で 6ch クロップ → 行動を選ぶ → 移動 → 中心の
    patch_size 四方を取り出す → 報酬計算 → 履歴更新。
    """
    if episode_len < 1:
        raise ConfigurationError(f"episode_len は 1 以上が必要です: {episode_len}")
    if mode == "policy" and net is None:
        raise ConfigurationError("policy モードには PolicyNet が必要です")
    extents = image.extents
    trajectory = Trajectory(image_id=image.image_id)
    patches: List[np.ndarray] = []
    center = random_center(extents, crop_size, rng)
    uniform_log_prob = float(np.log(1.0 / NUM_ACTIONS))

    for _ in range(episode_len):
        state = None
        if mode == "policy":
            state = image.crop(Rect.centered(center, crop_size))
            probs = policy_forward(state, net).astype(np.float64)
            action = sample_action(probs, rng)
            log_prob = float(np.log(max(probs[action], np.finfo(np.float64).tiny)))
        else:
            action = int(rng.integers(NUM_ACTIONS))
            log_prob = uniform_log_prob
        center = apply_action(center, action, extents, crop_size, rng, shift)
        rect = Rect.centered(center, patch_size)
        rows, cols = rect.slices()
        patch = np.array(image.rgb[:, rows, cols], dtype=np.float32)
        reward = compute_reward(
            patch,
            image.history,
            rect,
            context.pred_loss,
            context.policy_step,
            context.beta_horizon,
            context.beta_floor,
        )
        update_history(image.history, rect)
        trajectory.append(TrajectoryStep(center=center, action=action, log_prob=log_prob, reward=reward, state=state))
        patches.append(patch)
    return trajectory, patches
