"""段階的な半教師あり学習ループ。

pretrain (AE 単独) → warm (予測器の初期学習) → joint (サンプラ・AE・予測器の交互更新)。
joint の各ステップ:
    (a) サンプラがエピソードを回してミニバッチを埋める
    (b) AE がそのバッチで 1 ステップ
    (c) regen_period ごとにプロファイル再生成・前回 ARE の更新・予測器の更新（凍結区間は評価のみ）
    (d) feedback_delay 経過後は REINFORCE で方策を 1 ステップ
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from . import recon, segpred
from .datapipe import DatasetIndex, ImageEntry, load_mask, preprocess, select_labeled, select_normal_subset
from .datapipe.export import save_trajectories
from .errors import ConfigurationError
from .imagefeat import HistoryMap, SamplerInput, build_fused_map
from .models import Trajectory
from .ndgrad import NetworkParams
from .policysampler import PolicyNet, RewardContext, reinforce_update, run_episode
from .recon import AutoencoderNet, LossProfile, PatchPool, generate_loss_profile
from .segpred import AlphaSchedule, PredictorNet, alpha_at
from .settings import TrainConfig, parse_model, settings
from .storage import Checkpoint
from .train_logger import train_logger

NETWORKS = ("ae", "pred", "policy")


@dataclass
class ImageRecord:
    """前処理済みの画像とマスク"""
    image_id: str
    group: str
    image: np.ndarray
    mask: np.ndarray

    @classmethod
    def load(cls, entry: ImageEntry, size: int) -> "ImageRecord":
        return cls(entry.image_id, entry.group, preprocess(entry.path, size), load_mask(entry, size))


@dataclass
class TrainingData:
    """学習に使う画像一式"""
    normal: List[ImageRecord]
    labeled: List[ImageRecord]
    normal_subset: List[ImageRecord]

    @classmethod
    def from_index(cls, index: DatasetIndex, config: TrainConfig) -> "TrainingData":
        size = config.image_size
        normal = [ImageRecord.load(e, size) for e in index.train_normal]
        labeled_entries = select_labeled(index, config.data_seed, config.labeled_per_group).entries
        labeled = [ImageRecord.load(e, size) for e in labeled_entries]
        subset_ids = {e.image_id for e in select_normal_subset(index.train_normal, config.normal_subset_size, config.data_seed)}
        return cls(normal=normal, labeled=labeled, normal_subset=[r for r in normal if r.image_id in subset_ids])

    def predictor_set(self) -> List[ImageRecord]:
        """ラベル付き異常 + 事前に選んだ正常画像"""
        return self.labeled + self.normal_subset

    def episode_pool(self, config: TrainConfig) -> List[ImageRecord]:
        return self.normal + self.labeled if config.episode_pool == "all" else list(self.normal)


@dataclass
class RunState:
    """3 ネットワーク・カウンタ・画像ごとの履歴とプロファイル"""
    config: TrainConfig
    autoencoder: AutoencoderNet
    predictor: PredictorNet
    policy: PolicyNet
    rngs: Dict[str, np.random.Generator]
    pretrain_step: int = 0
    pred_step: int = 0
    joint_step: int = 0
    policy_step: int = 0
    generation: int = 0
    latest_pred_loss: float = 0.0
    sampler_inputs: Dict[str, SamplerInput] = field(default_factory=dict)
    profiles: Dict[str, LossProfile] = field(default_factory=dict)
    patch_counts: List[int] = field(default_factory=list)
    trajectory_path: Optional[Path] = None

    @classmethod
    def new(cls, config: TrainConfig) -> "RunState":
        init = np.random.default_rng(config.init_seed)
        return cls(
            config=config,
            autoencoder=AutoencoderNet.build(config, init),
            predictor=PredictorNet.build(config, init),
            policy=PolicyNet.build(config, init),
            rngs={
                "data": np.random.default_rng(config.data_seed),
                "dropout": np.random.default_rng(config.dropout_seed),
                "episode": np.random.default_rng(config.episode_seed),
            },
        )

    def network(self, name: str) -> NetworkParams:
        return {"ae": self.autoencoder, "pred": self.predictor, "policy": self.policy}[name].params

    def digests(self) -> Dict[str, str]:
        return {name: self.network(name).digest() for name in NETWORKS}

    def counters(self) -> Dict[str, int]:
        return {
            "pretrain_step": self.pretrain_step,
            "pred_step": self.pred_step,
            "joint_step": self.joint_step,
            "policy_step": self.policy_step,
            "generation": self.generation,
        }

    def to_checkpoint(self) -> Checkpoint:
        arrays: Dict[str, np.ndarray] = {}
        for name in NETWORKS:
            params = self.network(name)
            arrays.update({f"{name}/{k}": a for k, a in params.arrays().items()})
            arrays.update({f"{name}/{k}": a for k, a in params.optimizer.arrays("adam").items()})
        for image_id in sorted(self.sampler_inputs):
            arrays[f"history/{image_id}"] = self.sampler_inputs[image_id].history.counts
        arrays["state/latest_pred_loss"] = np.asarray([self.latest_pred_loss], dtype=np.float64)
        return Checkpoint(arrays=arrays, counters=self.counters(), config=self.config.model_dump(mode="json"))

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint) -> "RunState":
        """ネットワークとカウンタを復元する（画像ごとのサンプラ入力は復元しない）。"""
        config = parse_model(TrainConfig, checkpoint.config, source="checkpoint")
        run = cls.new(config)
        for name in NETWORKS:
            arrays = checkpoint.network(name)
            params = run.network(name)
            params.load_arrays(arrays)
            params.optimizer.load_arrays("adam", arrays)
        for key, value in checkpoint.counters.items():
            if hasattr(run, key):
                setattr(run, key, int(value))
        if "state/latest_pred_loss" in checkpoint.arrays:
            run.latest_pred_loss = float(checkpoint.arrays["state/latest_pred_loss"][0])
        return run


def _progress(total: int, desc: str) -> tqdm:
    return tqdm(total=total, desc=desc, disable=not settings.console_log, leave=False)


def generate_profiles(
    net: AutoencoderNet,
    records: Sequence[ImageRecord],
    generation: int,
    workers: int = 1,
) -> Dict[str, LossProfile]:
    """eval モードの AE で画像ごとの損失プロファイルを作る（重みは読むだけなので並列可）。"""
    net.eval()

    def one(record: ImageRecord) -> LossProfile:
        return generate_loss_profile(record.image, net, record.image_id, generation)

    if workers > 1 and len(records) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            profiles = list(pool.map(one, records))
    else:
        profiles = [one(r) for r in records]
    return {p.image_id: p for p in profiles}


def _pretrain_budget(pool: PatchPool, config: TrainConfig) -> int:
    per_epoch = len(range(0, len(pool), config.batch_size))
    if len(pool) % config.batch_size == 1:
        per_epoch -= 1
    total = per_epoch * config.ae_pretrain_epochs
    if config.ae_pretrain_max_steps is not None:
        total = min(total, config.ae_pretrain_max_steps)
    return total


def pretrain_autoencoder(
    normal_data: Sequence[ImageRecord],
    config: TrainConfig,
    run: Optional[RunState] = None,
    episode_images: Optional[Sequence[ImageRecord]] = None,
) -> RunState:
    """正常画像のランダムクロップで AE を事前学習し、サンプラ入力（融合マップ）を固定する。"""
    if not normal_data:
        raise ConfigurationError("事前学習には少なくとも 1 枚の正常画像が必要です", fields=("data_root",))
    run = run or RunState.new(config)
    ae = run.autoencoder
    pool = PatchPool([r.image for r in normal_data], config.pool_crops_per_image, config.patch_size, run.rngs["data"])
    budget = _pretrain_budget(pool, config)

    train_logger.start_stage("pretrain", {"pool": len(pool), "steps": budget})
    with _progress(budget, "pretrain") as bar:
        for _ in range(config.ae_pretrain_epochs):
            if run.pretrain_step >= budget:
                break
            for batch in pool.epoch(config.batch_size, run.rngs["data"]):
                if run.pretrain_step >= budget:
                    break
                loss = recon.train_step(ae, batch, run.rngs["dropout"])
                run.pretrain_step += 1
                train_logger.record_step("pretrain", step=run.pretrain_step, l_mse=loss)
                bar.update(1)

    images = list(episode_images) if episode_images is not None else list(normal_data)
    mae = generate_profiles(ae, images, run.generation, config.profile_workers)
    for record in images:
        are = mae[record.image_id].values
        fused = build_fused_map(record.image, are, config.fusion_weights, config.blur_sigma)
        _, h, w = record.image.shape
        run.sampler_inputs[record.image_id] = SamplerInput(
            image_id=record.image_id,
            rgb=record.image,
            fused=fused,
            history=HistoryMap.fresh(record.image_id, h, w),
            prev_are=are,
            mask=record.mask,
        )
    train_logger.end_stage("pretrain", {"steps": run.pretrain_step, "fused_maps": len(images)})
    return run


def _predictor_batch(run: RunState, records: Sequence[ImageRecord]):
    """予測器の 1 バッチ分の (K,1,H,W) プロファイルとマスク"""
    k = run.config.batch_size
    chosen = list(records)
    if len(chosen) > k:
        idx = np.sort(run.rngs["data"].choice(len(chosen), size=k, replace=False))
        chosen = [chosen[i] for i in idx]
    profiles = np.stack([run.profiles[r.image_id].values for r in chosen])[:, None]
    masks = np.stack([r.mask for r in chosen])[:, None]
    return profiles, masks


def _current_alpha(run: RunState) -> float:
    return alpha_at(run.pred_step, AlphaSchedule.from_config(run.config))


def update_predictor(run: RunState, records: Sequence[ImageRecord], train: bool = True) -> float:
    """最新プロファイルで予測器を 1 ステップ更新（train=False なら評価のみ）し、l_pred をキャッシュする。"""
    profiles, masks = _predictor_batch(run, records)
    alpha = _current_alpha(run)
    if train:
        loss = segpred.train_step(run.predictor, profiles, masks, alpha)
        run.pred_step += 1
    else:
        loss = segpred.evaluate_loss(run.predictor, profiles, masks, alpha)
    run.latest_pred_loss = loss
    return loss


def warm_predictor(run: RunState, labeled_data: TrainingData, config: TrainConfig) -> RunState:
    """初期プロファイル（ラベル付き異常 + 正常部分集合）で予測器を学習する。"""
    if not labeled_data.labeled:
        raise ConfigurationError(
            "ラベル付き異常画像がありません（半教師あり学習には必要です）", fields=("labeled_per_group",)
        )
    records = labeled_data.predictor_set()
    run.profiles = generate_profiles(run.autoencoder, records, run.generation, config.profile_workers)

    train_logger.start_stage("warm", {"profiles": len(run.profiles), "steps": config.warm_steps})
    with _progress(config.warm_steps, "warm") as bar:
        for _ in range(config.warm_steps):
            alpha = _current_alpha(run)
            loss = update_predictor(run, records, train=True)
            train_logger.record_step("warm", step=run.pred_step, l_pred=loss, alpha=alpha)
            bar.update(1)
    if config.warm_steps == 0:
        update_predictor(run, records, train=False)
    train_logger.end_stage("warm", {"l_pred": run.latest_pred_loss})
    return run


def regenerate_profiles(run: RunState, data: TrainingData) -> RunState:
    """現在の AE で予測器用プロファイルを作り直し、サンプラ入力の前回 ARE を差し替える。"""
    run.generation += 1
    config = run.config
    sampler_records = [r for r in data.episode_pool(config) if r.image_id in run.sampler_inputs]
    targets = {r.image_id: r for r in data.predictor_set() + sampler_records}
    profiles = generate_profiles(run.autoencoder, list(targets.values()), run.generation, config.profile_workers)
    run.profiles = {r.image_id: profiles[r.image_id] for r in data.predictor_set()}
    for record in sampler_records:
        run.sampler_inputs[record.image_id].prev_are = profiles[record.image_id].values
    return run


def _fill_batch(run: RunState, image_ids: Sequence[str]) -> Tuple[List[Trajectory], List[np.ndarray]]:
    """エピソードを回して batch_size 枚のパッチを集める。"""
    config = run.config
    rng = run.rngs["episode"]
    trajectories, patches = [], []
    context = RewardContext(run.latest_pred_loss, run.policy_step, config.beta_horizon, config.beta_floor)
    while len(patches) < config.batch_size:
        image_id = image_ids[int(rng.integers(len(image_ids)))]
        length = min(config.episode_len, config.batch_size - len(patches))
        traj, batch = run_episode(
            run.sampler_inputs[image_id],
            run.policy,
            length,
            rng,
            context,
            crop_size=config.crop_size,
            patch_size=config.patch_size,
            shift=config.shift,
            mode=config.sampler_mode,
        )
        trajectories.append(traj)
        patches.extend(batch)
    return trajectories, patches


StepCallback = Callable[[RunState, int], None]


def joint_loop(
    run: RunState,
    data: TrainingData,
    config: TrainConfig,
    on_step: Optional[StepCallback] = None,
) -> RunState:
    """サンプラ・AE・予測器の交互学習を joint_steps 回行う。"""
    if not run.sampler_inputs:
        raise ConfigurationError("joint 学習の前に事前学習（サンプラ入力の構築）が必要です")
    image_ids = sorted(run.sampler_inputs)
    records = data.predictor_set()

    train_logger.start_stage("joint", {"steps": config.joint_steps, "sampler": config.sampler_mode})
    with _progress(config.joint_steps, "joint") as bar:
        for _ in range(config.joint_steps):
            run.joint_step += 1
            t = run.joint_step
            trajectories, patches = _fill_batch(run, image_ids)
            l_mse = recon.train_step(run.autoencoder, np.stack(patches), run.rngs["dropout"])
            run.patch_counts.append(len(patches))

            if t % config.regen_period == 0:
                regenerate_profiles(run, data)
                update_predictor(run, records, train=t > config.freeze_window)

            if config.sampler_mode == "policy" and t > config.feedback_delay:
                reinforce_update(run.policy, trajectories, config.discount, config.use_baseline)
                run.policy_step += 1

            if run.trajectory_path is not None:
                save_trajectories(run.trajectory_path, trajectories)
            rewards = [s.reward for traj in trajectories for s in traj.steps]
            train_logger.record_step(
                "joint",
                step=t,
                l_mse=l_mse,
                l_pred=run.latest_pred_loss,
                r_pred=float(np.mean([r.r_pred for r in rewards])),
                r_clone=float(np.mean([r.r_clone for r in rewards])),
                r_cover=float(np.mean([r.r_cover for r in rewards])),
                reward=float(np.mean([r.total for r in rewards])),
                beta=rewards[0].beta,
                alpha=_current_alpha(run),
                patches=len(patches),
            )
            if on_step is not None:
                on_step(run, t)
            bar.update(1)
    train_logger.end_stage("joint", {"steps": run.joint_step, "policy_step": run.policy_step})
    return run
