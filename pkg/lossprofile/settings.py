"""環境変数と設定値のローダー。

- AppSettings: プロセス全体の設定（環境変数 / .env）
- TrainConfig / SynthSpec: 実行ごとの設定（JSON ファイル、pydantic で検証）
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Type, TypeVar, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigurationError

try:
    from dotenv import load_dotenv
    load_dotenv()
except Exception:
    # 依存未インストールでも動作するようにする
    pass


@dataclass
class AppSettings:
    output_root: Path = Path(os.getenv("LOSSPROFILE_OUTPUT_ROOT", "runs"))
    data_root: Path = Path(os.getenv("LOSSPROFILE_DATA_ROOT", "data"))
    console_log: bool = os.getenv("LOSSPROFILE_CONSOLE_LOG", "true").lower() == "true"
    profile_workers: int = int(os.getenv("LOSSPROFILE_PROFILE_WORKERS", "1"))


settings = AppSettings()


def enable_console_log():
    """コンソール出力を有効化"""
    settings.console_log = True


def disable_console_log():
    """コンソール出力を無効化（テスト用）"""
    settings.console_log = False


class TrainConfig(BaseModel):
    """学習・評価のハイパーパラメータ一式"""

    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    # データ
    data_root: str = "data"
    category: str = "synthetic"
    image_size: int = Field(256, ge=16)
    labeled_per_group: int = Field(5, ge=0)
    normal_subset_size: int = Field(10, ge=0)
    exclude_labeled_from_eval: bool = True
    episode_pool: Literal["normal", "all"] = "normal"

    # 予算
    ae_pretrain_epochs: int = Field(100, ge=0)
    ae_pretrain_max_steps: Optional[int] = Field(None, ge=0)
    pool_crops_per_image: int = Field(50, ge=1)
    warm_steps: int = Field(200, ge=0)
    joint_steps: int = Field(1000, ge=0)
    freeze_window: int = Field(50, ge=0)
    feedback_delay: int = Field(100, ge=0)
    regen_period: int = Field(10, ge=1)
    batch_size: int = Field(32, ge=1)
    episode_len: int = Field(32, ge=1)

    # 学習率・Adam
    ae_lr: float = Field(1e-3, gt=0)
    pred_lr: float = Field(1e-3, gt=0)
    policy_lr: float = Field(1e-3, gt=0)
    adam_beta1: float = Field(0.9, ge=0, lt=1)
    adam_beta2: float = Field(0.999, ge=0, lt=1)
    adam_eps: float = Field(1e-8, gt=0)

    # スケジュール
    beta_horizon: int = Field(1000, ge=1)
    beta_floor: float = Field(0.15, ge=0, le=1)
    alpha_horizon: Optional[int] = Field(None, ge=1)
    alpha_initial: float = Field(1.0, gt=0, le=1)
    alpha_floor: float = Field(0.15, ge=0, le=1)

    # ネットワーク
    patch_size: int = Field(64, ge=16)
    crop_size: int = Field(128, ge=16)
    shift: int = Field(24, ge=1)
    dropout: float = Field(0.3, ge=0, lt=1)
    leaky_slope: float = Field(0.2, gt=0, lt=1)
    bn_eps: float = Field(1e-5, gt=0)
    bn_momentum: float = Field(0.1, gt=0, le=1)
    ae_channels: Tuple[int, int, int, int] = (32, 64, 128, 128)
    pred_channels: int = Field(32, ge=1)
    policy_channels: Tuple[int, int, int, int] = (16, 32, 32, 32)
    policy_hidden: int = Field(64, ge=1)

    # 特徴マップ
    fusion_weights: Tuple[float, float, float] = (0.7, 0.1, 0.2)
    blur_sigma: float = Field(2.0, gt=0)

    # 方策
    sampler_mode: Literal["policy", "random"] = "policy"
    # None: 各ステップの報酬をそのまま使う。値を与えると割引つき reward-to-go
    discount: Optional[float] = Field(None, gt=0, le=1)
    use_baseline: bool = False

    # 乱数シード
    data_seed: int = 0
    init_seed: int = 1
    dropout_seed: int = 2
    episode_seed: int = 3

    # 既定は環境変数 LOSSPROFILE_PROFILE_WORKERS
    profile_workers: int = Field(default_factory=lambda: settings.profile_workers, ge=1, validate_default=True)

    @model_validator(mode="after")
    def _check_geometry(self) -> "TrainConfig":
        if self.image_size % self.patch_size != 0:
            raise ValueError(f"image_size ({self.image_size}) は patch_size ({self.patch_size}) で割り切れる必要があります")
        if not self.patch_size <= self.crop_size <= self.image_size:
            raise ValueError("patch_size <= crop_size <= image_size を満たす必要があります")
        if self.crop_size % 16 != 0:
            raise ValueError(f"crop_size ({self.crop_size}) は 16 の倍数が必要です")
        if self.patch_size % 16 != 0:
            raise ValueError(f"patch_size ({self.patch_size}) は 16 の倍数が必要です")
        if self.joint_steps > 0 and self.freeze_window > self.joint_steps:
            raise ValueError(f"freeze_window ({self.freeze_window}) が joint_steps ({self.joint_steps}) を超えています")
        if any(w < 0 for w in self.fusion_weights):
            raise ValueError("fusion_weights は非負である必要があります")
        return self

    @property
    def resolved_alpha_horizon(self) -> int:
        return self.alpha_horizon if self.alpha_horizon is not None else self.beta_horizon

    def seeds(self) -> Dict[str, int]:
        return {
            "data_seed": self.data_seed,
            "init_seed": self.init_seed,
            "dropout_seed": self.dropout_seed,
            "episode_seed": self.episode_seed,
        }

    def with_seed(self, seed: int) -> "TrainConfig":
        """--seed 指定時: 全シードを seed から派生させる"""
        return self.model_copy(update={
            "data_seed": seed,
            "init_seed": seed + 1,
            "dropout_seed": seed + 2,
            "episode_seed": seed + 3,
        })

    def digest(self) -> str:
        payload = json.dumps(self.model_dump(mode="json"), sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class SynthSpec(BaseModel):
    """合成データセット生成の設定"""

    model_config = ConfigDict(extra="forbid")

    category: str = "synthetic"
    image_size: int = Field(256, ge=16)
    n_train_normal: int = Field(40, ge=1)
    n_test_normal: int = Field(10, ge=0)
    n_test_defective: int = Field(10, ge=0)
    texture: Literal["noise", "grid"] = "noise"
    defect_families: List[Literal["blob", "scratch"]] = Field(default_factory=lambda: ["blob"], min_length=1)
    intensity_offset: float = Field(0.3, gt=0, le=0.5)
    area_min: int = Field(200, ge=1)
    area_max: int = Field(800, ge=1)
    seed: int = 0

    @model_validator(mode="after")
    def _check_area(self) -> "SynthSpec":
        if self.area_min > self.area_max:
            raise ValueError(f"area_min ({self.area_min}) > area_max ({self.area_max}) は満たせません")
        if self.area_max > (self.image_size * self.image_size) // 4:
            raise ValueError(f"area_max ({self.area_max}) が画像面積の 1/4 を超えています")
        return self


ModelT = TypeVar("ModelT", bound=BaseModel)


def _to_configuration_error(exc: ValidationError, source: str) -> ConfigurationError:
    fields = tuple(".".join(str(p) for p in err["loc"]) or "<root>" for err in exc.errors())
    details = "; ".join(f"{f}: {err['msg']}" for f, err in zip(fields, exc.errors()))
    return ConfigurationError(f"{source} の設定が不正です: {details}", fields=fields)


def parse_model(model: Type[ModelT], data: Dict[str, Any], source: str = "config") -> ModelT:
    try:
        return model.model_validate(data)
    except ValidationError as e:
        raise _to_configuration_error(e, source) from e


def load_model(model: Type[ModelT], path: Union[str, Path]) -> ModelT:
    """JSON ファイルを読み込み pydantic モデルとして検証する。"""
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ConfigurationError(f"設定ファイルが見つかりません: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"設定ファイルの JSON が不正です: {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigurationError(f"設定ファイルのトップレベルはオブジェクトが必要です: {path}")
    return parse_model(model, data, source=str(path))


def load_config(path: Union[str, Path]) -> TrainConfig:
    return load_model(TrainConfig, path)
