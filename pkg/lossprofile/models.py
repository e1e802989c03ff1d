"""ドメインモデル定義（numpy 以外の外部依存なし）。"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, InternalInvariantError


def utc_now() -> str:
    """UTC 時刻を ISO 形式で返す。"""
    return datetime.now(timezone.utc).isoformat(timespec="seconds").replace("+00:00", "Z")


@dataclass(frozen=True)
class Rect:
    """画像上の矩形（行・列は左上基準）"""
    top: int
    left: int
    height: int
    width: int

    @property
    def bottom(self) -> int:
        return self.top + self.height

    @property
    def right(self) -> int:
        return self.left + self.width

    def slices(self) -> Tuple[slice, slice]:
        return slice(self.top, self.bottom), slice(self.left, self.right)

    def check_inside(self, height: int, width: int) -> None:
        if self.top < 0 or self.left < 0 or self.bottom > height or self.right > width:
            raise InternalInvariantError(f"矩形が画像範囲外です: {self} (画像 {height}x{width})")

    @classmethod
    def centered(cls, center: Tuple[int, int], size: int) -> "Rect":
        half = size // 2
        return cls(center[0] - half, center[1] - half, size, size)


@dataclass
class RewardBreakdown:
    """合成報酬の内訳。total は β(r_clone + r_cover) + (1-β) r_pred"""
    r_pred: float
    r_clone: float
    r_cover: float
    beta: float
    total: float

    @classmethod
    def compose(cls, r_pred: float, r_clone: float, r_cover: float, beta: float) -> "RewardBreakdown":
        total = beta * (r_clone + r_cover) + (1.0 - beta) * r_pred
        return cls(r_pred=r_pred, r_clone=r_clone, r_cover=r_cover, beta=beta, total=total)

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


@dataclass
class TrajectoryStep:
    center: Tuple[int, int]
    action: int
    log_prob: float
    reward: RewardBreakdown
    state: Optional[np.ndarray] = field(default=None, repr=False)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "center": list(self.center),
            "action": self.action,
            "log_prob": self.log_prob,
            **self.reward.to_dict(),
        }


@dataclass
class Trajectory:
    """1 エピソード分の (状態, 行動, 対数確率, 報酬) 列"""
    image_id: str
    steps: List[TrajectoryStep] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.steps)

    def append(self, step: TrajectoryStep) -> None:
        if not np.isfinite(step.log_prob):
            raise InternalInvariantError(f"対数確率が有限ではありません: {step.log_prob}")
        self.steps.append(step)

    def rewards(self) -> np.ndarray:
        return np.array([s.reward.total for s in self.steps], dtype=np.float64)

    def to_jsonl(self) -> str:
        """1 ステップ 1 行の JSON Lines（デバッグ用）"""
        lines = [json.dumps({"image_id": self.image_id, "t": t, **s.to_dict()}) for t, s in enumerate(self.steps)]
        return "\n".join(lines) + ("\n" if lines else "")


@dataclass
class EvalPair:
    """画素単位のスコアとラベル（評価用にプールしたもの）"""
    scores: np.ndarray
    labels: np.ndarray
    image_ids: List[str] = field(default_factory=list)
    offsets: List[int] = field(default_factory=list)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.labels = np.asarray(self.labels).reshape(-1)
        if self.scores.shape != self.labels.shape:
            raise ConfigurationError(
                f"スコアとラベルの長さが一致しません: {self.scores.shape} != {self.labels.shape}"
            )
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise ConfigurationError("ラベルは 0/1 のみ許されます")
        self.labels = self.labels.astype(np.int8)

    @property
    def positives(self) -> int:
        return int(self.labels.sum())

    @property
    def negatives(self) -> int:
        return int(self.labels.size - self.labels.sum())

    @classmethod
    def pool(cls, items: Sequence[Tuple[str, np.ndarray, np.ndarray]]) -> "EvalPair":
        """(image_id, score map, mask) の列を 1 つにまとめる。"""
        ids, offsets, scores, labels = [], [], [], []
        offset = 0
        for image_id, score, mask in items:
            ids.append(image_id)
            offsets.append(offset)
            scores.append(np.asarray(score).reshape(-1))
            labels.append(np.asarray(mask).reshape(-1))
            offset += scores[-1].size
        if not scores:
            return cls(np.zeros(0), np.zeros(0))
        return cls(np.concatenate(scores), np.concatenate(labels), ids, offsets)

    def split_by_image(self) -> List["EvalPair"]:
        bounds = list(self.offsets) + [self.scores.size]
        return [
            EvalPair(self.scores[a:b], self.labels[a:b], [image_id], [0])
            for image_id, a, b in zip(self.image_ids, bounds[:-1], bounds[1:])
        ]


@dataclass
class RunManifest:
    """実行を再現するための記録"""
    command: str
    output_dir: str
    config_path: Optional[str]
    config: Dict[str, Any]
    seeds: Dict[str, int]
    build_tag: str
    created_at: str = field(default_factory=utc_now)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)
