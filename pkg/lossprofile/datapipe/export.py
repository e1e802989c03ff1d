"""予測マスク・検査用マップ・軌跡の書き出し。"""
from __future__ import annotations

from pathlib import Path
from typing import Iterable, Union

import numpy as np
from PIL import Image

from ..imagefeat import normalize_map
from ..models import Trajectory

PathLike = Union[str, Path]


def probability_to_uint8(prob: np.ndarray) -> np.ndarray:
    """確率 × 255 を四捨五入した 8 bit グレースケール"""
    return np.clip(np.round(np.asarray(prob, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_probability_mask(path: PathLike, prob: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(probability_to_uint8(prob)).save(path)
    return path


def save_map_image(path: PathLike, values: np.ndarray) -> Path:
    """任意スケールのマップを [0,1] に正規化して保存する（目視確認用）。"""
    return save_probability_mask(path, normalize_map(values))


def save_trajectories(path: PathLike, trajectories: Iterable[Trajectory]) -> Path:
    """1 ステップ 1 行の JSON Lines（追記）"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", encoding="utf-8") as f:
        for traj in trajectories:
            f.write(traj.to_jsonl())
    return path
