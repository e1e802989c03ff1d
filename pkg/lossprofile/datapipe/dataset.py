"""MVTec AD 形式のデータセット読み込み・前処理・ラベル付き異常の選択。

レイアウト:
    <root>/<category>/train/good/*.png
    <root>/<category>/test/<group>/*.png          (group == "good" は正常)
    <root>/<category>/ground_truth/<group>/<stem>_mask.png
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from ..errors import IngestionError

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}
GOOD = "good"
MASK_SUFFIX = "_mask"

Split = Literal["train", "test"]


@dataclass(frozen=True)
class ImageEntry:
    path: Path
    split: Split
    group: str
    mask_path: Optional[Path] = None

    @property
    def stem(self) -> str:
        return self.path.stem

    @property
    def image_id(self) -> str:
        return f"{self.split}/{self.group}/{self.stem}"

    @property
    def is_defective(self) -> bool:
        return self.group != GOOD


@dataclass
class DatasetIndex:
    """1 カテゴリ分の画像一覧（パス順にソート済み）"""
    category: str
    root: Path
    entries: List[ImageEntry] = field(default_factory=list)

    @property
    def train_normal(self) -> List[ImageEntry]:
        return [e for e in self.entries if e.split == "train"]

    @property
    def test_normal(self) -> List[ImageEntry]:
        return [e for e in self.entries if e.split == "test" and not e.is_defective]

    @property
    def test_defective(self) -> List[ImageEntry]:
        return [e for e in self.entries if e.split == "test" and e.is_defective]

    @property
    def test_entries(self) -> List[ImageEntry]:
        return [e for e in self.entries if e.split == "test"]

    @property
    def groups(self) -> List[str]:
        return sorted({e.group for e in self.test_defective})

    def counts(self) -> Dict[str, int]:
        return {
            "train": len(self.train_normal),
            "good_test": len(self.test_normal),
            "defective_test": len(self.test_defective),
            "groups": len(self.groups),
        }


def _list_images(directory: Path) -> List[Path]:
    return sorted(p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def _find_mask(category_dir: Path, group: str, stem: str) -> Optional[Path]:
    gt_dir = category_dir / "ground_truth" / group
    for suffix in (".png", ".bmp"):
        for name in (f"{stem}{MASK_SUFFIX}{suffix}", f"{stem}{suffix}"):
            candidate = gt_dir / name
            if candidate.is_file():
                return candidate
    return None


def load_dataset(root_path: Union[str, Path], category: str) -> DatasetIndex:
    """ディレクトリを走査して DatasetIndex を作る。欠陥画像にはマスクが必須。"""
    root = Path(root_path)
    category_dir = root / category
    if not root.is_dir():
        raise IngestionError(f"データセットのルートが見つかりません: {root}")
    train_dir = category_dir / "train" / GOOD
    test_dir = category_dir / "test"
    if not train_dir.is_dir() or not test_dir.is_dir():
        raise IngestionError(
            f"未知のレイアウトです（{category}/train/good と {category}/test が必要）: {category_dir}"
        )

    entries = [ImageEntry(path=p, split="train", group=GOOD) for p in _list_images(train_dir)]
    for group_dir in sorted(d for d in test_dir.iterdir() if d.is_dir()):
        group = group_dir.name
        for path in _list_images(group_dir):
            mask_path = None
            if group != GOOD:
                mask_path = _find_mask(category_dir, group, path.stem)
                if mask_path is None:
                    raise IngestionError(f"欠陥画像に対応するマスクがありません: {path}")
            entries.append(ImageEntry(path=path, split="test", group=group, mask_path=mask_path))
    if not entries:
        raise IngestionError(f"画像が 1 枚もありません: {category_dir}")
    entries.sort(key=lambda e: str(e.path))
    return DatasetIndex(category=category, root=root, entries=entries)


def _open(path: Path) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
        return img
    except (UnidentifiedImageError, OSError) as e:
        raise IngestionError(f"画像をデコードできません: {path}: {e}") from e


def preprocess(path: Union[str, Path], size: int = 256) -> np.ndarray:
    """RGB にそろえて size×size にバイリニア縮小し、[0,1] の (3,H,W) float32 を返す。

    グレースケールは 3 チャネルに複製する。
    """
    img = _open(Path(path))
    if img.mode not in ("L", "P", "RGB", "RGBA", "LA"):
        raise IngestionError(f"8 bit 画像ではありません: {path} (mode={img.mode})")
    img = img.convert("RGB")
    if img.size != (size, size):
        img = img.resize((size, size), Image.Resampling.BILINEAR)
    return (np.asarray(img, dtype=np.float32) / 255.0).transpose(2, 0, 1).copy()


def preprocess_mask(path: Union[str, Path], size: int = 256) -> np.ndarray:
    """最近傍でリサイズして 0.5 で二値化した (H,W) uint8 マスク"""
    img = _open(Path(path)).convert("L")
    if img.size != (size, size):
        img = img.resize((size, size), Image.Resampling.NEAREST)
    return (np.asarray(img, dtype=np.float32) / 255.0 >= 0.5).astype(np.uint8)


def load_mask(entry: ImageEntry, size: int = 256) -> np.ndarray:
    """正常画像は全 0 のマスクを返す。"""
    if entry.mask_path is None:
        return np.zeros((size, size), dtype=np.uint8)
    return preprocess_mask(entry.mask_path, size)


@dataclass
class LabeledSubset:
    """欠陥グループごとに選んだラベル付き異常画像"""
    seed: int
    per_group: int
    selections: Dict[str, List[ImageEntry]] = field(default_factory=dict)

    @property
    def entries(self) -> List[ImageEntry]:
        return [e for g in sorted(self.selections) for e in self.selections[g]]

    def image_ids(self) -> List[str]:
        return [e.image_id for e in self.entries]


def select_labeled(index: DatasetIndex, seed: int, per_group: int = 5) -> LabeledSubset:
    """グループごとに min(per_group, 枚数) 枚を非復元抽出する。"""
    rng = np.random.default_rng(seed)
    subset = LabeledSubset(seed=seed, per_group=per_group)
    for group in index.groups:
        candidates = [e for e in index.test_defective if e.group == group]
        k = min(per_group, len(candidates))
        chosen = np.sort(rng.choice(len(candidates), size=k, replace=False)) if k else []
        subset.selections[group] = [candidates[i] for i in chosen]
    return subset


def select_normal_subset(entries: Sequence[ImageEntry], size: int, seed: int) -> List[ImageEntry]:
    """予測器の負例に使う正常画像の部分集合"""
    k = min(size, len(entries))
    if k == 0:
        return []
    rng = np.random.default_rng(seed)
    return [entries[i] for i in np.sort(rng.choice(len(entries), size=k, replace=False))]


# 実データ（MVTec AD）の 5 カテゴリの枚数: train, good_test, defective_test, groups
REFERENCE_COUNTS: Dict[str, Dict[str, int]] = {
    "grid": {"train": 264, "good_test": 21, "defective_test": 57, "groups": 5},
    "wood": {"train": 247, "good_test": 19, "defective_test": 60, "groups": 5},
    "cable": {"train": 224, "good_test": 58, "defective_test": 92, "groups": 8},
    "toothbrush": {"train": 60, "good_test": 12, "defective_test": 30, "groups": 1},
    "transistor": {"train": 231, "good_test": 60, "defective_test": 40, "groups": 4},
}


def check_reference_counts(index: DatasetIndex) -> List[str]:
    """既知カテゴリなら枚数を照合し、食い違いを文字列で返す（未知カテゴリは空）。"""
    expected = REFERENCE_COUNTS.get(index.category.lower())
    if expected is None:
        return []
    actual = index.counts()
    return [
        f"{key}: 期待 {value}, 実際 {actual[key]}"
        for key, value in expected.items()
        if actual[key] != value
    ]
