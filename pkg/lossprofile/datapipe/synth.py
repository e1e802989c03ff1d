"""合成テクスチャ欠陥データセットの生成（MVTec AD と同じレイアウトで書き出す）。"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Optional, Union

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from ..errors import ConfigurationError
from ..settings import SynthSpec

TEXTURE_LOW = 0.15
TEXTURE_HIGH = 0.65
MAX_DEFECT_TRIES = 200


def _noise_texture(size: int, rng: np.random.Generator) -> np.ndarray:
    base = ndimage.gaussian_filter(rng.random((size, size)), sigma=4.0, mode="wrap")
    base = (base - base.min()) / (base.max() - base.min() + 1e-12)
    base = TEXTURE_LOW + (TEXTURE_HIGH - TEXTURE_LOW) * base
    tint = rng.uniform(0.9, 1.0, size=3)
    return (base[None] * tint[:, None, None]).astype(np.float32)


def _grid_texture(size: int, rng: np.random.Generator) -> np.ndarray:
    period = int(rng.integers(12, 20))
    phase_r, phase_c = (int(p) for p in rng.integers(0, period, size=2))
    rows = (np.arange(size) + phase_r) % period < 2
    cols = (np.arange(size) + phase_c) % period < 2
    lines = rows[:, None] | cols[None, :]
    jitter = ndimage.gaussian_filter(rng.random((size, size)), sigma=1.5) * 0.1
    base = np.where(lines, TEXTURE_HIGH - 0.1, TEXTURE_LOW + 0.1) + jitter - 0.05
    base = np.clip(base, TEXTURE_LOW, TEXTURE_HIGH)
    return np.repeat(base[None], 3, axis=0).astype(np.float32)


def make_texture(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.texture == "grid":
        return _grid_texture(spec.image_size, rng)
    return _noise_texture(spec.image_size, rng)


def _draw_blob(size: int, area: float, rng: np.random.Generator) -> Optional[np.ndarray]:
    aspect = rng.uniform(0.5, 2.0)
    a = np.sqrt(area / (np.pi * aspect))
    b = a * aspect
    if 2 * max(a, b) + 2 >= size:
        return None
    cy = rng.uniform(b + 1, size - b - 1)
    cx = rng.uniform(a + 1, size - a - 1)
    canvas = Image.new("L", (size, size), 0)
    ImageDraw.Draw(canvas).ellipse([cx - a, cy - b, cx + a, cy + b], fill=255)
    return np.asarray(canvas) > 0


def _draw_scratch(size: int, area: float, rng: np.random.Generator) -> Optional[np.ndarray]:
    width = int(rng.integers(2, 5))
    length = area / width
    angle = rng.uniform(0, np.pi)
    dx, dy = 0.5 * length * np.cos(angle), 0.5 * length * np.sin(angle)
    margin = width + 1
    if 2 * (max(abs(dx), abs(dy)) + margin) >= size:
        return None
    cx = rng.uniform(abs(dx) + margin, size - abs(dx) - margin)
    cy = rng.uniform(abs(dy) + margin, size - abs(dy) - margin)
    canvas = Image.new("L", (size, size), 0)
    ImageDraw.Draw(canvas).line([(cx - dx, cy - dy), (cx + dx, cy + dy)], fill=255, width=width)
    return np.asarray(canvas) > 0


def make_defect_mask(spec: SynthSpec, family: str, rng: np.random.Generator) -> np.ndarray:
    """面積が [area_min, area_max] に入るまで引き直す。"""
    draw = _draw_scratch if family == "scratch" else _draw_blob
    for _ in range(MAX_DEFECT_TRIES):
        area = rng.uniform(spec.area_min, spec.area_max)
        mask = draw(spec.image_size, area, rng)
        if mask is not None and spec.area_min <= int(mask.sum()) <= spec.area_max:
            return mask
    raise ConfigurationError(
        f"面積 [{spec.area_min}, {spec.area_max}] の {family} 欠陥を生成できません（画像 {spec.image_size}px）",
        fields=("area_min", "area_max"),
    )


def inject_defect(texture: np.ndarray, mask: np.ndarray, offset: float) -> np.ndarray:
    """マスク内の画素だけに輝度オフセットを加える。"""
    out = texture.copy()
    out[:, mask] = np.clip(out[:, mask] + offset, 0.0, 1.0)
    return out


def _save_rgb(path: Path, image: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    pixels = np.clip(np.round(image.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(pixels).save(path)


def _save_mask(path: Path, mask: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(mask.astype(np.uint8) * 255).save(path)


def synth_generate(spec: SynthSpec, out_dir: Union[str, Path], seed: Optional[int] = None) -> Path:
    """<out_dir>/<category>/ に train/good, test/<group>, ground_truth/<group> を書き出す。

    欠陥グループ名は欠陥ファミリ名（blob / scratch）。欠陥画像はファミリを順番に割り当てる。
    """
    seed = spec.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    category_dir = Path(out_dir) / spec.category

    for i in range(spec.n_train_normal):
        _save_rgb(category_dir / "train" / "good" / f"{i:03d}.png", make_texture(spec, rng))
    for i in range(spec.n_test_normal):
        _save_rgb(category_dir / "test" / "good" / f"{i:03d}.png", make_texture(spec, rng))
    counters = {family: 0 for family in spec.defect_families}
    for i in range(spec.n_test_defective):
        family = spec.defect_families[i % len(spec.defect_families)]
        stem = f"{counters[family]:03d}"
        counters[family] += 1
        mask = make_defect_mask(spec, family, rng)
        image = inject_defect(make_texture(spec, rng), mask, spec.intensity_offset)
        _save_rgb(category_dir / "test" / family / f"{stem}.png", image)
        _save_mask(category_dir / "ground_truth" / family / f"{stem}_mask.png", mask)

    record = {**spec.model_dump(mode="json"), "seed": seed}
    (category_dir / "synth_spec.json").write_text(json.dumps(record, indent=2, sort_keys=True), encoding="utf-8")
    return category_dir