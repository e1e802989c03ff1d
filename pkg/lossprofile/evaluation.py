"""学習済みチェックポイントの評価: テスト画像の予測・マスク書き出し・指標レポート。"""
from __future__ import annotations

from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .datapipe import DatasetIndex, ImageEntry, select_labeled
from .datapipe.export import save_probability_mask
from .errors import UndefinedMetricError
from .metrics import MetricReport, build_report
from .models import EvalPair
from .orchestrator import ImageRecord, RunState
from .recon import generate_loss_profile
from .segpred import predict_map
from .train_logger import train_logger

Item = Tuple[str, np.ndarray, np.ndarray]


@dataclass
class Prediction:
    entry: ImageEntry
    prob: np.ndarray
    mask: np.ndarray


def predict_entry(run: RunState, entry: ImageEntry) -> Prediction:
    record = ImageRecord.load(entry, run.config.image_size)
    run.autoencoder.eval()
    profile = generate_loss_profile(record.image, run.autoencoder, record.image_id, run.generation)
    return Prediction(entry=entry, prob=predict_map(profile, run.predictor), mask=record.mask)


def excluded_ids(run: RunState, index: DatasetIndex) -> set:
    """学習に使ったラベル付き異常（評価から除外するもの）"""
    config = run.config
    if not config.exclude_labeled_from_eval:
        return set()
    return set(select_labeled(index, config.data_seed, config.labeled_per_group).image_ids())


def evaluate(
    run: RunState,
    index: DatasetIndex,
    per_image: bool = False,
    heldout: bool = False,
    mask_dir: Optional[Path] = None,
) -> MetricReport:
    """全テスト画像を予測し、除外対象以外の画素をプールして指標を出す。

    mask_dir を渡すと全テスト画像の予測マスクを <mask_dir>/<group>/<stem>.png に書く。
    """
    entries = index.test_entries
    train_logger.start_stage("eval", {"images": len(entries), "per_image": per_image})
    workers = run.config.profile_workers
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            predictions = list(pool.map(lambda e: predict_entry(run, e), entries))
    else:
        predictions = [predict_entry(run, e) for e in entries]

    skip = excluded_ids(run, index)
    items: List[Item] = []
    groups: Dict[str, List[Item]] = defaultdict(list)
    for p in predictions:
        if mask_dir is not None:
            save_probability_mask(Path(mask_dir) / p.entry.group / f"{p.entry.stem}.png", p.prob)
        if p.entry.image_id in skip:
            continue
        item = (p.entry.image_id, p.prob, p.mask)
        items.append(item)
        if p.entry.is_defective:
            groups[p.entry.group].append(item)

    pairs = EvalPair.pool(items)
    if skip and not pairs.positives:
        e = UndefinedMetricError(
            f"学習に使ったラベル付き異常 {len(skip)} 枚を除外した結果、評価対象に異常画素がありません"
            "（exclude_labeled_from_eval=false で含めて評価できます）"
        )
        train_logger.error_stage("eval", e)
        raise e
    split = None
    if heldout:
        select, report = EvalPair.pool(items[0::2]), EvalPair.pool(items[1::2])
        if select.positives and report.positives:
            split = (select, report)
    try:
        result = build_report(
            pairs,
            per_image=per_image,
            groups={g: EvalPair.pool(v) for g, v in groups.items()},
            heldout=split,
        )
    except UndefinedMetricError as e:
        train_logger.error_stage("eval", e)
        raise
    train_logger.end_stage("eval", {"f1_max": result.f1_max, "auc": result.auc, "excluded": len(skip)})
    return result
