"""画素単位の評価指標: F1max（閾値全探索）と AUC（Mann-Whitney）。"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Mapping, Optional, Tuple

import numpy as np
from scipy.stats import rankdata

from .errors import UndefinedMetricError
from .models import EvalPair


def _f1_counts(tp: np.ndarray, fp: np.ndarray, positives: int) -> np.ndarray:
    # 2TP / (2TP + FP + FN) = 2TP / (TP + FP + P)
    tp = np.asarray(tp, dtype=np.float64)
    return 2.0 * tp / (tp + np.asarray(fp, dtype=np.float64) + positives)


def f1_max(pairs: EvalPair) -> Tuple[float, float]:
    """全ての異なるスコア値を閾値（score >= t で陽性）として F1 の最大を返す。

    同点なら低い閾値を採用する。
    """
    if pairs.scores.size == 0 or pairs.positives == 0:
        raise UndefinedMetricError("正例が無いため F1 が定義できません")
    scores, labels = pairs.scores, pairs.labels
    thresholds = np.unique(scores)
    pos = np.sort(scores[labels == 1])
    neg = np.sort(scores[labels == 0])
    tp = pos.size - np.searchsorted(pos, thresholds, side="left")
    fp = neg.size - np.searchsorted(neg, thresholds, side="left")
    f1 = _f1_counts(tp, fp, pos.size)
    best = int(np.argmax(f1))
    return float(f1[best]), float(thresholds[best])


def f1_at_threshold(pairs: EvalPair, threshold: float) -> float:
    """固定閾値での F1（score >= threshold を陽性とする）"""
    if pairs.positives == 0:
        raise UndefinedMetricError("正例が無いため F1 が定義できません")
    predicted = pairs.scores >= threshold
    tp = int(np.sum(predicted & (pairs.labels == 1)))
    fp = int(np.sum(predicted & (pairs.labels == 0)))
    return float(_f1_counts(tp, fp, pairs.positives))


def heldout_f1(select: EvalPair, report: EvalPair) -> Tuple[float, float]:
    """select 側で閾値を決め、report 側の F1 を返す。"""
    _, threshold = f1_max(select)
    return f1_at_threshold(report, threshold), threshold


def auc(pairs: EvalPair) -> float:
    """(正例, 負例) の組で正例が高い割合。同点は 1/2。"""
    n_pos, n_neg = pairs.positives, pairs.negatives
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(f"AUC には正例と負例の両方が必要です (正例 {n_pos}, 負例 {n_neg})")
    ranks = rankdata(pairs.scores, method="average")
    u = ranks[pairs.labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def per_image_auc(pairs: EvalPair) -> float:
    """画像ごとの AUC の平均（片方のクラスしか無い画像は除外）"""
    values = []
    for part in pairs.split_by_image():
        if part.positives and part.negatives:
            values.append(auc(part))
    if not values:
        raise UndefinedMetricError("正例と負例の両方を含む画像がありません")
    return float(np.mean(values))


@dataclass
class MetricReport:
    f1_max: float
    best_threshold: float
    auc: float
    positives: int
    negatives: int
    auc_mode: str = "pooled"
    images: int = 0
    interpolation: str = "bilinear"
    heldout: Optional[Dict[str, float]] = None
    groups: Dict[str, Dict[str, Any]] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, indent=2, sort_keys=True)


def _group_entry(pairs: EvalPair, per_image: bool) -> Dict[str, Any]:
    entry: Dict[str, Any] = {"positives": pairs.positives, "negatives": pairs.negatives, "images": len(pairs.image_ids)}
    try:
        entry["f1_max"], entry["best_threshold"] = f1_max(pairs)
    except UndefinedMetricError:
        entry["f1_max"] = entry["best_threshold"] = None
    try:
        entry["auc"] = per_image_auc(pairs) if per_image else auc(pairs)
    except UndefinedMetricError:
        entry["auc"] = None
    return entry


def build_report(
    pairs: EvalPair,
    per_image: bool = False,
    groups: Optional[Mapping[str, EvalPair]] = None,
    heldout: Optional[Tuple[EvalPair, EvalPair]] = None,
) -> MetricReport:
    """プールした画素から指標レポートを作る。groups は欠陥グループ別の内訳。"""
    score, threshold = f1_max(pairs)
    report = MetricReport(
        f1_max=score,
        best_threshold=threshold,
        auc=per_image_auc(pairs) if per_image else auc(pairs),
        positives=pairs.positives,
        negatives=pairs.negatives,
        auc_mode="per_image" if per_image else "pooled",
        images=len(pairs.image_ids),
    )
    if heldout is not None:
        f1, t = heldout_f1(*heldout)
        report.heldout = {"f1": f1, "threshold": t}
    for name in sorted(groups or {}):
        report.groups[name] = _group_entry(groups[name], per_image)
    return report
