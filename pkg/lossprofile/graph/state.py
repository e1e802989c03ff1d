"""LangGraph 用の学習パイプライン状態"""
from typing import Dict, List, Optional, TypedDict

from ..datapipe import DatasetIndex
from ..orchestrator import RunState, TrainingData
from ..settings import TrainConfig


class TrainGraphState(TypedDict):
    """学習グラフの状態"""
    # 入力
    train_config: TrainConfig
    output_dir: str

    # データ
    index: Optional[DatasetIndex]
    data: Optional[TrainingData]

    # 学習状態
    run: Optional[RunState]

    # 出力
    checkpoint_path: Optional[str]
    digests: Dict[str, str]

    # 既知カテゴリとの枚数の食い違い
    warnings: List[str]
