"""LangGraph のノード関数定義"""
from pathlib import Path
from typing import Any, Callable, Dict

from .state import TrainGraphState
from ..datapipe import check_reference_counts, load_dataset
from ..orchestrator import RunState, TrainingData, joint_loop, pretrain_autoencoder, warm_predictor
from ..storage import save_checkpoint
from ..train_logger import train_logger

CHECKPOINT_NAME = "checkpoint.lprf"
TRAJECTORY_NAME = "trajectories.jsonl"

NodeFn = Callable[[TrainGraphState], Dict[str, Any]]


def _logged(stage: str) -> Callable[[NodeFn], NodeFn]:
    """例外をステージエラーとして記録してから呼び出し元へ送る。"""
    def wrap(fn: NodeFn) -> NodeFn:
        def node(state: TrainGraphState) -> Dict[str, Any]:
            try:
                return fn(state)
            except Exception as e:
                train_logger.error_stage(stage, e)
                raise
        node.__name__ = fn.__name__
        node.__doc__ = fn.__doc__
        return node
    return wrap


@_logged("load")
def node_load_data(state: TrainGraphState) -> Dict[str, Any]:
    """データセットの読み込みと前処理"""
    config = state["train_config"]
    train_logger.start_stage("load", {"root": config.data_root, "category": config.category})
    index = load_dataset(config.data_root, config.category)
    warnings = check_reference_counts(index)
    data = TrainingData.from_index(index, config)
    train_logger.end_stage("load", {
        **index.counts(),
        "labeled": len(data.labeled),
        "normal_subset": len(data.normal_subset),
    })
    return {"index": index, "data": data, "warnings": warnings}


@_logged("pretrain")
def node_pretrain(state: TrainGraphState) -> Dict[str, Any]:
    """AE の事前学習とサンプラ入力の構築"""
    config, data = state["train_config"], state["data"]
    run = RunState.new(config)
    run.trajectory_path = Path(state["output_dir"]) / TRAJECTORY_NAME
    run = pretrain_autoencoder(data.normal, config, run=run, episode_images=data.episode_pool(config))
    return {"run": run}


@_logged("warm")
def node_warm(state: TrainGraphState) -> Dict[str, Any]:
    """予測器のウォームアップ"""
    return {"run": warm_predictor(state["run"], state["data"], state["train_config"])}


@_logged("joint")
def node_joint(state: TrainGraphState) -> Dict[str, Any]:
    """サンプラ・AE・予測器の交互学習"""
    return {"run": joint_loop(state["run"], state["data"], state["train_config"])}


@_logged("save")
def node_save(state: TrainGraphState) -> Dict[str, Any]:
    """チェックポイントの保存"""
    run = state["run"]
    path = save_checkpoint(Path(state["output_dir"]) / CHECKPOINT_NAME, run.to_checkpoint())
    return {"checkpoint_path": str(path), "digests": run.digests()}
