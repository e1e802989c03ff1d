"""LangGraph 学習グラフ定義"""
from typing import Any, Dict, Union
from pathlib import Path

from .state import TrainGraphState
from .nodes import (
    node_load_data,
    node_pretrain,
    node_warm,
    node_joint,
    node_save,
)
from ..settings import TrainConfig

# LangGraph のインポート（利用可能な場合のみ）
try:
    from langgraph.graph import StateGraph, END
    LANGGRAPH_AVAILABLE = True
except ImportError:
    LANGGRAPH_AVAILABLE = False
    print("[train_graph] Warning: langgraph not installed. Using fallback.")

STAGES = (
    ("load_data", node_load_data),
    ("pretrain", node_pretrain),
    ("warm", node_warm),
    ("joint", node_joint),
    ("save", node_save),
)


def create_train_graph():
    """学習グラフを構築（load_data → pretrain → warm → joint → save）"""
    if not LANGGRAPH_AVAILABLE:
        return None

    graph = StateGraph(TrainGraphState)
    for name, fn in STAGES:
        graph.add_node(name, fn)

    graph.set_entry_point(STAGES[0][0])
    for (src, _), (dst, _) in zip(STAGES[:-1], STAGES[1:]):
        graph.add_edge(src, dst)
    graph.add_edge(STAGES[-1][0], END)

    return graph.compile()


def _initial_state(config: TrainConfig, output_dir: Union[str, Path]) -> TrainGraphState:
    return {
        "train_config": config,
        "output_dir": str(output_dir),
        "index": None,
        "data": None,
        "run": None,
        "checkpoint_path": None,
        "digests": {},
        "warnings": [],
    }


def run_train_graph(config: TrainConfig, output_dir: Union[str, Path]) -> Dict[str, Any]:
    """学習グラフを実行（langgraph が無ければ同じノードを順に呼ぶ）"""
    state = _initial_state(config, output_dir)
    if train_graph is None:
        for _, fn in STAGES:
            state.update(fn(state))
        return dict(state)
    return train_graph.invoke(state)


# グラフのシングルトンインスタンス
train_graph = create_train_graph() if LANGGRAPH_AVAILABLE else None
