"""LangGraph 統合モジュール"""
from .state import TrainGraphState
from .train_graph import LANGGRAPH_AVAILABLE, create_train_graph, run_train_graph

__all__ = [
    "TrainGraphState",
    "LANGGRAPH_AVAILABLE",
    "create_train_graph",
    "run_train_graph",
]
