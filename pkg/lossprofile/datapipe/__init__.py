"""データセットの読み込み・前処理・合成と、成果物の書き出し。"""
from .dataset import (
    REFERENCE_COUNTS,
    DatasetIndex,
    ImageEntry,
    LabeledSubset,
    check_reference_counts,
    load_dataset,
    load_mask,
    preprocess,
    preprocess_mask,
    select_labeled,
    select_normal_subset,
)
from .export import probability_to_uint8, save_map_image, save_probability_mask, save_trajectories
from .synth import synth_generate
from ..storage import Checkpoint, load_array, load_checkpoint, save_array, save_checkpoint

__all__ = [
    "REFERENCE_COUNTS",
    "DatasetIndex",
    "ImageEntry",
    "LabeledSubset",
    "check_reference_counts",
    "load_dataset",
    "load_mask",
    "preprocess",
    "preprocess_mask",
    "select_labeled",
    "select_normal_subset",
    "probability_to_uint8",
    "save_map_image",
    "save_probability_mask",
    "save_trajectories",
    "synth_generate",
    "Checkpoint",
    "load_array",
    "load_checkpoint",
    "save_array",
    "save_checkpoint",
]
