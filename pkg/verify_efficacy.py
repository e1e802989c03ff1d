"""合成データでのエンドツーエンド検証（方策サンプラ vs ランダムサンプラ）。

使い方:
    python verify_efficacy.py --workdir runs/efficacy            # 3 シード × 2 モード
    python verify_efficacy.py --workdir runs/efficacy --check-determinism
"""
import sys
import json
import argparse
from pathlib import Path

import numpy as np

from lossprofile.datapipe import load_dataset, synth_generate
from lossprofile.evaluation import evaluate
from lossprofile.graph import run_train_graph
from lossprofile.settings import SynthSpec, TrainConfig, disable_console_log
from lossprofile.storage import load_checkpoint

SEEDS = (0, 1, 2)
AUC_BAR = 0.85

SPEC = SynthSpec(
    category="synthetic",
    image_size=256,
    n_train_normal=40,
    n_test_normal=10,
    n_test_defective=10,
    defect_families=["blob"],
    intensity_offset=0.3,
    area_min=200,
    area_max=800,
)


def recipe(data_root: Path, seed: int, sampler_mode: str) -> TrainConfig:
    config = TrainConfig(
        data_root=str(data_root),
        category=SPEC.category,
        ae_pretrain_max_steps=500,
        warm_steps=200,
        joint_steps=1000,
        sampler_mode=sampler_mode,
    )
    return config.with_seed(seed)


def run_once(data_root: Path, out: Path, seed: int, sampler_mode: str):
    config = recipe(data_root, seed, sampler_mode)
    state = run_train_graph(config, out)
    report = evaluate(state["run"], state["index"])
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    return report, state["checkpoint_path"]


def efficacy(workdir: Path) -> bool:
    data_root = workdir / "data"
    synth_generate(SPEC, data_root)
    load_dataset(data_root, SPEC.category)

    aucs = {"policy": [], "random": []}
    for mode in aucs:
        for seed in SEEDS:
            report, _ = run_once(data_root, workdir / f"{mode}-{seed}", seed, mode)
            aucs[mode].append(report.auc)
            print(f"{mode} seed={seed}: auc={report.auc:.4f} f1_max={report.f1_max:.4f}")

    policy_median = float(np.median(aucs["policy"]))
    random_median = float(np.median(aucs["random"]))
    print(json.dumps({"policy": aucs["policy"], "random": aucs["random"]}, indent=2))
    ok = True
    if policy_median < AUC_BAR:
        print(f"FAILURE: 方策サンプラの pooled AUC 中央値 {policy_median:.4f} が {AUC_BAR} に届きません")
        ok = False
    if policy_median < random_median:
        print(f"FAILURE: 方策サンプラの中央値 {policy_median:.4f} < ランダム {random_median:.4f}")
        ok = False
    if ok:
        print(f"SUCCESS: 中央値 policy={policy_median:.4f} random={random_median:.4f}")
    return ok


def determinism(workdir: Path) -> bool:
    data_root = workdir / "data"
    if not (data_root / SPEC.category).is_dir():
        synth_generate(SPEC, data_root)
    reports, checkpoints = [], []
    for i in range(2):
        report, path = run_once(data_root, workdir / f"determinism-{i}", SEEDS[0], "policy")
        reports.append(report.to_json())
        checkpoints.append(load_checkpoint(path))
    same_arrays = checkpoints[0].arrays.keys() == checkpoints[1].arrays.keys() and all(
        np.array_equal(checkpoints[0].arrays[k], checkpoints[1].arrays[k]) for k in checkpoints[0].arrays
    )
    if same_arrays and reports[0] == reports[1]:
        print("SUCCESS: 2 回の実行でチェックポイントとレポートが一致しました")
        return True
    print("FAILURE: 同じ設定の 2 回の実行で結果が異なります")
    return False


if __name__ == "__main__":
    parser = argparse.ArgumentParser()
    parser.add_argument("--workdir", default="runs/efficacy")
    parser.add_argument("--check-determinism", action="store_true")
    parser.add_argument("--quiet", action="store_true")
    args = parser.parse_args()

    if args.quiet:
        disable_console_log()
    workdir = Path(args.workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    ok = determinism(workdir) if args.check_determinism else efficacy(workdir)
    sys.exit(0 if ok else 1)
