"""CLI エントリ: train / eval / synth / profile。

終了コード: 0 成功, 1 その他の失敗, 2 設定エラー, 3 データエラー, 4 内部不変条件違反。
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from lossprofile import __version__
from lossprofile.datapipe import load_dataset, preprocess, save_map_image, save_probability_mask, synth_generate
from lossprofile.errors import (
    ConfigurationError,
    IngestionError,
    InternalInvariantError,
    PersistenceError,
    UndefinedMetricError,
)
from lossprofile.evaluation import evaluate
from lossprofile.graph import run_train_graph
from lossprofile.imagefeat import build_fused_map
from lossprofile.models import RunManifest
from lossprofile.orchestrator import RunState
from lossprofile.recon import generate_loss_profile
from lossprofile.segpred import predict_map
from lossprofile.settings import SynthSpec, TrainConfig, load_config, load_model, parse_model, settings
from lossprofile.storage import load_checkpoint, save_arrays
from lossprofile.train_logger import train_logger

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_INTERNAL = 4

MANIFEST_NAME = "manifest.json"
PROGRESS_NAME = "progress.jsonl"
REPORT_NAME = "report.json"


def exit_code_for(error: BaseException) -> int:
    if isinstance(error, ConfigurationError):
        return EXIT_CONFIG
    if isinstance(error, (IngestionError, PersistenceError, UndefinedMetricError)):
        return EXIT_DATA
    if isinstance(error, InternalInvariantError):
        return EXIT_INTERNAL
    return EXIT_FAILURE


def build_tag(config: TrainConfig) -> str:
    return f"v{__version__}-{config.digest()[:8]}"


def _dump_json(path: Path, payload: Dict[str, Any]) -> Path:
    path.write_text(json.dumps(payload, ensure_ascii=False, indent=2, sort_keys=True), encoding="utf-8")
    return path


def write_manifest(out: Path, command: str, config_path: Optional[str], config: TrainConfig) -> Path:
    manifest = RunManifest(
        command=command,
        output_dir=str(out),
        config_path=config_path,
        config=config.model_dump(mode="json"),
        seeds=config.seeds(),
        build_tag=build_tag(config),
    )
    return _dump_json(out / MANIFEST_NAME, manifest.to_dict())


def resolve_config(args: argparse.Namespace) -> TrainConfig:
    """--config を読み、--dataset / --category / --seed で上書きする。"""
    config = load_config(args.config) if args.config else TrainConfig()
    overrides: Dict[str, Any] = {}
    if getattr(args, "dataset", None):
        overrides["data_root"] = str(args.dataset)
    if getattr(args, "category", None):
        overrides["category"] = args.category
    if overrides:
        config = parse_model(TrainConfig, {**config.model_dump(), **overrides}, source="command line")
    if args.seed is not None:
        config = config.with_seed(args.seed)
    return config


def cmd_train(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    # 出力ディレクトリを作る前にデータセットの有無を確認する
    load_dataset(config.data_root, config.category)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name in (PROGRESS_NAME, "trajectories.jsonl"):
        (out / name).unlink(missing_ok=True)
    write_manifest(out, "train", args.config, config)

    train_logger.attach(out / PROGRESS_NAME)
    try:
        state = run_train_graph(config, out)
    finally:
        train_logger.detach()
    for warning in state["warnings"]:
        print(f"[LOAD] 警告 | {warning}")
    print(json.dumps({"checkpoint": state["checkpoint_path"], "digests": state["digests"]}, indent=2))
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    run = RunState.from_checkpoint(load_checkpoint(args.checkpoint))
    config = run.config
    index = load_dataset(args.dataset or config.data_root, args.category or config.category)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, "eval", None, config)

    report = evaluate(
        run,
        index,
        per_image=args.per_image,
        heldout=args.heldout,
        mask_dir=None if args.no_masks else out / "masks",
    )
    _dump_json(out / REPORT_NAME, report.to_dict())
    print(report.to_json())
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    spec = load_model(SynthSpec, args.config) if args.config else SynthSpec()
    category_dir = synth_generate(spec, args.out, seed=args.seed)
    index = load_dataset(args.out, spec.category)
    print(json.dumps({"dataset": str(category_dir), **index.counts()}, indent=2))
    return EXIT_OK


def cmd_profile(args: argparse.Namespace) -> int:
    """1 枚の画像について損失プロファイル・融合マップ・予測マスクを書き出す。"""
    run = RunState.from_checkpoint(load_checkpoint(args.checkpoint))
    config = run.config
    image_path = Path(args.image)
    image = preprocess(image_path, config.image_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, "profile", None, config)

    run.autoencoder.eval()
    profile = generate_loss_profile(image, run.autoencoder, image_path.stem, run.generation)
    fused = build_fused_map(image, profile.values, config.fusion_weights, config.blur_sigma)
    prob = predict_map(profile, run.predictor)

    save_map_image(out / "profile.png", profile.values)
    save_probability_mask(out / "fused.png", fused.values)
    save_probability_mask(out / "mask.png", prob)
    save_arrays(
        out / "profile.lprf",
        {"profile": profile.values, "fused": fused.values, "prediction": prob},
        meta={"image": str(image_path), "generation": run.generation},
    )
    print(f"[PROFILE] 完了 | {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Loss-profile pixel anomaly detection")
    parser.add_argument("--quiet", action="store_true", help="コンソール出力を抑制")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="pretrain → warm → joint を実行しチェックポイントを保存")
    train.add_argument("--config", help="TrainConfig の JSON ファイル")
    train.add_argument("--out", default=str(settings.output_root / "train"), help="出力ディレクトリ")
    train.add_argument("--seed", type=int, help="全シードをこの値から派生させる")
    train.add_argument("--dataset", help="データセットのルート（data_root を上書き）")
    train.add_argument("--category", help="カテゴリ名（category を上書き）")
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="チェックポイントをテスト画像で評価")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--dataset", help="データセットのルート（既定: チェックポイントの data_root）")
    ev.add_argument("--category")
    ev.add_argument("--out", default=str(settings.output_root / "eval"))
    ev.add_argument("--per-image", action="store_true", help="AUC を画像ごとに計算して平均する")
    ev.add_argument("--heldout", action="store_true", help="閾値選択と報告を別画像で行う F1 も出す")
    ev.add_argument("--no-masks", action="store_true", help="予測マスクを書き出さない")
    ev.set_defaults(func=cmd_eval)

    synth = sub.add_parser("synth", help="合成テクスチャ欠陥データセットを生成")
    synth.add_argument("--config", help="SynthSpec の JSON ファイル")
    synth.add_argument("--out", default=str(settings.data_root))
    synth.add_argument("--seed", type=int)
    synth.set_defaults(func=cmd_synth)

    profile = sub.add_parser("profile", help="1 枚の画像の損失プロファイルを書き出す")
    profile.add_argument("--checkpoint", required=True)
    profile.add_argument("--image", required=True)
    profile.add_argument("--out", default=str(settings.output_root / "profile"))
    profile.set_defaults(func=cmd_profile)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.quiet:
        settings.console_log = False
    try:
        return args.func(args)
    except Exception as e:
        print(f"Error: {type(e).__name__}: {e}", file=sys.stderr)
        fields = getattr(e, "fields", ())
        if fields:
            print(f"対象フィールド: {', '.join(fields)}", file=sys.stderr)
        return exit_code_for(e)


if __name__ == "__main__":
    sys.exit(main())
