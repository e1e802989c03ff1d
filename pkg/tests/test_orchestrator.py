"""段階的学習ループのテスト（凍結区間・バッチ充填・決定性・チェックポイント）"""
import numpy as np
import pytest

from lossprofile import orchestrator
from lossprofile.datapipe import load_dataset
from lossprofile.errors import ConfigurationError, UndefinedMetricError
from lossprofile.evaluation import evaluate, excluded_ids
from lossprofile.graph import run_train_graph
from lossprofile.orchestrator import (
    RunState,
    TrainingData,
    generate_profiles,
    joint_loop,
    pretrain_autoencoder,
    warm_predictor,
)
from lossprofile.storage import load_checkpoint, save_checkpoint
from lossprofile.train_logger import train_logger


def _prepare(config):
    index = load_dataset(config.data_root, config.category)
    data = TrainingData.from_index(index, config)
    run = pretrain_autoencoder(data.normal, config, episode_images=data.episode_pool(config))
    run = warm_predictor(run, data, config)
    return index, data, run


class TestTrainingData:
    """学習データの組み立て"""

    def test_sets(self, small_config):
        index = load_dataset(small_config.data_root, small_config.category)
        data = TrainingData.from_index(index, small_config)
        assert len(data.normal) == 4
        assert len(data.labeled) == 2
        assert len(data.normal_subset) == 2
        assert len(data.predictor_set()) == 4
        assert data.labeled[0].mask.sum() > 0

    def test_episode_pool_all(self, config_factory):
        config = config_factory(episode_pool="all")
        data = TrainingData.from_index(load_dataset(config.data_root, config.category), config)
        assert len(data.episode_pool(config)) == 6


class TestStages:
    """pretrain / warm"""

    def test_pretrain_budget_and_sampler_inputs(self, small_config):
        index = load_dataset(small_config.data_root, small_config.category)
        data = TrainingData.from_index(index, small_config)
        run = pretrain_autoencoder(data.normal, small_config)
        assert run.pretrain_step == small_config.ae_pretrain_max_steps
        assert sorted(run.sampler_inputs) == sorted(r.image_id for r in data.normal)
        sampler = next(iter(run.sampler_inputs.values()))
        assert sampler.fused.values.shape == (64, 64)
        assert sampler.history.counts.sum() == 0

    def test_pretrain_requires_images(self, small_config):
        with pytest.raises(ConfigurationError):
            pretrain_autoencoder([], small_config)

    def test_warm_steps_counted(self, small_config):
        _, _, run = _prepare(small_config)
        assert run.pred_step == small_config.warm_steps
        assert run.latest_pred_loss > 0

    def test_warm_requires_labeled(self, config_factory):
        config = config_factory(labeled_per_group=0)
        index = load_dataset(config.data_root, config.category)
        data = TrainingData.from_index(index, config)
        run = pretrain_autoencoder(data.normal, config)
        with pytest.raises(ConfigurationError):
            warm_predictor(run, data, config)

    def test_zero_warm_steps_still_caches_loss(self, config_factory):
        _, _, run = _prepare(config_factory(warm_steps=0))
        assert run.pred_step == 0
        assert run.latest_pred_loss > 0

    def test_parallel_profiles_match_sequential(self, small_config):
        index = load_dataset(small_config.data_root, small_config.category)
        data = TrainingData.from_index(index, small_config)
        run = RunState.new(small_config)
        seq = generate_profiles(run.autoencoder, data.normal, 0, workers=1)
        par = generate_profiles(run.autoencoder, data.normal, 0, workers=3)
        for key in seq:
            np.testing.assert_array_equal(seq[key].values, par[key].values)


class TestJointLoop:
    """交互学習の約束"""

    def test_freeze_windows_and_batch_size(self, config_factory):
        config = config_factory(joint_steps=12, freeze_window=4, feedback_delay=8, regen_period=2)
        _, data, run = _prepare(config)
        start = run.digests()
        seen = {}

        def record(state, t):
            seen[t] = state.digests()

        joint_loop(run, data, config, on_step=record)
        for t in range(1, 5):
            assert seen[t]["pred"] == start["pred"]
        for t in range(1, 9):
            assert seen[t]["policy"] == start["policy"]
        assert seen[6]["pred"] != start["pred"]
        assert seen[9]["policy"] != start["policy"]
        assert all(seen[t]["ae"] != start["ae"] for t in seen)
        assert run.patch_counts == [config.batch_size] * 12
        assert run.policy_step == 12 - 8
        assert run.generation == 6

    def test_default_schedule_over_200_steps(self, config_factory):
        config = config_factory(
            joint_steps=200, freeze_window=50, feedback_delay=100, batch_size=32, regen_period=10, beta_horizon=300
        )
        _, data, run = _prepare(config)
        start = run.digests()
        seen = {}

        def record(state, t):
            seen[t] = state.digests()

        joint_loop(run, data, config, on_step=record)
        assert all(seen[t]["pred"] == start["pred"] for t in range(1, 51))
        assert all(seen[t]["policy"] == start["policy"] for t in range(1, 101))
        assert seen[60]["pred"] != start["pred"]
        assert seen[101]["policy"] != start["policy"]
        assert run.patch_counts == [32] * 200
        assert run.policy_step == 100

    def test_random_sampler_never_updates_policy(self, config_factory):
        config = config_factory(sampler_mode="random", joint_steps=6, feedback_delay=0)
        _, data, run = _prepare(config)
        before = run.digests()["policy"]
        joint_loop(run, data, config)
        assert run.digests()["policy"] == before
        assert run.policy_step == 0

    def test_episode_longer_than_batch(self, config_factory):
        config = config_factory(episode_len=10, batch_size=4, joint_steps=2)
        _, data, run = _prepare(config)
        joint_loop(run, data, config)
        assert run.patch_counts == [4, 4]

    def test_progress_records(self, small_config):
        _, data, run = _prepare(small_config)
        joint_loop(run, data, small_config)
        steps = train_logger.get_logs_by_stage("joint", action="step")
        assert len(steps) == small_config.joint_steps
        fields = steps[-1]["details"]
        for key in ("l_mse", "l_pred", "r_pred", "r_clone", "r_cover", "beta", "alpha", "patches"):
            assert key in fields

    def test_trajectories_written(self, small_config, tmp_path):
        _, data, run = _prepare(small_config)
        run.trajectory_path = tmp_path / "trajectories.jsonl"
        joint_loop(run, data, small_config)
        lines = run.trajectory_path.read_text(encoding="utf-8").strip().split("\n")
        assert len(lines) == small_config.joint_steps * small_config.batch_size

    def test_requires_pretrain(self, small_config):
        index = load_dataset(small_config.data_root, small_config.category)
        data = TrainingData.from_index(index, small_config)
        with pytest.raises(ConfigurationError):
            joint_loop(RunState.new(small_config), data, small_config)


class TestCheckpointAndDeterminism:
    """チェックポイントと再現性"""

    def test_checkpoint_restores_networks(self, small_config, tmp_path):
        _, data, run = _prepare(small_config)
        joint_loop(run, data, small_config)
        path = save_checkpoint(tmp_path / "c.lprf", run.to_checkpoint())
        restored = RunState.from_checkpoint(load_checkpoint(path))
        assert restored.digests() == run.digests()
        assert restored.counters() == run.counters()
        assert restored.latest_pred_loss == run.latest_pred_loss
        assert restored.config == run.config
        assert restored.policy.params.optimizer.step == run.policy.params.optimizer.step

    def test_two_runs_bit_identical(self, small_config, tmp_path):
        states = [run_train_graph(small_config, tmp_path / f"run{i}") for i in range(2)]
        a, b = (load_checkpoint(s["checkpoint_path"]) for s in states)
        assert a.arrays.keys() == b.arrays.keys()
        assert all(np.array_equal(a.arrays[k], b.arrays[k]) for k in a.arrays)
        reports = [evaluate(s["run"], s["index"]).to_json() for s in states]
        assert reports[0] == reports[1]

    def test_different_seed_differs(self, small_config, tmp_path):
        a = run_train_graph(small_config, tmp_path / "a")
        b = run_train_graph(small_config.with_seed(99), tmp_path / "b")
        assert a["digests"]["ae"] != b["digests"]["ae"]


class TestEvaluation:
    """評価"""

    def test_report_and_masks(self, small_config, tmp_path):
        state = run_train_graph(small_config, tmp_path / "run")
        run, index = state["run"], state["index"]
        report = evaluate(run, index, mask_dir=tmp_path / "masks")
        written = sorted(p.relative_to(tmp_path / "masks").as_posix() for p in (tmp_path / "masks").rglob("*.png"))
        assert written == sorted(f"{e.group}/{e.stem}.png" for e in index.test_entries)
        skipped = excluded_ids(run, index)
        assert len(skipped) == 2
        assert report.images == len(index.test_entries) - len(skipped)
        assert 0.0 <= report.auc <= 1.0 and 0.0 <= report.f1_max <= 1.0
        assert sorted(report.groups) == ["blob", "scratch"]

    def test_include_labeled(self, config_factory, tmp_path):
        config = config_factory(exclude_labeled_from_eval=False)
        state = run_train_graph(config, tmp_path / "run")
        report = evaluate(state["run"], state["index"], per_image=True)
        assert report.images == len(state["index"].test_entries)
        assert report.auc_mode == "per_image"

    def test_all_defects_labeled_names_exclusion(self, config_factory, tmp_path):
        config = config_factory(labeled_per_group=2)
        state = run_train_graph(config, tmp_path / "run")
        assert len(excluded_ids(state["run"], state["index"])) == len(state["index"].test_defective)
        with pytest.raises(UndefinedMetricError) as exc:
            evaluate(state["run"], state["index"])
        assert "exclude_labeled_from_eval" in str(exc.value)

    def test_graph_state(self, small_config, tmp_path):
        state = run_train_graph(small_config, tmp_path / "run")
        assert state["warnings"] == []
        assert (tmp_path / "run" / "checkpoint.lprf").exists()
        assert set(state["digests"]) == set(orchestrator.NETWORKS)
