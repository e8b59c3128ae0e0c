import json

import numpy as np
import pytest

from sphg import tensor as T
from sphg.checkpoint import load_checkpoint
from sphg.errors import ContractError, NumericError
from sphg.losses import LossWeights
from sphg.network import NetworkConfig, build_network
from sphg.optim import Adam
from sphg.pipeline import StageSchedule, check_gating, run_pipeline, train_epoch

from conftest import tiny_config


class TestSchedule:
    def test_task_order(self):
        tasks = StageSchedule(2, 1, 2, 1, 1, (1.0, 0.5)).tasks([3, 5])
        stages = [t["stage"] for t in tasks]
        assert stages == ["warmup"] * 2 + ["cen"] + ["select"] * 4 + ["prune"] + ["finetune"] * 2
        assert [t.get("layer") for t in tasks if t["stage"] == "select"] == [3, 3, 5, 5]

    def test_from_config_defaults(self):
        s = StageSchedule.from_config(tiny_config(schedule__prune_epochs=30))
        assert s.prune == 30 and s.tiers == (1.0, 0.6)


class TestGating:
    def test_cen_gradient_in_warmup_is_a_contract_breach(self):
        net = build_network(NetworkConfig(input_size=16, depth=1, base_channels=2))
        p = next(iter(net.cen_parameters().values()))
        p.grad = np.ones_like(p.data)
        with pytest.raises(ContractError):
            check_gating(net, "warmup")
        check_gating(net, "cen")

    def test_warmup_epoch_leaves_cen_untouched(self, tiny_data):
        cfg = tiny_config()
        net = build_network(cfg.network())
        before = {n: p.data.copy() for n, p in net.cen_parameters().items()}
        train_epoch(net, Adam(), tiny_data[0], "warmup", LossWeights(), np.random.default_rng(0), 8)
        for n, p in net.cen_parameters().items():
            np.testing.assert_array_equal(p.data, before[n])


class TestRun:
    def test_full_tiny_run(self, tmp_path, tiny_data):
        cfg = tiny_config()
        run = run_pipeline(cfg, tmp_path, *tiny_data)
        assert run.net.all_committed()
        for name in ("metrics.tsv", "prune_log.txt", "selection.txt", "final.ckpt", "prune_curve.tsv",
                     "tier_1.00.ckpt", "summary.json", "stages.log"):
            assert (tmp_path / name).exists(), name
        rows = (tmp_path / "metrics.tsv").read_text().splitlines()
        assert len(rows) == 1 + len(run.tasks)
        stages = (tmp_path / "stages.log").read_text()
        assert stages.index("enter warmup") < stages.index("enter cen") < stages.index("enter select") \
            < stages.index("enter prune") < stages.index("enter finetune")

    def test_zero_prune_epochs_gives_selected_baseline(self, tmp_path, tiny_data):
        cfg = tiny_config(schedule__prune_epochs=0, schedule__finetune_epochs=0)
        run_pipeline(cfg, tmp_path, *tiny_data)
        final = load_checkpoint(tmp_path / "final.ckpt").net
        assert final.all_committed()
        assert final.num_params() == load_checkpoint(tmp_path / "tier_1.00.ckpt").net.num_params()
        assert list(json.loads((tmp_path / "summary.json").read_text())["tiers"]) == ["1.00"]

    def test_resume_matches_uninterrupted(self, tmp_path, tiny_data):
        cfg = tiny_config()
        run_pipeline(cfg, tmp_path / "a", *tiny_data)
        first = run_pipeline(cfg, tmp_path / "b", *tiny_data, max_tasks=len(StageSchedule.from_config(cfg)
                                                                               .tasks(range(6))) - 3)
        assert first.cursor < len(first.tasks)
        run_pipeline(cfg, tmp_path / "b", *tiny_data)
        for name in ("metrics.tsv", "prune_log.txt", "selection.txt", "prune_curve.tsv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
        assert (tmp_path / "a" / "final.ckpt").read_bytes() == (tmp_path / "b" / "final.ckpt").read_bytes()

    def test_changed_config_refuses_resume(self, tmp_path, tiny_data):
        run_pipeline(tiny_config(), tmp_path, *tiny_data, max_tasks=1)
        with pytest.raises(ContractError):
            run_pipeline(tiny_config(seed=1), tmp_path, *tiny_data)

    def test_numeric_failure_names_stage_and_epoch(self, tmp_path, tiny_data):
        train, val = tiny_data
        bad = type(train)(train.images.copy(), train.gts)
        bad.images[0, 0, 0, 0] = np.nan
        with pytest.raises(NumericError, match="stage warmup epoch 0"):
            run_pipeline(tiny_config(), tmp_path, bad, val)
