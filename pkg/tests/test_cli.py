import json

import numpy as np
import pytest

from lyapcert import cli, net
from lyapcert.config import (ConfigError, PRESETS, config_from_dict, config_hash,
                             config_to_dict, load_config)


def mini_config(tmp_path, **overrides):
    """A desk-second pendulum config for CLI round trips."""
    payload = {
        "name": "mini",
        "system": {
            "system_id": "pendulum",
            "theta0": [0.5, 0.15, 9.81, 0.1],
            "theta_test": [0.6, 0.15, 9.81, 0.1],
            "sigma_diag": [0.05, 0.0, 0.0, 0.0],
        },
        "meta": {"meta_steps": 40, "tasks_per_step": 2, "n_tasks": 2,
                 "m_batches": 2, "k_train": 8, "j_test": 8},
        "loss": {"eps1": 1.0, "eps2": 1.0},
        "verify": {"d0": 3.0, "nodes_per_axis": 41, "exempt_radius": 0.9,
                   "max_rounds": 1, "min_green_fraction": 0.0},
        "roa": {"mc_samples": 20, "mc_horizon": 5.0, "mc_tol": 0.5},
        "nlf": {"n_samples": 200, "n_steps": 30, "lr": 0.01, "batch_size": 32},
        "hidden": [8],
        "out_dir": str(tmp_path / "out"),
    }
    payload.update(overrides)
    path = tmp_path / "mini.json"
    path.write_text(json.dumps(payload))
    return path


class TestConfig:
    def test_presets_parse_and_hash(self):
        assert len(PRESETS) == 9
        for name, cfg in PRESETS.items():
            assert cfg.name == name
            assert len(config_hash(cfg)) == 16
            rebuilt = config_from_dict(config_to_dict(cfg))
            assert config_hash(rebuilt) == config_hash(cfg)

    def test_unknown_key_rejected(self, tmp_path):
        path = mini_config(tmp_path)
        payload = json.loads(path.read_text())
        payload["verify"]["typo_field"] = 1
        path.write_text(json.dumps(payload))
        with pytest.raises(ConfigError, match="typo_field"):
            load_config(path)

    def test_unknown_top_level_key_rejected(self, tmp_path):
        path = mini_config(tmp_path)
        payload = json.loads(path.read_text())
        payload["unexpected"] = {}
        path.write_text(json.dumps(payload))
        with pytest.raises(ConfigError, match="unexpected"):
            load_config(path)

    def test_invalid_json_reports_line(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{ not json")
        with pytest.raises(ConfigError, match="line"):
            load_config(path)

    def test_bad_system_values(self, tmp_path):
        path = mini_config(tmp_path)
        payload = json.loads(path.read_text())
        payload["system"]["theta0"] = [-1.0, 0.15, 9.81, 0.1]
        path.write_text(json.dumps(payload))
        with pytest.raises(ConfigError):
            load_config(path)

    def test_hash_changes_with_content(self, tmp_path):
        cfg_a = load_config(mini_config(tmp_path))
        cfg_b = load_config(mini_config(tmp_path, name="mini2"))
        assert config_hash(cfg_a) != config_hash(cfg_b)


class TestCliCommands:
    def test_malformed_config_exit_2(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"name": "x", "system": {"system_id": "pendulum"}}))
        code = cli.main(["train-meta", "--config", str(path)])
        assert code == cli.EXIT_CONFIG
        assert "config error" in capsys.readouterr().err

    def test_unknown_preset_exit_2(self):
        assert cli.main(["compare", "--config", "/nonexistent/x.json"]) == cli.EXIT_CONFIG

    def test_full_mini_pipeline(self, tmp_path):
        cfg_path = mini_config(tmp_path)
        out = tmp_path / "out" / "mini"
        assert cli.main(["train-meta", "--config", str(cfg_path)]) == cli.EXIT_OK
        ckpt = out / "meta_checkpoint.json"
        assert ckpt.exists()
        assert (out / "region.json").exists()

        assert cli.main(["adapt", "--config", str(cfg_path),
                         "--checkpoint", str(ckpt)]) == cli.EXIT_OK
        adapted = out / "adapted_checkpoint.json"
        ledger = json.loads((out / "adapt_ledger.json").read_text())
        assert ledger["samples_used"] <= 50 and ledger["steps_used"] <= 10

        assert cli.main(["verify", "--config", str(cfg_path),
                         "--checkpoint", str(adapted)]) == cli.EXIT_OK
        assert (out / "validity_map.csv").exists()
        import xml.dom.minidom
        xml.dom.minidom.parseString((out / "validity_map.svg").read_text())

        assert cli.main(["roa", "--config", str(cfg_path),
                         "--checkpoint", str(adapted)]) == cli.EXIT_OK
        roa_payload = json.loads((out / "roa.json").read_text())
        assert "c" in roa_payload and "config_hash" in roa_payload

        assert cli.main(["simulate", "--config", str(cfg_path),
                         "--x0", "0.2,0.0", "--h", "0.01", "--horizon", "2.0"]) == cli.EXIT_OK
        assert (out / "trajectory.csv").exists()
        assert (out / "trajectory.svg").exists()

    def test_adapt_budget_violation_exit_2(self, tmp_path):
        cfg_path = mini_config(tmp_path)
        out = tmp_path / "out" / "mini"
        assert cli.main(["train-meta", "--config", str(cfg_path)]) == cli.EXIT_OK
        code = cli.main(["adapt", "--config", str(cfg_path),
                         "--checkpoint", str(out / "meta_checkpoint.json"),
                         "--samples", "60"])
        assert code == cli.EXIT_CONFIG

    def test_adapt_k_zero_identity(self, tmp_path):
        cfg_path = mini_config(tmp_path)
        out = tmp_path / "out" / "mini"
        cli.main(["train-meta", "--config", str(cfg_path)])
        cli.main(["adapt", "--config", str(cfg_path),
                  "--checkpoint", str(out / "meta_checkpoint.json"), "--k", "0"])
        theta0, _, _ = net.load_checkpoint(out / "meta_checkpoint.json")
        theta1, _, _ = net.load_checkpoint(out / "adapted_checkpoint.json")
        np.testing.assert_array_equal(theta0, theta1)

    def test_missing_checkpoint_exit_2(self, tmp_path):
        cfg_path = mini_config(tmp_path)
        code = cli.main(["verify", "--config", str(cfg_path),
                         "--checkpoint", str(tmp_path / "nope.json")])
        assert code == cli.EXIT_CONFIG

    def test_arch_mismatch_exit_2(self, tmp_path):
        cfg_path = mini_config(tmp_path)
        bad = tmp_path / "bad_ckpt.json"
        arch = net.Architecture(3, (4,))
        net.save_checkpoint(bad, net.init_params(arch, 0), arch)
        code = cli.main(["verify", "--config", str(cfg_path), "--checkpoint", str(bad)])
        assert code == cli.EXIT_CONFIG

    def test_region_failure_exit_3(self, tmp_path):
        cfg_path = mini_config(tmp_path, name="hard",
                               verify={"d0": 3.0, "nodes_per_axis": 41,
                                       "exempt_radius": 0.0, "max_rounds": 1,
                                       "min_green_fraction": 1.0})
        assert cli.main(["train-meta", "--config", str(cfg_path)]) == cli.EXIT_VERIFICATION

    def test_train_meta_rerun_bitwise(self, tmp_path):
        cfg_path = mini_config(tmp_path)
        out = tmp_path / "out" / "mini"
        cli.main(["train-meta", "--config", str(cfg_path)])
        first = (out / "meta_checkpoint.json").read_bytes()
        cli.main(["train-meta", "--config", str(cfg_path)])
        assert (out / "meta_checkpoint.json").read_bytes() == first

    def test_compare_mini(self, tmp_path):
        cfg_path = mini_config(tmp_path)
        out = tmp_path / "out" / "mini"
        assert cli.main(["compare", "--config", str(cfg_path)]) == cli.EXIT_OK
        rows = json.loads((out / "comparison.json").read_text())["rows"]
        methods = {r["method"] for r in rows}
        assert {"META_NLF", "NLF_TS", "T_NLF", "QLF_TS", "SOS_LF_TS"} == methods
        first = (out / "comparison.csv").read_bytes()
        assert cli.main(["compare", "--config", str(cfg_path)]) == cli.EXIT_OK
        assert (out / "comparison.csv").read_bytes() == first

    def test_worker_count_env(self, monkeypatch):
        monkeypatch.delenv("LYAPCERT_THREADS", raising=False)
        assert cli.worker_count() == 1
        monkeypatch.setenv("LYAPCERT_THREADS", "4")
        assert cli.worker_count() == 4
        monkeypatch.setenv("LYAPCERT_THREADS", "junk")
        assert cli.worker_count() == 1

    def test_atomic_write(self, tmp_path):
        target = tmp_path / "sub" / "file.json"
        cli.atomic_write_json(target, {"a": 1})
        assert json.loads(target.read_text()) == {"a": 1}
        leftovers = [p for p in target.parent.iterdir() if p.name != "file.json"]
        assert not leftovers
