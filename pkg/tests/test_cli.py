import json
from pathlib import Path

import numpy as np
import pytest

from salad.cli import main
from salad.config import apply_override, config_from_dict, load_config
from salad.errors import ConfigError
from salad.tensor_io import read_tensor


def run_cli(*argv):
    return main(list(argv))


def small_args(tmp_path, out="out", *extra):
    return [
        "--out", str(tmp_path / out),
        "--set", "layers=2", "--set", "timesteps=2",
        "--set", "grid.frames=2", "--set", "grid.height=2", "--set", "grid.width=2",
        "--set", "grid.heads=2", "--set", "grid.head_dim=4",
        "--set", "mask.radius=2",
        *extra,
    ]


class TestConfig:
    def test_defaults_are_runnable(self):
        cfg = config_from_dict({})
        assert cfg.mask.k == 4 and cfg.mask.delta == 2.0
        assert cfg.block.gate_activation == "sigmoid"
        assert cfg.grid.to_grid().seq_len == 64

    def test_grid_only_document(self):
        cfg = config_from_dict({"grid": {"frames": 2, "height": 3, "width": 3,
                                         "heads": 1, "head_dim": 4}})
        assert cfg.grid.to_grid().seq_len == 18

    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            config_from_dict({"grids": {}})
        with pytest.raises(ConfigError, match="mask.radiu"):
            config_from_dict({"mask": {"radiu": 3}})

    def test_overrides_parse_json_with_string_fallback(self):
        doc = {}
        apply_override(doc, "mask.kind=topk")
        apply_override(doc, "mask.k=8")
        apply_override(doc, "sigma.values=[1.0, 0.5]")
        apply_override(doc, "timestamp=false")
        assert doc == {"mask": {"kind": "topk", "k": 8},
                       "sigma": {"values": [1.0, 0.5]}, "timestamp": False}
        with pytest.raises(ConfigError):
            apply_override(doc, "no_equals_sign")

    def test_load_config_file(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text('{"seed": 9, "mask": {"radius": 3}}')
        cfg = load_config(path, ["mask.radius=5"])
        assert cfg.seed == 9 and cfg.mask.radius == 5

    def test_sigma_schedule(self):
        cfg = config_from_dict({"timesteps": 3, "sigma": {"max": 1.0, "min": 0.25}})
        sched = cfg.sigma.schedule(3)
        assert sched[0] == 1.0 and abs(sched[-1] - 0.25) < 1e-12
        cfg2 = config_from_dict({"timesteps": 2, "sigma": {"values": [0.9, 0.1]}})
        assert cfg2.sigma.schedule(2) == [0.9, 0.1]
        with pytest.raises(ConfigError):
            config_from_dict({"timesteps": 3, "sigma": {"values": [1.0]}})


class TestGen:
    def test_same_seed_same_bytes(self, tmp_path):
        assert run_cli("gen", *small_args(tmp_path, "w1"), "--seed", "5") == 0
        assert run_cli("gen", *small_args(tmp_path, "w2"), "--seed", "5") == 0
        for name in ("inputs.stns", "params_l0.sldp", "manifest.json"):
            assert (tmp_path / "w1" / name).read_bytes() == (tmp_path / "w2" / name).read_bytes()

    def test_different_seeds_differ(self, tmp_path):
        run_cli("gen", *small_args(tmp_path, "w1"), "--seed", "1")
        run_cli("gen", *small_args(tmp_path, "w2"), "--seed", "2")
        a = (tmp_path / "w1" / "inputs.stns").read_bytes()
        b = (tmp_path / "w2" / "inputs.stns").read_bytes()
        assert a != b

    def test_gaussian_statistics(self, tmp_path):
        # 4 layers x 5 timesteps x 64 tokens x 16 channels >= 10^4 samples
        assert run_cli("gen", "--out", str(tmp_path / "w"),
                       "--set", "grid.head_dim=8", "--seed", "11") == 0
        x = read_tensor(tmp_path / "w" / "inputs.stns")
        n = x.size
        assert n >= 10_000
        assert abs(float(x.mean())) < 5.0 / np.sqrt(n)
        assert abs(float(x.std()) - 1.0) < 5.0 / np.sqrt(2 * n)

    def test_headers_identical_apart_from_seed(self, tmp_path):
        run_cli("gen", *small_args(tmp_path, "w1"), "--seed", "1")
        run_cli("gen", *small_args(tmp_path, "w2"), "--seed", "2")
        m1 = json.loads((tmp_path / "w1" / "manifest.json").read_text())
        m2 = json.loads((tmp_path / "w2" / "manifest.json").read_text())
        assert m1.pop("seed") == 1 and m2.pop("seed") == 2
        assert m1 == m2
        h1 = (tmp_path / "w1" / "params_l0.sldp").read_bytes().split(b"\n", 1)[0]
        h2 = (tmp_path / "w2" / "params_l0.sldp").read_bytes().split(b"\n", 1)[0]
        d1, d2 = json.loads(h1), json.loads(h2)
        assert d1.pop("seed") != d2.pop("seed")
        assert d1 == d2


class TestRun:
    def test_report_written_with_fixed_keys(self, tmp_path, capsys):
        assert run_cli("run", *small_args(tmp_path), "--no-timestamp") == 0
        doc = json.loads((tmp_path / "out" / "report.json").read_text())
        assert list(doc) == ["config", "sparsity", "flops", "speedup_estimate",
                             "gates", "drop_plan", "ranks", "gradcheck", "oracle_checks"]
        zero_init = [c for c in doc["oracle_checks"] if c["name"] == "zero_init_equivalence"]
        assert zero_init and zero_init[0]["passed"] is True

    def test_full_window_reports_zero_sparsity(self, tmp_path):
        assert run_cli("run", *small_args(tmp_path), "--set", "mask.radius=64") == 0
        doc = json.loads((tmp_path / "out" / "report.json").read_text())
        assert doc["sparsity"]["aggregate"] == 0.0

    def test_ninety_percent_window(self, tmp_path):
        args = [
            "--out", str(tmp_path / "r"),
            "--set", "layers=1", "--set", "timesteps=1",
            "--set", "grid.frames=10", "--set", "grid.height=10", "--set", "grid.width=10",
            "--set", "grid.heads=1", "--set", "grid.head_dim=8",
            "--set", "mask.radius=51", "--set", "analysis.rank_layers=[]",
        ]
        assert run_cli("run", *args) == 0
        doc = json.loads((tmp_path / "r" / "report.json").read_text())
        from salad.masking import window_attended_pairs

        want = 1.0 - window_attended_pairs(1000, 51) / 1000**2
        assert abs(doc["sparsity"]["aggregate"] - want) < 1e-12
        assert abs(doc["sparsity"]["aggregate"] - 0.90) <= 0.001

    def test_run_uses_generated_workload(self, tmp_path):
        run_cli("gen", *small_args(tmp_path, "w"), "--seed", "4")
        rc = run_cli("run", *small_args(tmp_path, "r"),
                     "--set", f'workload_dir="{tmp_path / "w"}"', "--seed", "4")
        assert rc == 0
        assert (tmp_path / "r" / "report.json").is_file()

    def test_byte_identical_reports(self, tmp_path):
        run_cli("run", *small_args(tmp_path, "r1"), "--seed", "8", "--no-timestamp")
        run_cli("run", *small_args(tmp_path, "r2"), "--seed", "8", "--no-timestamp")
        a = (tmp_path / "r1" / "report.json").read_bytes()
        b = (tmp_path / "r2" / "report.json").read_bytes()
        assert a == b

    def test_threads_match_sequential(self, tmp_path):
        run_cli("run", *small_args(tmp_path, "r1"), "--threads", "1", "--no-timestamp")
        run_cli("run", *small_args(tmp_path, "r2"), "--threads", "4", "--no-timestamp")
        a = (tmp_path / "r1" / "report.json").read_bytes()
        b = (tmp_path / "r2" / "report.json").read_bytes()
        assert a == b

    def test_timestamp_field_present_by_default(self, tmp_path):
        run_cli("run", *small_args(tmp_path))
        doc = json.loads((tmp_path / "out" / "report.json").read_text())
        assert "timestamp" in doc

    def test_calibrated_mask_plan(self, tmp_path):
        rc = run_cli("run", *small_args(tmp_path),
                     "--set", "mask.kind=calibrate", "--set", "mask.candidates=[1,2,4]")
        assert rc == 0
        doc = json.loads((tmp_path / "out" / "report.json").read_text())
        cal = doc["sparsity"]["calibration"]
        assert len(cal) == 2 and all(c["radius"] in (1, 2, 4) for c in cal)

    def test_params_bundle_substitutes_block(self, tmp_path):
        from salad.numerics import Rng
        from salad.tensor_io import write_params
        from salad.workload import make_params

        cfg = load_config(None, ["grid.frames=2", "grid.height=2", "grid.width=2",
                                 "grid.heads=2", "grid.head_dim=4"])
        params = make_params(cfg, Rng(123))
        params.gate_activation = "constant"
        params.gate_constant = 0.125
        write_params(params, tmp_path / "fixed.sldp")
        rc = run_cli("run", *small_args(tmp_path),
                     "--set", f'block.params_bundle="{tmp_path / "fixed.sldp"}"')
        assert rc == 0
        doc = json.loads((tmp_path / "out" / "report.json").read_text())
        gates = {rec["gate"] for rec in doc["gates"]["records"]}
        assert gates == {0.125}

    def test_explicit_plan_from_file(self, tmp_path):
        from salad.masking import Explicit, MaskPlan, Window, build_window_mask
        from salad.tensor_io import write_plan

        n = 8
        mask = build_window_mask(n, 2)
        write_plan(MaskPlan([Window(radius=3), Explicit(mask)]), tmp_path / "plan.json")
        rc = run_cli("run", *small_args(tmp_path),
                     "--set", "mask.kind=explicit",
                     "--set", f'mask.plan_path="{tmp_path / "plan.json"}"')
        assert rc == 0
        doc = json.loads((tmp_path / "out" / "report.json").read_text())
        per_head = doc["sparsity"]["per_head"]
        assert per_head[1]["attended_pairs"] == float(mask.sum())

    def test_topk_run_and_drop_strategy(self, tmp_path):
        rc = run_cli("run", *small_args(tmp_path),
                     "--set", "mask.kind=topk", "--set", "mask.block_size=2",
                     "--set", "mask.k=2", "--set", "drop.strategy=interval")
        assert rc == 0
        doc = json.loads((tmp_path / "out" / "report.json").read_text())
        assert doc["drop_plan"]["preferred"] is True
        assert doc["drop_plan"]["speedup_estimate"] >= doc["speedup_estimate"]


class TestExitCodes:
    def test_config_error_is_3(self, tmp_path, capsys):
        assert run_cli("run", "--set", "mask.kind=nonsense", "--out", str(tmp_path)) == 3
        assert "mask.kind" in capsys.readouterr().err

    def test_unknown_key_is_3(self, tmp_path):
        assert run_cli("run", "--set", "grid.depth=2", "--out", str(tmp_path)) == 3

    def test_corrupted_bundle_shape_is_3(self, tmp_path, capsys):
        from salad.numerics import Rng
        from salad.tensor_io import write_params
        from salad.workload import make_params

        cfg = load_config(None, ["grid.heads=2", "grid.head_dim=4"])
        params = make_params(cfg, Rng(0))
        params.proj = np.zeros((3, 3))  # wrong shape for H=8
        write_params(params, tmp_path / "bad.sldp")
        rc = run_cli("check", "--set", f'block.params_bundle="{tmp_path / "bad.sldp"}"',
                     "--set", "grid.heads=2", "--set", "grid.head_dim=4",
                     "--out", str(tmp_path))
        assert rc == 3
        assert "proj" in capsys.readouterr().err

    def test_unwritable_out_is_2(self, tmp_path):
        blocker = tmp_path / "file.txt"
        blocker.write_text("x")
        rc = run_cli("gen", "--out", str(blocker / "sub"),
                     "--set", "layers=1", "--set", "timesteps=1")
        assert rc == 2

    def test_unknown_check_is_3(self, tmp_path):
        assert run_cli("check", "--only", "bogus", "--out", str(tmp_path)) == 3

    def test_missing_reports_is_3(self, tmp_path):
        assert run_cli("analyze", "--out", str(tmp_path)) == 3


class TestCheckCommand:
    def test_only_subset_passes(self, tmp_path, capsys):
        rc = run_cli("check", "--only", "param_count,percentiles,topk",
                     "--out", str(tmp_path))
        out = capsys.readouterr().out
        assert rc == 0
        assert out.count("[PASS]") == 3 and "all 3 checks passed" in out

    def test_list_names(self, tmp_path, capsys):
        assert run_cli("check", "--list") == 0
        names = capsys.readouterr().out.split()
        assert "linear_oracle" in names and "gradcheck" in names

    def test_failing_check_exits_4(self, tmp_path, capsys, monkeypatch):
        from salad import checks as checks_mod
        from salad.checks import CheckResult

        fake = dict(checks_mod.ALL_CHECKS)
        fake["always_red"] = lambda: CheckResult("always_red", False, 1.0, "synthetic failure")
        monkeypatch.setattr(checks_mod, "ALL_CHECKS", fake)
        rc = run_cli("check", "--only", "param_count,always_red", "--out", str(tmp_path))
        assert rc == 4
        captured = capsys.readouterr()
        assert "[FAIL] always_red" in captured.out
        assert "1 of 2 checks failed" in captured.err


class TestAnalyze:
    def test_outputs(self, tmp_path, capsys):
        run_cli("run", *small_args(tmp_path, "r"), "--no-timestamp")
        rc = run_cli("analyze", "--report", str(tmp_path / "r" / "report.json"),
                     "--out", str(tmp_path / "a"))
        assert rc == 0
        summary = json.loads((tmp_path / "a" / "analysis.json").read_text())
        assert {p["strategy"] for p in summary["drop_plans"]} == {"interval", "random", "threshold"}
        pref = [p for p in summary["drop_plans"] if p["preferred"]]
        assert len(pref) == 1 and pref[0]["params"] == {"lo": 0.8, "hi": 1.0}
        gates_csv = (tmp_path / "a" / "gates.csv").read_text().splitlines()
        assert gates_csv[0] == "layer,timestep,gate" and len(gates_csv) == 1 + 2 * 2
        pct_csv = (tmp_path / "a" / "percentiles.csv").read_text().splitlines()
        assert pct_csv[0] == "timestep,q20,q40,q60,q80"

    def test_single_record_percentiles_collapse(self, tmp_path):
        run_cli("run", *small_args(tmp_path, "r"), "--set", "layers=1",
                "--set", "timesteps=1", "--no-timestamp")
        rc = run_cli("analyze", "--report", str(tmp_path / "r" / "report.json"),
                     "--out", str(tmp_path / "a"))
        assert rc == 0
        summary = json.loads((tmp_path / "a" / "analysis.json").read_text())
        row = summary["percentiles"]["per_timestep"][0]["values"]
        assert len(set(row)) == 1  # one gate record: every percentile equals it


class TestExportMaps:
    def test_files_written(self, tmp_path):
        rc = run_cli("export-maps", *small_args(tmp_path),
                     "--set", "maps.head=1", "--set", "maps.layer=1")
        assert rc == 0
        maps = sorted(p.name for p in (tmp_path / "out" / "maps").iterdir())
        assert maps == ["l1_t0_linear_h1.csv", "l1_t0_linear_h1.pgm",
                        "l1_t0_sparse_h1.csv", "l1_t0_sparse_h1.pgm"]
