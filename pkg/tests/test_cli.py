import csv
import json
import os

import pytest
import yaml

from pipeshift.cli import main
from pipeshift.scenario import ScenarioError, load_scenario, scenario_from_dict


def small_scenario_dict(**overrides):
    doc = {
        "schema_version": 1,
        "cluster": [
            {"id": 1, "mem_total": "8 GiB", "mem_bandwidth": "900 GB/s",
             "prefill_cost": "1 us", "decode_cost": "10 us",
             "alloc_granularity": "2 MiB"},
            {"id": 2, "mem_total": "8 GiB", "mem_bandwidth": "900 GB/s",
             "prefill_cost": "2 us", "decode_cost": "5 us",
             "alloc_granularity": "2 MiB"},
        ],
        "model": {
            "num_layers": 8, "layer_weight_bytes": "64 MiB",
            "token_kv_bytes_per_layer": "16 KiB", "stacking_factor": 1,
            "activation_bytes_per_token": "4 KiB",
        },
        "initial_config": [[1, [1, 4]], [2, [5, 8]]],
        "workload": {"pattern": "prefill_heavy", "rate": "50 req/s",
                     "num_requests": 5},
    }
    doc.update(overrides)
    return doc


@pytest.fixture
def scenario_file(tmp_path):
    def write(name="scen.yaml", **overrides):
        path = tmp_path / name
        path.write_text(yaml.safe_dump(small_scenario_dict(**overrides)))
        return str(path)
    return write


class TestScenarioLoading:
    def test_roundtrip(self, scenario_file):
        scen = load_scenario(scenario_file())
        assert scen.model.num_layers == 8
        assert scen.cluster[0].mem_total == 8 * 1024 ** 3
        assert scen.workload.rate == 50.0

    def test_bare_number_rejected(self):
        doc = small_scenario_dict()
        doc["model"]["layer_weight_bytes"] = 67108864
        with pytest.raises(ScenarioError) as err:
            scenario_from_dict(doc)
        assert "layer_weight_bytes" in str(err.value)

    def test_wrong_unit_dimension_rejected(self):
        doc = small_scenario_dict()
        doc["cluster"][0]["prefill_cost"] = "4 MiB"
        with pytest.raises(ScenarioError) as err:
            scenario_from_dict(doc)
        assert "prefill_cost" in str(err.value)

    def test_invalid_config_names_field(self):
        doc = small_scenario_dict(initial_config=[[1, [1, 4]], [2, [4, 8]]])
        with pytest.raises(ScenarioError) as err:
            scenario_from_dict(doc)
        assert "initial_config" in str(err.value)

    def test_packaged_example_loads(self):
        path = os.path.join(os.path.dirname(__file__), "..", "scenarios",
                            "heterogeneous_shift.yaml")
        scen = load_scenario(path)
        assert scen.triggers and scen.workload.pattern == "shift_schedule"


class TestCmdRun:
    def test_valid_scenario_writes_three_outputs(self, scenario_file, tmp_path):
        out = str(tmp_path / "out")
        code = main(["run", scenario_file(), "--seed", "3", "--out", out])
        assert code == 0
        assert os.path.exists(os.path.join(out, "trace.jsonl"))
        assert os.path.exists(os.path.join(out, "metrics.csv"))
        summary = json.load(open(os.path.join(out, "summary.json")))
        assert summary["schema_version"] == 1
        with open(os.path.join(out, "metrics.csv")) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 1
        assert float(rows[0]["throughput"]) > 0

    def test_malformed_scenario_exit_2(self, tmp_path, capsys):
        path = tmp_path / "bad.yaml"
        doc = small_scenario_dict()
        doc["model"]["layer_weight_bytes"] = 123
        path.write_text(yaml.safe_dump(doc))
        code = main(["run", str(path), "--out", str(tmp_path / "o")])
        assert code == 2
        assert "layer_weight_bytes" in capsys.readouterr().err

    def test_infeasible_trigger_is_data_not_crash(self, scenario_file, tmp_path):
        # the target packs seven layers onto GPU1: weights alone overflow it
        path = scenario_file(
            name="trig.yaml",
            model={"num_layers": 8, "layer_weight_bytes": "1126 MiB",
                   "token_kv_bytes_per_layer": "16 KiB", "stacking_factor": 1,
                   "activation_bytes_per_token": "4 KiB"},
            reconfig_triggers=[{"at": "5 ms",
                                "target_config": [[1, [1, 7]], [2, [8, 8]]]}],
        )
        out = str(tmp_path / "out2")
        code = main(["run", path, "--out", out])
        assert code == 0
        summary = json.load(open(os.path.join(out, "summary.json")))
        assert summary["reconfig_outcome"] == "infeasible"

    def test_flag_override(self, scenario_file, tmp_path):
        out = str(tmp_path / "out3")
        code = main(["run", scenario_file(), "--out", out, "--kv-patch", "off"])
        assert code == 0


class TestCmdSweep:
    def test_config_grid_enumeration_count(self, scenario_file, tmp_path):
        # 8 layers over 2 GPUs at k=1 -> 7 splits
        out = str(tmp_path / "sweep")
        code = main(["sweep", scenario_file(), "--axis", "config-grid",
                     "--out", out])
        assert code == 0
        with open(os.path.join(out, "sweep.csv")) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 7
        assert {r["config"] for r in rows} == {
            "1/7", "2/6", "3/5", "4/4", "5/3", "6/2", "7/1"}
        for r in rows:
            assert 0.0 <= float(r["score"]) <= 1.0

    def test_rate_grid_single_rate_matches_run(self, scenario_file, tmp_path):
        out = str(tmp_path / "sweep2")
        code = main(["sweep", scenario_file(), "--axis", "rate-grid",
                     "--out", out])
        assert code == 0
        with open(os.path.join(out, "sweep.csv")) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 1
        assert rows[0]["score"] == repr(1.0)

    def test_stacking_grid_skips_incompatible_k(self, scenario_file, tmp_path):
        # ranges of length 4 support k in {1,2,4} but not 8
        out = str(tmp_path / "sweep3")
        path = scenario_file(name="st.yaml",
                             sweep={"stacking": [1, 2, 4, 8]})
        code = main(["sweep", path, "--axis", "stacking-grid", "--out", out])
        assert code == 0
        with open(os.path.join(out, "sweep.csv")) as fh:
            rows = list(csv.DictReader(fh))
        assert [r["stacking"] for r in rows] == ["1", "2", "4"]

    def test_sweep_csv_is_deterministic(self, scenario_file, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = str(tmp_path / name)
            main(["sweep", scenario_file(), "--axis", "rate-grid", "--out", out,
                  "--seed", "5"])
            outs.append(open(os.path.join(out, "sweep.csv")).read())
        assert outs[0] == outs[1]


class TestCmdValidate:
    def test_ok(self, scenario_file, capsys):
        assert main(["validate", scenario_file()]) == 0
        assert "ok" in capsys.readouterr().out

    def test_bad(self, tmp_path):
        path = tmp_path / "nope.yaml"
        path.write_text("cluster: []\n")
        assert main(["validate", str(path)]) == 2
