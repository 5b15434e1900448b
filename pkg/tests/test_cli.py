import json

import pytest

from conftest import GIB, make_profile, symmetric_plan
from odyssey.cli import main
from odyssey.domain import (
    ClusterState,
    ExecutionPlan,
    FailedNode,
    ParallelConfig,
    Policy,
    dumps_canonical,
    plan_to_dict,
    profile_to_dict,
    state_to_dict,
)


def write(path, doc) -> str:
    path.write_text(dumps_canonical(doc))
    return str(path)


@pytest.fixture
def profile_path(tmp_path):
    return write(
        tmp_path / "profile.json",
        profile_to_dict(make_profile(num_layers=9, device_memory_limit=int(9.5 * GIB))),
    )


def fig3_state_doc():
    plan = ExecutionPlan(
        policy=Policy.DYNAMIC_PARALLELISM,
        parallel=ParallelConfig(3, (3, 3, 3)),
        layer_assignment=(((0, 3), (3, 6), (6, 9)),) * 3,
        batch_assignment=(3, 3, 2),
    )
    state = ClusterState(
        total_nodes=9,
        failed_nodes=(FailedNode(0, 0, 0),),
        current_plan=plan,
        global_batch_size=8,
        micro_batch_size=1,
    )
    return state_to_dict(state)


def scenario_doc(**overrides):
    doc = {
        "duration_seconds": 3600.0,
        "n_nodes_initial": 8,
        "per_node_failure_rate": 0.1,
        "seed": 7,
        "global_batch_size": 16,
        "micro_batch_size": 1,
    }
    doc.update(overrides)
    return doc


class TestPlanCommand:
    def test_reports_reshaped_plan(self, tmp_path, profile_path, capsys):
        state_path = write(tmp_path / "state.json", fig3_state_doc())
        code = main(
            ["plan", "--profile", profile_path, "--state", state_path,
             "--pp-range", "2", "4"]
        )
        out = capsys.readouterr().out
        assert code == 0
        assert "chosen policy: dynamic_parallelism" in out
        assert "dp_degree: 2" in out
        assert "rejected alternatives" in out

    def test_fault_free_state_retains_plan(self, tmp_path, profile_path, capsys):
        doc = fig3_state_doc()
        doc["failed_nodes"] = []
        state_path = write(tmp_path / "state.json", doc)
        code = main(["plan", "--profile", profile_path, "--state", state_path])
        assert code == 0
        assert "no fault; current plan retained" in capsys.readouterr().out

    def test_all_candidates_oom_exits_3(self, tmp_path, capsys):
        cramped = write(
            tmp_path / "cramped.json",
            profile_to_dict(make_profile(num_layers=9, device_memory_limit=4 * GIB)),
        )
        state_path = write(tmp_path / "state.json", fig3_state_doc())
        code = main(
            ["plan", "--profile", cramped, "--state", state_path,
             "--pp-range", "2", "4"]
        )
        assert code == 3
        assert "infeasible" in capsys.readouterr().err

    def test_schema_violation_exits_2(self, tmp_path, profile_path, capsys):
        doc = fig3_state_doc()
        doc["unknown_field"] = True
        state_path = write(tmp_path / "state.json", doc)
        code = main(["plan", "--profile", profile_path, "--state", state_path])
        assert code == 2
        assert "input error" in capsys.readouterr().err

    def test_empty_search_range_exits_2(self, tmp_path, profile_path, capsys):
        state_path = write(tmp_path / "state.json", fig3_state_doc())
        code = main(
            ["plan", "--profile", profile_path, "--state", state_path,
             "--dp-range", "3", "1"]
        )
        assert code == 2
        assert "input error" in capsys.readouterr().err

    def test_writes_plan_and_manifest(self, tmp_path, profile_path):
        state_path = write(tmp_path / "state.json", fig3_state_doc())
        out_dir = tmp_path / "out"
        code = main(
            ["plan", "--profile", profile_path, "--state", state_path,
             "--pp-range", "2", "4", "--out", str(out_dir)]
        )
        assert code == 0
        plan_doc = json.loads((out_dir / "plan.json").read_text())
        assert plan_doc["parallel"]["dp_degree"] == 2
        manifest = json.loads((out_dir / "manifest.json").read_text())
        assert manifest["tool_version"]
        assert set(manifest["inputs"]) == {"profile", "state"}
        for entry in manifest["inputs"].values():
            assert len(entry["sha256"]) == 64


class TestEstimateCommand:
    def test_symmetric_plan_report(self, tmp_path, capsys):
        profile = make_profile(num_layers=8)
        profile_path = write(tmp_path / "p.json", profile_to_dict(profile))
        plan = symmetric_plan(2, 2, 8, [4, 4])
        plan_path = write(tmp_path / "plan.json", plan_to_dict(plan))
        code = main(["estimate", "--profile", profile_path, "--plan", plan_path])
        out = capsys.readouterr().out
        assert code == 0
        assert "step time:" in out
        assert "sync rounds: 4" in out
        assert "pipeline 0" in out and "pipeline 1" in out

    def test_asymmetric_plan_reports_per_pipeline(self, tmp_path, capsys):
        profile = make_profile(num_layers=9)
        profile_path = write(tmp_path / "p.json", profile_to_dict(profile))
        plan = ExecutionPlan(
            policy=Policy.DYNAMIC_PARALLELISM,
            parallel=ParallelConfig(3, (2, 2, 3)),
            layer_assignment=(
                ((0, 5), (5, 9)),
                ((0, 5), (5, 9)),
                ((0, 3), (3, 6), (6, 9)),
            ),
            batch_assignment=(3, 3, 2),
        )
        plan_path = write(tmp_path / "plan.json", plan_to_dict(plan))
        code = main(["estimate", "--profile", profile_path, "--plan", plan_path])
        out = capsys.readouterr().out
        assert code == 0
        assert out.count("makespan") == 3
        assert "sync rounds:" in out

    def test_memory_violation_exits_3(self, tmp_path, capsys):
        profile = make_profile(num_layers=8, device_memory_limit=4 * GIB)
        profile_path = write(tmp_path / "p.json", profile_to_dict(profile))
        plan = symmetric_plan(2, 2, 8, [4, 4])
        plan_path = write(tmp_path / "plan.json", plan_to_dict(plan))
        code = main(["estimate", "--profile", profile_path, "--plan", plan_path])
        assert code == 3
        assert "memory violation" in capsys.readouterr().err

    def test_invalid_plan_exits_3(self, tmp_path, capsys):
        profile = make_profile(num_layers=8)
        profile_path = write(tmp_path / "p.json", profile_to_dict(profile))
        plan = symmetric_plan(2, 2, 6, [4, 4])  # covers 6 of 8 layers
        plan_path = write(tmp_path / "plan.json", plan_to_dict(plan))
        code = main(["estimate", "--profile", profile_path, "--plan", plan_path])
        assert code == 3


class TestSimulateCommand:
    def test_writes_traces_summary_manifest(self, tmp_path, capsys):
        profile_path = write(tmp_path / "p.json", profile_to_dict(make_profile(num_layers=8)))
        scenario_path = write(tmp_path / "s.json", scenario_doc())
        out_dir = tmp_path / "out"
        code = main(
            ["simulate", "--profile", profile_path, "--scenario", scenario_path,
             "--out", str(out_dir)]
        )
        assert code == 0
        names = {p.name for p in out_dir.iterdir()}
        assert "summary.json" in names and "manifest.json" in names
        assert "trace_adaptive_seed7.csv" in names
        assert "trace_always_reroute_seed7.csv" in names
        assert "trace_always_reconfigure_seed7.csv" in names
        out = capsys.readouterr().out
        assert "adaptive_vs_always_reroute" in out

    def test_rate_zero_unit_ratios(self, tmp_path, capsys):
        profile_path = write(tmp_path / "p.json", profile_to_dict(make_profile(num_layers=8)))
        scenario_path = write(
            tmp_path / "s.json", scenario_doc(per_node_failure_rate=0.0)
        )
        out_dir = tmp_path / "out"
        assert main(
            ["simulate", "--profile", profile_path, "--scenario", scenario_path,
             "--out", str(out_dir)]
        ) == 0
        summary = json.loads((out_dir / "summary.json").read_text())
        for stats in summary["ratios"].values():
            assert stats["min"] == 1.0 and stats["max"] == 1.0
        trace = (out_dir / "trace_adaptive_seed7.csv").read_text().splitlines()
        assert len(trace) == 2  # header + the single interval

    def test_multi_seed_summary(self, tmp_path):
        profile_path = write(tmp_path / "p.json", profile_to_dict(make_profile(num_layers=8)))
        scenario_path = write(tmp_path / "s.json", scenario_doc())
        out_dir = tmp_path / "out"
        assert main(
            ["simulate", "--profile", profile_path, "--scenario", scenario_path,
             "--out", str(out_dir), "--seed", "1,2,3"]
        ) == 0
        summary = json.loads((out_dir / "summary.json").read_text())
        assert summary["seeds"] == [1, 2, 3]
        for stats in summary["ratios"].values():
            assert len(stats["per_seed"]) == 3
            assert stats["min"] <= stats["mean"] <= stats["max"]

    def test_byte_identical_reruns(self, tmp_path):
        profile_path = write(tmp_path / "p.json", profile_to_dict(make_profile(num_layers=8)))
        scenario_path = write(tmp_path / "s.json", scenario_doc())
        out_dir = tmp_path / "out"
        args = ["simulate", "--profile", profile_path, "--scenario", scenario_path,
                "--out", str(out_dir)]
        assert main(args) == 0
        before = {p.name: p.read_bytes() for p in out_dir.iterdir()}
        assert main(args) == 0
        after = {p.name: p.read_bytes() for p in out_dir.iterdir()}
        assert before == after

    def test_single_policy_run(self, tmp_path, capsys):
        profile_path = write(tmp_path / "p.json", profile_to_dict(make_profile(num_layers=8)))
        scenario_path = write(tmp_path / "s.json", scenario_doc())
        out_dir = tmp_path / "out"
        assert main(
            ["simulate", "--profile", profile_path, "--scenario", scenario_path,
             "--out", str(out_dir), "--policy", "always_reroute"]
        ) == 0
        names = {p.name for p in out_dir.iterdir()}
        assert "trace_always_reroute_seed7.csv" in names
        assert "trace_adaptive_seed7.csv" not in names

    def test_scenario_file_policy_selects_single_mode(self, tmp_path):
        profile_path = write(tmp_path / "p.json", profile_to_dict(make_profile(num_layers=8)))
        scenario_path = write(
            tmp_path / "s.json", scenario_doc(policy="always_reconfigure")
        )
        out_dir = tmp_path / "out"
        assert main(
            ["simulate", "--profile", profile_path, "--scenario", scenario_path,
             "--out", str(out_dir)]
        ) == 0
        names = {p.name for p in out_dir.iterdir()}
        assert "trace_always_reconfigure_seed7.csv" in names
        assert "trace_adaptive_seed7.csv" not in names

    def test_schema_violation_exits_2(self, tmp_path):
        profile_path = write(tmp_path / "p.json", profile_to_dict(make_profile(num_layers=8)))
        scenario_path = write(tmp_path / "s.json", scenario_doc(duration_seconds=-5))
        assert main(
            ["simulate", "--profile", profile_path, "--scenario", scenario_path,
             "--out", str(tmp_path / "out")]
        ) == 2


class TestValidateCommand:
    def test_valid_inputs(self, tmp_path, profile_path, capsys):
        state_path = write(tmp_path / "state.json", fig3_state_doc())
        assert main(["validate", "--profile", profile_path, "--state", state_path]) == 0
        assert "ok" in capsys.readouterr().out

    def test_violations_exit_3(self, tmp_path, profile_path, capsys):
        doc = fig3_state_doc()
        doc["current_plan"]["batch_assignment"] = [3, 3, 3]  # sums to 9, not 8
        state_path = write(tmp_path / "state.json", doc)
        assert main(["validate", "--profile", profile_path, "--state", state_path]) == 3
        assert "violation" in capsys.readouterr().out

    def test_profile_only(self, tmp_path, profile_path, capsys):
        assert main(["validate", "--profile", profile_path]) == 0

    def test_missing_file_exits_2(self, tmp_path):
        assert main(["validate", "--profile", str(tmp_path / "nope.json")]) == 2
