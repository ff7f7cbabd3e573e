from __future__ import annotations

import csv
import io
import json

import pytest

from builders import build, default_dict, minimal_dict, zero_planning
from edgeplan import cli
from edgeplan.cli import (
    CODEC_HEADER,
    CURVE_HEADER,
    LATENCY_HEADER,
    emit_end_to_end,
    parse_betas,
    parse_grid,
    parse_rates,
    run,
)
from edgeplan.domain import Combine, PlanStep, TaskPlan
from edgeplan.errors import InvariantError, UnresolvableStep
from edgeplan.fakeserver import FakeChatServer
from edgeplan.offload import best_partition, planning_latency

FAST_GRID = "kept=1,8;bins=2,4"


def call(argv):
    out, err = io.StringIO(), io.StringIO()
    report = cli.run(argv, stdout=out, stderr=err)
    return report, out.getvalue(), err.getvalue()


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_unknown_subcommand():
    report, _, err = call(["frobnicate"])
    assert report.exit_code == 2
    assert "usage:" in err


def test_missing_required_flag():
    report, _, err = call(["infer-latency"])
    assert report.exit_code == 2 and "usage:" in err


def test_help_exits_cleanly(capsys):
    assert run(["--help"]).exit_code == 0


def test_plan_command(tmp_path):
    report, out, _ = call(["plan", "--request", "Caption this photo", "--out", str(tmp_path)])
    assert report.exit_code == 0
    assert report.rows == [{"step": 0, "task": "image_captioning", "model": "blip-caption", "input": "user_data"}]
    assert json.loads((tmp_path / "plan.json").read_text())["tasks"][0]["model"] == "blip-caption"
    assert json.loads(out)["combine"] == "single"


def test_plan_without_matching_rule_is_advisor_failure():
    report, _, err = call(["plan", "--request", "transcribe this audio"])
    assert report.exit_code == 4 and "advisor" in err


def test_eval_planner_outputs(tmp_path):
    report, out, _ = call(["eval-planner", "--out", str(tmp_path)])
    assert report.exit_code == 0
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert metrics["n"] == 60 and metrics["accuracy"] >= 0.9
    assert "mean_latency" not in metrics
    assert "mean_latency_s=" in out
    rows = read_csv(tmp_path / "predictions.csv")
    assert rows[0] == ["request", "gold", "predicted", "correct"] and len(rows) == 61


def test_infer_latency_csv(tmp_path):
    report, _, _ = call(["infer-latency", "--model", "vit-b16", "--rates", "100k:500k:50k", "--out", str(tmp_path)])
    assert report.exit_code == 0
    rows = read_csv(tmp_path / "latency.csv")
    assert tuple(rows[0]) == LATENCY_HEADER
    body = rows[1:]
    assert len(body) == 9 * 5
    rates = [float(r[0]) for r in body]
    assert rates == sorted(rates)
    assert rates[0] == 100_000 and rates[-1] == 500_000
    for r in body:
        parts = [float(v) for v in r[2:8]]
        assert float(r[8]) == pytest.approx(sum(parts))


def test_infer_latency_mix_and_schemes(tmp_path):
    report, _, _ = call(["infer-latency", "--mix", "vit-b16=1,blip-vqa=1", "--schemes", "co:2,cloud",
                         "--rates", "200k,300k"])
    assert report.exit_code == 0
    assert [(r["rate_bps"], r["scheme"]) for r in report.rows] == [
        (200_000.0, "co_inference@2"), (200_000.0, "cloud_only"), (300_000.0, "co_inference@2"), (300_000.0, "cloud_only")]


@pytest.mark.parametrize("argv", [
    ["infer-latency", "--model", "vit-b16", "--rates", "500k:100k:50k"],
    ["infer-latency", "--model", "vit-b16", "--schemes", "warp"],
    ["codec-sweep", "--grid-spec", "bins=2"],
    ["infer-latency", "--model", "vit-b16", "--mix", "a=1"],
])
def test_bad_flag_values_are_usage_errors(argv):
    assert call(argv)[0].exit_code == 2


def test_codec_sweep_csv(tmp_path):
    report, _, _ = call(["codec-sweep", "--betas", "0,0.01,1", "--grid-spec", FAST_GRID, "--out", str(tmp_path)])
    assert report.exit_code == 0
    rows = read_csv(tmp_path / "codec.csv")
    assert tuple(rows[0]) == CODEC_HEADER and len(rows) == 4
    assert rows[-1][1:3] == ["1", "2"]


def test_fl_run_with_overrides(tmp_path):
    report, _, _ = call(["fl-run", "--config-overrides", '{"global_rounds": 3}', "--out", str(tmp_path)])
    # global_rounds is not patchable: ignored, the run keeps 30 rounds
    assert report.exit_code == 0 and len(report.rows) == 30
    report, _, _ = call(["fl-run", "--config-overrides", '{"model_arch": "linear", "lr": 0.1}', "--out", str(tmp_path)])
    assert report.exit_code == 0
    rows = read_csv(tmp_path / "fl_curve.csv")
    assert tuple(rows[0]) == CURVE_HEADER and len(rows) == 31
    assert json.loads((tmp_path / "fl_config.json").read_text())["model_arch"] == "linear"


def test_fl_run_override_from_file(tmp_path):
    patch = tmp_path / "patch.json"
    patch.write_text('{"model_arch": "nonsense"}')
    assert call(["fl-run", "--config-overrides", f"@{patch}"])[0].exit_code == 3
    assert call(["fl-run", "--config-overrides", "{not json"])[0].exit_code == 3


def test_fl_auto_outputs(tmp_path):
    script = tmp_path / "script.json"
    script.write_text(json.dumps(['{"patch": {"model_arch": "linear"}}']))
    report, _, _ = call(["fl-auto", "--script", str(script), "--max-trials", "3", "--out", str(tmp_path / "o")])
    assert report.exit_code == 0
    assert [r["trial"] for r in report.rows] == [1, 2]
    names = sorted(p.name for p in (tmp_path / "o").iterdir())
    assert names == ["manifest.json", "trial_1.csv", "trial_2.csv", "trials.csv", "trials.json"]


def test_remote_advisor_requires_endpoint():
    assert call(["plan", "--request", "x", "--advisor", "remote"])[0].exit_code == 2


def test_remote_plan_through_fake_server():
    with FakeChatServer(['{"tasks": [{"task": "vqa"}]}']) as server:
        report, _, _ = call(["plan", "--request", "what?", "--advisor", "remote", "--endpoint", server.url])
    assert report.exit_code == 0 and report.rows[0]["model"] == "blip-vqa"


def test_remote_failure_exit_code():
    with FakeChatServer(["x"], status=400) as server:
        report, _, _ = call(["plan", "--request", "x", "--advisor", "remote", "--endpoint", server.url])
    assert report.exit_code == 4


def test_scenario_errors_exit_3(tmp_path):
    assert call(["demo", "--scenario", str(tmp_path / "missing.json")])[0].exit_code == 3
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(minimal_dict(links={})))
    report, _, err = call(["demo", "--scenario", str(bad)])
    assert report.exit_code == 3 and "links.client_edge_up" in err


def test_invariant_breach_exit_5(monkeypatch):
    def boom(*args):
        raise InvariantError("broken")

    monkeypatch.setitem(cli.COMMANDS, "demo", boom)
    assert call(["demo"])[0].exit_code == 5


def test_demo_prints_plan_partition_and_breakdown(tmp_path):
    report, out, _ = call(["demo", "--request", "What color is the car?", "--out", str(tmp_path)])
    assert report.exit_code == 0
    assert "plan:" in out and "co_inference@" in out and "end-to-end" in out
    doc = json.loads((tmp_path / "demo.json").read_text())
    assert doc["steps"][0]["model"] == "blip-vqa"
    assert doc["total_s"] == pytest.approx(doc["planning_s"] + doc["steps"][0]["latency"]["total"])


def test_manifest_contents(tmp_path):
    call(["infer-latency", "--model", "vit-b16", "--seed", "4", "--out", str(tmp_path)])
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["command"] == "infer-latency" and manifest["seed"] == 4
    assert "--out" not in manifest["argv"]
    assert set(manifest["versions"]) == {"edgeplan", "numpy", "python"}
    assert len(manifest["scenario_sha256"]) == 64
    assert set(manifest["outputs"]) == {"latency.csv"}


def test_rerun_is_byte_identical(tmp_path):
    argv = ["codec-sweep", "--betas", "0,0.01", "--grid-spec", FAST_GRID, "--seed", "2"]
    for name in ("a", "b"):
        assert call(argv + ["--out", str(tmp_path / name)])[0].exit_code == 0
    for f in (tmp_path / "a").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


# -- parsing helpers --------------------------------------------------------


def test_parse_rates():
    assert parse_rates("100k:500k:50k") == [100_000.0 + 50_000 * i for i in range(9)]
    assert parse_rates("1,2.5k") == [1.0, 2500.0]
    with pytest.raises(ValueError):
        parse_rates("1:2")


def test_parse_betas():
    assert parse_betas("0,0.5") == [0.0, 0.5]
    assert parse_betas("lin:0:1:3") == [0.0, 0.5, 1.0]
    geo = parse_betas("geom:1e-4:0.1:20")
    assert len(geo) == 20 and geo[0] == pytest.approx(1e-4) and geo[-1] == pytest.approx(0.1)


def test_parse_grid():
    grid = parse_grid("kept=1,2;bins=4;clip=-1,1")
    assert [(c.kept_dims, c.n_bins, c.clip_range) for c in grid] == [(1, 4, (-1.0, 1.0)), (2, 4, (-1.0, 1.0))]


# -- end-to-end composition -------------------------------------------------


def two_speed_scenario(fusion=0.1):
    doc = zero_planning(minimal_dict())
    doc["devices"] = [
        {"id": "c", "tier": "client", "throughput": 1e9},
        {"id": "e", "tier": "edge", "throughput": 1.0},
    ]
    layer = lambda flops: [{"flops": flops, "out_feature_bytes": 1}]
    doc["models"] = [
        {"id": "one", "task_kind": "mood_from_traffic", "param_count": 1, "input_bytes": 10, "layers": layer(10**9)},
        {"id": "three", "task_kind": "mood_from_physio", "param_count": 1, "input_bytes": 10, "layers": layer(3 * 10**9)},
    ]
    doc["settings"]["fusion_s"] = fusion
    return build(doc)


def test_fuse_takes_max_plus_fusion():
    s = two_speed_scenario()
    p = TaskPlan((PlanStep("mood_from_traffic", "one", "user_data"), PlanStep("mood_from_physio", "three", "user_data")),
                 Combine.FUSE_OUTPUTS)
    e2e = emit_end_to_end(p, s)
    assert [st.latency.total for st in e2e.steps] == pytest.approx([1.0, 3.0])
    assert e2e.total == pytest.approx(3.1)


def test_sequence_adds():
    s = two_speed_scenario()
    p = TaskPlan((PlanStep("mood_from_traffic", "one"), PlanStep("mood_from_physio", "three")), Combine.SEQUENCE)
    assert emit_end_to_end(p, s).total == pytest.approx(4.0)


def test_single_step_equals_best_partition_plus_planning(scenario):
    for model_id, kind in (("vit-b16", "image_classification"), ("blip-vqa", "vqa")):
        e2e = emit_end_to_end(TaskPlan((PlanStep(kind, model_id, "user_data"),)), scenario)
        d = best_partition(scenario.model(model_id), scenario)
        assert e2e.steps[0].scheme == f"co_inference@{d.split}"
        assert e2e.total == pytest.approx(d.latency.total)
        assert e2e.planning == planning_latency(scenario)


def test_unresolvable_steps(scenario):
    with pytest.raises(UnresolvableStep):
        emit_end_to_end(TaskPlan((PlanStep("vqa"),)), scenario)
    with pytest.raises(UnresolvableStep):
        emit_end_to_end(TaskPlan((PlanStep("vqa", "ghost"),)), scenario)


def test_main_returns_exit_code():
    assert cli.main(["infer-latency", "--model", "vit-b16", "--rates", "100k"]) == 0
