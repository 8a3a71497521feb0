import json
from dataclasses import replace

import pytest

from agentsim import cli, harness
from agentsim.config import BenchmarkConfig
from agentsim.exceptions import ConfigError, InfeasibleAssignment, MissingReport
from agentsim.graph import LayerKind, LayerSpec, ModelGraph, TensorShape
from agentsim.platforms import load_platforms
from agentsim.simulator import RunReport

ROWS = ["Latency (ms/image)", "Throughput (images/s)", "Power Consumption (W)",
        "Energy Efficiency (images/s/W)", "Top-1 Accuracy (%)"]


def report(lat, thr, power, top1=None, label=""):
    return RunReport(lat, thr, power, power * lat / 1e3, thr / power, {}, top1, label)


PAPER = {
    "cpu": report(40.2, 24.8, 85.0, label="CPU"),
    "gpu": report(6.1, 112.0, 125.0, label="GPU"),
    "fpga-agent": report(3.5, 284.7, 28.0, label="AI_FPGA_Agent"),
}


@pytest.fixture
def toy_model(tmp_path):
    g = ModelGraph((
        LayerSpec(0, LayerKind.CONV2D, 3, 16, 3, 3, 1, 1),
        LayerSpec(1, LayerKind.ACTIVATION, 16, 16, predecessors=(0,)),
        LayerSpec(2, LayerKind.CONV2D, 16, 16, 3, 3, 1, 1, (1,)),
    ), TensorShape(1, 3, 32, 32))
    path = tmp_path / "toy.json"
    g.save(path)
    return str(path)


# -- config ----------------------------------------------------------------------------

def test_default_config_round_trip(tmp_path):
    text = BenchmarkConfig().to_json()
    (tmp_path / "c.json").write_text(text)
    assert BenchmarkConfig.load(tmp_path / "c.json").to_json() == text


def test_emit_config_byte_identical(tmp_path, capsys):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert cli.main(["emit-config", "--out", str(a)]) == 0
    assert cli.main(["emit-config", "--config", str(a), "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


@pytest.mark.parametrize("patch,field", [
    ({"mode": "tpu"}, "mode"),
    ({"num_images": 0}, "num_images"),
    ({"colour": 1}, "colour"),
    ({"agent": {"alpha": 2.0}}, "agent"),
    ({"outputs": {"format": "xml"}}, "outputs.format"),
    ({"generator": {"depth": 3}}, "generator.depth"),
])
def test_config_errors_name_field(tmp_path, patch, field):
    d = BenchmarkConfig().to_dict()
    d.update(patch)
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(d))
    with pytest.raises(ConfigError) as e:
        BenchmarkConfig.load(path)
    assert e.value.field == field
    assert str(path) in str(e.value)


def test_agent_section_only_required_for_agent_mode():
    d = BenchmarkConfig().to_dict()
    del d["agent"]
    with pytest.raises(ConfigError):
        BenchmarkConfig.from_dict(d)
    d["mode"] = "cpu"
    assert BenchmarkConfig.from_dict(d).mode == "cpu"


def test_unreadable_config():
    with pytest.raises(ConfigError):
        BenchmarkConfig.load("/nonexistent/config.json")


# -- benchmark --------------------------------------------------------------------------

def test_cpu_mode_matches_table():
    r = harness.run_benchmark(BenchmarkConfig(mode="cpu"))
    assert r.latency_ms_per_image == pytest.approx(40.2, rel=0.01)
    assert r.throughput_images_per_s == pytest.approx(24.8, rel=0.01)
    assert r.power_w == pytest.approx(85.0, rel=0.01)
    assert r.label == "CPU"


def test_oracle_beats_every_mode_on_toy(toy_model):
    objectives = {m: harness.run_mode(BenchmarkConfig(mode=m, model=toy_model)).objective
                  for m in ("cpu", "gpu", "fpga-agent", "fpga-heuristic", "fpga-oracle")}
    assert all(objectives["fpga-oracle"] <= v for v in objectives.values())


def test_same_seed_same_json(toy_model):
    cfg = BenchmarkConfig(mode="fpga-agent", model=toy_model)
    cfg.agent = replace(cfg.agent, episodes=200)
    a = harness.format_json(harness.run_benchmark(cfg))
    b = harness.format_json(harness.run_benchmark(cfg))
    assert a == b


def test_fixed_threshold_heuristic(toy_model):
    cfg = BenchmarkConfig(mode="fpga-heuristic", model=toy_model, heuristic_threshold=1e9)
    run = harness.run_mode(cfg)
    assert run.assignment.vector == (0, 0, 0)


def test_missing_model_is_config_error():
    with pytest.raises(ConfigError):
        harness.run_benchmark(BenchmarkConfig(mode="cpu", model="/nonexistent/model.json"))


# -- claims ---------------------------------------------------------------------------------

def test_paper_reports_pass_speedup():
    claims = {c.name: c for c in harness.verify_claims(PAPER)}
    speed = claims["latency speedup"]
    assert speed.status == "PASS" and round(speed.value, 2) == 11.49
    eff = claims["efficiency vs gpu"]
    assert eff.status == "REPORTED" and "DISAGREES" in eff.detail and round(eff.value, 1) == 11.3
    assert claims["int8 accuracy delta"].status == "SKIPPED"
    assert harness.claims_passed(claims.values())


def test_cpu_only_reports_raise():
    with pytest.raises(MissingReport) as e:
        harness.verify_claims({"cpu": PAPER["cpu"]})
    assert "fpga-agent" in str(e.value)


@pytest.mark.parametrize("delta,status", [(0.4, "PASS"), (0.5, "PASS"), (0.6, "FAIL")])
def test_accuracy_threshold(delta, status):
    acc = harness.AccuracyPair(92.0, 92.0 - delta, 1000)
    claims = {c.name: c for c in harness.verify_claims(PAPER, 0.5, acc)}
    assert claims["int8 accuracy delta"].status == status


def test_slow_fpga_fails_speedup():
    slow = dict(PAPER)
    slow["fpga-agent"] = report(10.0, 99.0, 28.0)
    claims = harness.verify_claims(slow)
    assert not harness.claims_passed(claims)


# -- report formats ------------------------------------------------------------------------

def test_table_rows_verbatim():
    text = harness.format_table(list(PAPER.values()))
    lines = text.splitlines()
    assert [ln.split("  ")[0].strip() for ln in lines[1:]] == ROWS
    assert "10.17" in lines[4] and "0.29" in lines[4] and "0.90" in lines[4]


def test_csv_has_header_and_five_rows():
    text = harness.format_csv(PAPER["fpga-agent"])
    rows = text.strip().splitlines()
    assert len(rows) == 6
    assert rows[1].startswith("Latency (ms/image),3.5")
    assert repr(284.7 / 28.0) in text  # full precision


def test_json_reload_is_identical(tmp_path):
    path = tmp_path / "r.json"
    harness.emit_report(PAPER["cpu"], "json", path)
    assert harness.load_report_json(path) == PAPER["cpu"]
    many = harness.format_json(list(PAPER.values()))
    assert harness.load_report_json(many) == list(PAPER.values())


def test_unknown_format():
    with pytest.raises(ValueError):
        harness.emit_report(PAPER["cpu"], "xml")


# -- CLI --------------------------------------------------------------------------------------

def test_cli_verify_passes(capsys):
    assert cli.main(["verify"]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out and "11.49" in out


def test_cli_claim_failure_exit_1(tmp_path):
    p = load_platforms("paper_calibrated").replace_accel(clock_hz=2e7)
    p.save(tmp_path / "slow.json")
    assert cli.main(["verify", "--platforms", str(tmp_path / "slow.json"), "--episodes", "50"]) == 1


def test_cli_config_error_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["bench", "--config", str(bad)]) == 2
    assert "config error" in capsys.readouterr().err


def test_cli_too_many_layers_exit_2():
    assert cli.main(["bench", "--mode", "fpga-oracle"]) == 2


def test_cli_infeasible_exit_3(monkeypatch):
    def boom(*a, **k):
        raise InfeasibleAssignment("layer 3 cannot be tiled on chip")
    monkeypatch.setattr(harness, "run_mode", boom)
    assert cli.main(["bench", "--mode", "cpu"]) == 3


def test_cli_bench_formats(tmp_path, capsys):
    out = tmp_path / "r.csv"
    assert cli.main(["bench", "--mode", "cpu", "--format", "csv", "--out", str(out)]) == 0
    assert len(out.read_text().strip().splitlines()) == 6
    assert cli.main(["bench", "--mode", "gpu", "--format", "table"]) == 0
    assert "Power Consumption (W)" in capsys.readouterr().out


def test_cli_train_then_bench_with_qtable(tmp_path, toy_model, capsys):
    q = tmp_path / "q.txt"
    assert cli.main(["train", "--model", toy_model, "--episodes", "100", "--save-qtable", str(q)]) == 0
    a = tmp_path / "a.json"
    assert cli.main(["bench", "--model", toy_model, "--load-qtable", str(q), "--format", "json",
                     "--out", str(a)]) == 0
    assert harness.load_report_json(a).assignment_summary == {"CPU": 0, "FPGA": 3}


def test_cli_seeded_runs_reproducible(tmp_path, toy_model):
    outs = []
    for name in ("x.json", "y.json"):
        path = tmp_path / name
        cli.main(["bench", "--model", toy_model, "--seed", "4", "--episodes", "60", "--format", "json",
                  "--out", str(path)])
        outs.append(path.read_bytes())
    assert outs[0] == outs[1]


def test_cli_export_timeline(tmp_path, toy_model):
    out = tmp_path / "t.csv"
    assert cli.main(["export-timeline", "--model", toy_model, "--mode", "fpga-oracle", "--out", str(out)]) == 0
    assert out.read_text().splitlines()[0] == "resource,layer,tile,start_s,end_s"


def test_cli_gen_model(tmp_path):
    out = tmp_path / "m.json"
    wdir = tmp_path / "w"
    assert cli.main(["gen-model", "--num-blocks", "1", "--base-channels", "4", "--input-shape", "1,3,8,8",
                     "--out", str(out), "--weights-dir", str(wdir)]) == 0
    assert len(ModelGraph.load(out)) == 8
    assert (wdir / "manifest.txt").exists()
    assert cli.main(["gen-model", "--input-shape", "1,3,x", "--out", str(out)]) == 2
