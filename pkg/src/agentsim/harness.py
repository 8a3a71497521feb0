"""Benchmark orchestration: resolve a placement per mode, simulate, report, check claims."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .agent import (
    AgentConfig, QTablePair, best_threshold_heuristic, brute_force_partition, greedy_assignment,
    heuristic_baseline, train_agent,
)
from .config import BenchmarkConfig
from .exceptions import ConfigError, MissingReport
from .graph import LayerKind, ModelGraph, TensorShape, build_resnet_like
from .platforms import load_platforms
from .quant import eval_accuracy, calibrate_activations, fit_readout, init_weights, load_weights, \
    make_synthetic_dataset
from .simulator import Assignment, Placement, RunReport, SimResult, Simulator, report_metrics

TABLE_ROWS = (
    ("Latency (ms/image)", "latency_ms_per_image", "{:.1f}"),
    ("Throughput (images/s)", "throughput_images_per_s", "{:.1f}"),
    ("Power Consumption (W)", "power_w", "{:.1f}"),
    ("Energy Efficiency (images/s/W)", "efficiency_images_per_s_per_w", "{:.2f}"),
    ("Top-1 Accuracy (%)", "top1_accuracy", "{:.1f}"),
)
MODE_LABELS = {
    "cpu": "CPU",
    "gpu": "GPU",
    "fpga-agent": "AI_FPGA_Agent",
    "fpga-heuristic": "FPGA_Heuristic",
    "fpga-oracle": "FPGA_Oracle",
}
SPEEDUP_CLAIM = 10.0
STATED_EFFICIENCY_RANGE = (2.0, 3.0)


# -- inputs --------------------------------------------------------------------

def load_model(cfg: BenchmarkConfig) -> ModelGraph:
    """The configured model file, the shipped ``resnet_like`` graph, or a generated one."""
    if cfg.model is None:
        g = cfg.generator
        return build_resnet_like(g.num_blocks, g.base_channels, TensorShape(*g.input_shape), g.num_classes)
    try:
        if cfg.model == "resnet_like":
            text = resources.files("agentsim.data.models").joinpath("resnet_like.json").read_text()
            return ModelGraph.from_dict(json.loads(text))
        return ModelGraph.load(cfg.model)
    except OSError as exc:
        raise ConfigError(f"cannot read model: {exc}", cfg.model, "model") from None
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ConfigError(f"malformed model file: {exc}", cfg.model, "model") from None


def desk_model_weights(graph: ModelGraph, seed=0, fit_samples=1000, noise=1.0):
    """Deterministic weights for the accuracy benchmark: seeded random backbone + fitted head."""
    if graph.layers[-1].kind is not LayerKind.FULLY_CONNECTED:
        raise ConfigError("accuracy evaluation needs a FullyConnected head", field="model")
    s = graph.input_shape
    weights = init_weights(graph, seed)
    data = make_synthetic_dataset(fit_samples, graph.layers[-1].out_channels,
                                  (s.channels, s.height, s.width), seed=seed + 1, noise=noise)
    return fit_readout(graph, weights, data.X, data.y)


@dataclass
class AccuracyPair:
    float_top1: float
    int8_top1: float
    num_samples: int

    @property
    def delta(self):
        return abs(self.float_top1 - self.int8_top1)


def evaluate_accuracy(graph, cfg: BenchmarkConfig) -> AccuracyPair:
    """Float and int8 top-1 on ``num_images`` seeded synthetic samples."""
    acc = cfg.accuracy
    if acc.weights:
        weights, biases = load_weights(acc.weights)
    else:
        weights, biases = desk_model_weights(graph, cfg.rng_seed, acc.fit_samples, acc.noise)
    s = graph.input_shape
    shape = (s.channels, s.height, s.width)
    classes = graph.layers[-1].out_channels
    test = make_synthetic_dataset(cfg.num_images, classes, shape, seed=cfg.rng_seed + 2, noise=acc.noise)
    calib = make_synthetic_dataset(acc.calibration_size, classes, shape, seed=cfg.rng_seed + 3,
                                   noise=acc.noise)
    act = calibrate_activations(graph, weights, calib.X, biases)
    f = eval_accuracy(graph, weights, test, "float", biases=biases)
    q = eval_accuracy(graph, weights, test, "int8", act_params=act, biases=biases)
    return AccuracyPair(f.top1_accuracy, q.top1_accuracy, len(test))


# -- benchmark -------------------------------------------------------------------

@dataclass
class BenchmarkRun:
    report: RunReport
    sim: SimResult
    assignment: Assignment
    objective: float
    qtable: QTablePair | None = None


def resolve_assignment(graph, platforms, cfg: BenchmarkConfig, qtable=None):
    """Placement for ``cfg.mode``; returns ``(assignment, host, qtable)``."""
    mode = cfg.mode
    energy_weight = cfg.agent.reward_energy_weight if cfg.agent else 0.0
    if mode in ("cpu", "gpu"):
        return Assignment.uniform(graph, Placement.CPU), mode, None
    sim = Simulator(graph, platforms, "cpu", cfg.double_buffering)
    if mode == "fpga-agent":
        agent_cfg = cfg.agent or AgentConfig()
        if qtable is not None:
            return greedy_assignment(graph, platforms, qtable, agent_cfg), "cpu", qtable
        result = train_agent(graph, platforms, agent_cfg, simulator=sim)
        return result.best_assignment, "cpu", result.q
    if mode == "fpga-heuristic":
        if cfg.heuristic_threshold == "auto":
            return best_threshold_heuristic(graph, platforms, energy_weight, simulator=sim).assignment, \
                "cpu", None
        if not sim.fpga_usable:
            return Assignment.uniform(graph, Placement.CPU), "cpu", None
        a = heuristic_baseline(graph, sim.costs, float(cfg.heuristic_threshold), platforms.accel)
        return a, "cpu", None
    res = brute_force_partition(graph, platforms, cfg.oracle_max_layers, energy_weight, simulator=sim)
    return res.assignment, "cpu", None


def run_mode(cfg: BenchmarkConfig, qtable=None, accuracy: AccuracyPair | None = None) -> BenchmarkRun:
    graph = load_model(cfg)
    platforms = load_platforms(cfg.platforms)
    assignment, host, q = resolve_assignment(graph, platforms, cfg, qtable)
    sim = Simulator(graph, platforms, host, cfg.double_buffering)
    result = sim.run(assignment.vector, record=True, assignment=assignment)
    if accuracy is None and cfg.accuracy.enabled:
        accuracy = evaluate_accuracy(graph, cfg)
    top1 = None
    if accuracy is not None:
        top1 = accuracy.int8_top1 if result.uses_fpga else accuracy.float_top1
    report = report_metrics(result, platforms, MODE_LABELS[cfg.mode], top1)
    energy_weight = cfg.agent.reward_energy_weight if cfg.agent else 0.0
    objective = result.makespan_s + energy_weight * result.energy_j
    return BenchmarkRun(report, result, assignment, objective, q)


def run_benchmark(cfg: BenchmarkConfig, qtable=None) -> RunReport:
    return run_mode(cfg, qtable).report


# -- claims ----------------------------------------------------------------------

@dataclass(frozen=True)
class Claim:
    name: str
    status: str  # PASS, FAIL, REPORTED or SKIPPED
    value: float | None
    detail: str

    def line(self):
        v = "n/a" if self.value is None else f"{self.value:.2f}"
        return f"{self.status:<8} {self.name:<22} {v:>8}  {self.detail}"


def verify_claims(reports, accuracy_threshold=0.5, accuracy: AccuracyPair | None = None):
    """Check the headline claims against ``reports`` (mapping mode -> RunReport).

    ``accuracy`` overrides the per-report top-1 figures for the fidelity claim.
    """
    for needed in ("cpu", "fpga-agent"):
        if needed not in reports:
            raise MissingReport(f"no {needed} report")
    cpu, fpga = reports["cpu"], reports["fpga-agent"]
    speedup = cpu.latency_ms_per_image / fpga.latency_ms_per_image
    claims = [Claim(
        "latency speedup", "PASS" if speedup >= SPEEDUP_CLAIM else "FAIL", speedup,
        f"cpu {cpu.latency_ms_per_image:.2f} ms / fpga-agent {fpga.latency_ms_per_image:.2f} ms,"
        f" claim >= {SPEEDUP_CLAIM:g}x",
    )]
    gpu = reports.get("gpu")
    if gpu is None:
        claims.append(Claim("efficiency vs gpu", "SKIPPED", None, "no gpu report"))
    else:
        ratio = fpga.efficiency_images_per_s_per_w / gpu.efficiency_images_per_s_per_w
        lo, hi = STATED_EFFICIENCY_RANGE
        inside = lo <= ratio <= hi
        claims.append(Claim(
            "efficiency vs gpu", "REPORTED", ratio,
            f"computed {ratio:.1f}x; stated range {lo:g}-{hi:g}x "
            + ("agrees" if inside else "DISAGREES, not reconciled"),
        ))
    if accuracy is not None:
        float_top1, int8_top1 = accuracy.float_top1, accuracy.int8_top1
    else:
        float_top1, int8_top1 = cpu.top1_accuracy, fpga.top1_accuracy
    if float_top1 is None or int8_top1 is None:
        claims.append(Claim("int8 accuracy delta", "SKIPPED", None, "accuracy not evaluated"))
    else:
        delta = abs(float_top1 - int8_top1)
        claims.append(Claim(
            "int8 accuracy delta", "PASS" if delta <= accuracy_threshold else "FAIL", delta,
            f"float {float_top1:.2f}% vs int8 {int8_top1:.2f}%, threshold {accuracy_threshold:g} points",
        ))
    return claims


def claims_passed(claims):
    return all(c.status != "FAIL" for c in claims)


# -- reports ---------------------------------------------------------------------

def _as_list(report):
    return [report] if isinstance(report, RunReport) else list(report)


def format_table(reports):
    reports = _as_list(reports)
    header = ["Metric"] + [r.label or f"run{i}" for i, r in enumerate(reports)]
    rows = [header]
    for label, attr, fmt in TABLE_ROWS:
        row = [label]
        for r in reports:
            v = getattr(r, attr)
            row.append("n/a" if v is None else fmt.format(v))
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    out = []
    for r in rows:
        cells = [r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
        out.append("  ".join(cells).rstrip())
    return "\n".join(out) + "\n"


def format_csv(reports):
    reports = _as_list(reports)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric"] + [r.label or f"run{i}" for i, r in enumerate(reports)])
    for label, attr, _ in TABLE_ROWS:
        w.writerow([label] + ["" if getattr(r, attr) is None else repr(getattr(r, attr)) for r in reports])
    return buf.getvalue()


def format_json(reports):
    if isinstance(reports, RunReport):
        return reports.to_json()
    return json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True) + "\n"


def emit_report(report, fmt="table", path=None):
    """Render ``report`` (one RunReport or a sequence) and write it to ``path`` if given."""
    render = {"table": format_table, "csv": format_csv, "json": format_json}
    if fmt not in render:
        raise ValueError(f"unknown format {fmt!r}")
    text = render[fmt](report)
    if path is not None:
        Path(path).write_text(text)
    return text


def load_report_json(path_or_text):
    text = path_or_text
    if not str(path_or_text).lstrip().startswith(("{", "[")):
        text = Path(path_or_text).read_text()
    data = json.loads(text)
    if isinstance(data, list):
        return [RunReport.from_dict(d) for d in data]
    return RunReport.from_dict(data)

