"""Deterministic event simulation of a CPU/FPGA layer placement.

Layers run in storage order, one image in flight. Each execution resource
(host compute, FPGA compute, the DMA bus) serves one job at a time; a layer
starts once its inputs have arrived and its resources are free. Tensors that
cross a placement boundary are moved over the bus. The graph input comes
from the host and the final output returns to it.
"""
from __future__ import annotations

import csv
import enum
import io
import json
from dataclasses import asdict, dataclass, field

from .exceptions import InfeasibleAssignment, LayerUntileable
from .graph import ModelGraph, graph_costs
from .platforms import (
    Platforms,
    effective_bandwidth,
    estimate_resources,
    fpga_layer_time,
    host_layer_time,
    minimal_tile_bytes,
    plan_tiles,
)


class Placement(str, enum.Enum):
    CPU = "CPU"
    FPGA = "FPGA"


class Resource(str, enum.Enum):
    CPU_COMPUTE = "CpuCompute"
    FPGA_COMPUTE = "FpgaCompute"
    DMA_IN = "DmaIn"
    DMA_OUT = "DmaOut"


@dataclass(frozen=True)
class Assignment:
    """Placement of every layer, aligned with the graph's storage order."""

    layer_ids: tuple[int, ...]
    placements: tuple[Placement, ...]

    def __post_init__(self):
        object.__setattr__(self, "placements", tuple(Placement(p) for p in self.placements))
        if len(self.layer_ids) != len(self.placements):
            raise ValueError("assignment must cover every layer exactly once")
        if len(set(self.layer_ids)) != len(self.layer_ids):
            raise ValueError("assignment lists a layer twice")

    @classmethod
    def uniform(cls, graph, placement):
        return cls(graph.layer_ids, (Placement(placement),) * len(graph))

    @classmethod
    def from_vector(cls, graph, bits):
        """Build from a 0/1 sequence (1 = FPGA)."""
        return cls(graph.layer_ids, tuple(Placement.FPGA if b else Placement.CPU for b in bits))

    def __getitem__(self, layer_id):
        return self.placements[self.layer_ids.index(layer_id)]

    def __len__(self):
        return len(self.placements)

    @property
    def vector(self):
        return tuple(int(p is Placement.FPGA) for p in self.placements)

    def summary(self):
        return {p.value: sum(1 for q in self.placements if q is p) for p in Placement}

    def to_dict(self):
        return {str(i): p.value for i, p in zip(self.layer_ids, self.placements)}


@dataclass(frozen=True)
class Segment:
    resource: Resource
    layer_id: int
    tile: int | None
    start_s: float
    end_s: float

    @property
    def duration(self):
        return self.end_s - self.start_s


@dataclass(frozen=True)
class Timeline:
    segments: tuple[Segment, ...] = ()

    def by_resource(self, resource):
        return [s for s in self.segments if s.resource is resource]

    def busy(self, resource):
        return sum(s.duration for s in self.by_resource(resource))

    def check(self, tol=1e-15):
        """Raise ``AssertionError`` if any resource runs two segments at once."""
        for res in Resource:
            segs = self.by_resource(res)
            for a, b in zip(segs, segs[1:]):
                if a.end_s < a.start_s or b.start_s < a.end_s - tol:
                    raise AssertionError(f"overlap on {res.value}: {a} / {b}")
        return True

    def to_csv(self, path=None):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["resource", "layer", "tile", "start_s", "end_s"])
        for s in self.segments:
            w.writerow(
                [s.resource.value, s.layer_id, "" if s.tile is None else s.tile,
                 repr(s.start_s), repr(s.end_s)]
            )
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


@dataclass
class SimResult:
    makespan_s: float
    energy_j: float
    busy_s: dict
    assignment: Assignment | None
    host: str
    timeline: Timeline | None = None

    @property
    def uses_fpga(self):
        return self.busy_s.get("fpga", 0.0) > 0


_SOURCE = -1


def _union_length(intervals):
    total, cur_s, cur_e = 0.0, None, None
    for s, e in sorted(intervals):
        if cur_e is None or s > cur_e:
            if cur_e is not None:
                total += cur_e - cur_s
            cur_s, cur_e = s, e
        else:
            cur_e = max(cur_e, e)
    if cur_e is not None:
        total += cur_e - cur_s
    return total


class Simulator:
    """Reusable simulator for one graph on one platform set.

    Per-layer tile plans and layer times are cached, so evaluating many
    assignments of the same graph (training, exhaustive search) is cheap.
    """

    def __init__(self, graph: ModelGraph, platforms: Platforms, host="cpu", double_buffering=True):
        self.graph = graph
        self.platforms = platforms
        self.host_name = host
        self.host = platforms.host(host)
        self.accel = platforms.accel
        self.double_buffering = double_buffering
        self.costs = graph_costs(graph, self.accel.bytes_per_element)
        self.bandwidth = effective_bandwidth(self.accel)
        self.resources = estimate_resources(self.accel)

        self.ids = graph.layer_ids
        self.n = len(self.ids)
        pos = {lid: i for i, lid in enumerate(self.ids)}
        cons = graph.consumers()
        self.preds = [tuple(pos[p] for p in layer.predecessors) for layer in graph.layers]
        self.cost_list = [self.costs[lid] for lid in self.ids]
        self.host_times = [host_layer_time(c, self.host) for c in self.cost_list]
        self.input_bytes = graph.input_shape.numel * self.accel.bytes_per_element
        self.sinks = [i for i, lid in enumerate(self.ids) if not cons[lid]]

        cap = self.accel.onchip_buffer_bytes
        self.plans = []
        for c in self.cost_list:
            try:
                self.plans.append(plan_tiles(c, self.accel))
            except LayerUntileable:
                self.plans.append(None)
        # residency rule: single consumer, stored right after, fits next to its minimal tile
        self.can_stay_on_chip = []
        for i, lid in enumerate(self.ids):
            ok = (
                len(cons[lid]) == 1
                and i + 1 < self.n
                and cons[lid][0] == self.ids[i + 1]
                and self.cost_list[i].output_bytes + minimal_tile_bytes(self.cost_list[i + 1]) <= cap
            )
            self.can_stay_on_chip.append(ok)
        self._fpga_cache = {}
        self._prefix_cache = {}

    # -- feasibility -------------------------------------------------------

    @property
    def fpga_usable(self):
        return self.resources.feasible

    def fpga_feasible(self, i):
        return self.fpga_usable and self.plans[i] is not None

    def _check(self, bits):
        for i, b in enumerate(bits):
            if b and not self.fpga_feasible(i):
                if not self.fpga_usable:
                    raise InfeasibleAssignment(
                        f"accelerator utilization {self.resources.utilization:.2f} exceeds 1"
                    )
                raise InfeasibleAssignment(f"layer {self.ids[i]} cannot be tiled on chip")

    # -- core loop ---------------------------------------------------------

    def layer_time(self, i, input_resident_bytes=0, output_resident=False):
        key = (i, input_resident_bytes, output_resident)
        lt = self._fpga_cache.get(key)
        if lt is None:
            lt = fpga_layer_time(
                self.cost_list[i],
                self.plans[i],
                self.accel,
                input_resident_bytes=input_resident_bytes,
                output_resident=output_resident,
                double_buffering=self.double_buffering,
            )
            self._fpga_cache[key] = lt
        return lt

    def _resident(self, i, bits):
        if not (bits[i] and self.can_stay_on_chip[i]):
            return False
        # a layer whose consumer is not placed yet is assumed to keep its output
        return i + 1 >= len(bits) or bool(bits[i + 1])

    def run(self, bits, record=False, upto=None, assignment=None):
        """Simulate placement vector ``bits`` (1 = FPGA) for the first ``upto`` layers."""
        bits = tuple(int(b) for b in bits)
        full = upto is None or upto >= self.n
        k = self.n if full else upto
        if len(bits) < k:
            raise ValueError("placement vector shorter than simulated prefix")
        bits = bits[:k]
        self._check(bits)

        bw = self.bandwidth
        segs = [] if record else None
        fpga_iv = []
        cpu_busy = 0.0
        t_cpu = t_fpga = t_bus = 0.0
        ready = [0.0] * k
        makespan = 0.0

        for i in range(k):
            p = bits[i]
            arrival = 0.0
            for q in self.preds[i] or (_SOURCE,):
                if q == _SOURCE:
                    qp, r, nbytes = 0, 0.0, self.input_bytes
                else:
                    qp, r, nbytes = bits[q], ready[q], self.cost_list[q].output_bytes
                if qp != p:
                    s = max(r, t_bus)
                    e = s + nbytes / bw
                    t_bus = e
                    fpga_iv.append((s, e))
                    if record:
                        if p:
                            segs.append(Segment(Resource.DMA_IN, self.ids[i], None, s, e))
                        else:
                            segs.append(Segment(Resource.DMA_OUT, self.ids[q], None, s, e))
                    arrival = max(arrival, e)
                else:
                    arrival = max(arrival, r)
            if not p:
                s = max(arrival, t_cpu)
                e = s + self.host_times[i]
                t_cpu = e
                cpu_busy += e - s
                if record:
                    segs.append(Segment(Resource.CPU_COMPUTE, self.ids[i], None, s, e))
            else:
                in_res = sum(
                    self.cost_list[q].output_bytes for q in self.preds[i] if self._resident(q, bits)
                )
                lt = self.layer_time(i, in_res, self._resident(i, bits))
                s = max(arrival, t_fpga, t_bus)
                e = s + lt.seconds
                t_fpga = t_bus = e
                fpga_iv.append((s, e))
                if record:
                    segs.extend(self._tile_segments(i, s, lt))
            ready[i] = e
            makespan = max(makespan, e)

        if full:
            for i in self.sinks:
                if bits[i]:
                    s = max(ready[i], t_bus)
                    e = s + self.cost_list[i].output_bytes / bw
                    t_bus = e
                    fpga_iv.append((s, e))
                    if record:
                        segs.append(Segment(Resource.DMA_OUT, self.ids[i], None, s, e))
                    makespan = max(makespan, e)

        fpga_busy = _union_length(fpga_iv)
        energy = 0.0
        if cpu_busy > 0:
            energy += self.host.power_w * cpu_busy + self.host.idle_power_w * (makespan - cpu_busy)
        if fpga_busy > 0:
            energy += (
                self.accel.active_power_w * fpga_busy
                + self.accel.idle_power_w * (makespan - fpga_busy)
            )
        timeline = None
        if record:
            segs.sort(key=lambda s: (s.start_s, s.end_s))
            timeline = Timeline(tuple(segs))
        if assignment is None and full:
            assignment = Assignment.from_vector(self.graph, bits)
        return SimResult(
            makespan_s=makespan,
            energy_j=energy,
            busy_s={"host": cpu_busy, "fpga": fpga_busy},
            assignment=assignment,
            host=self.host_name,
            timeline=timeline,
        )

    _KIND_RESOURCE = {
        "setup": Resource.FPGA_COMPUTE,
        "compute": Resource.FPGA_COMPUTE,
        "load": Resource.DMA_IN,
        "store": Resource.DMA_OUT,
    }

    def _tile_segments(self, i, t0, lt):
        lid = self.ids[i]
        return [
            Segment(self._KIND_RESOURCE[kind], lid, tile, t0 + s, t0 + e)
            for kind, tile, s, e in lt.events
        ]

    def prefix_cost(self, bits):
        """(makespan, energy) of a placement prefix; the full vector includes the final return."""
        key = tuple(bits)
        hit = self._prefix_cache.get(key)
        if hit is None:
            r = self.run(key, upto=len(key))
            hit = (r.makespan_s, r.energy_j)
            self._prefix_cache[key] = hit
        return hit

    def objective(self, bits, energy_weight=0.0):
        bits = tuple(bits)
        if len(bits) != self.n:
            raise ValueError("objective needs a full placement vector")
        makespan, energy = self.prefix_cost(bits)
        return makespan + energy_weight * energy


def simulate_assignment(graph, assignment, platforms, *, host="cpu", record=True, double_buffering=True):
    """Simulate a full assignment and return its :class:`SimResult`."""
    if isinstance(assignment, Assignment):
        if assignment.layer_ids != graph.layer_ids:
            raise ValueError("assignment does not match the graph's layers")
        bits = assignment.vector
    else:
        bits = tuple(assignment)
        assignment = None
    sim = Simulator(graph, platforms, host=host, double_buffering=double_buffering)
    return sim.run(bits, record=record, assignment=assignment)


@dataclass
class RunReport:
    latency_ms_per_image: float
    throughput_images_per_s: float
    power_w: float
    energy_j_per_image: float
    efficiency_images_per_s_per_w: float
    assignment_summary: dict = field(default_factory=dict)
    top1_accuracy: float | None = None
    label: str = ""

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def report_metrics(sim: SimResult, platforms: Platforms, label="", top1_accuracy=None) -> RunReport:
    if sim.makespan_s <= 0:
        raise ValueError("makespan must be positive")
    if sim.uses_fpga:
        overhead_s = platforms.accel.per_image_stream_overhead_s
    else:
        overhead_s = platforms.host(sim.host).per_image_stream_overhead_s
    latency_ms = sim.makespan_s * 1e3
    throughput = 1e3 / (latency_ms + overhead_s * 1e3)
    power = sim.energy_j / sim.makespan_s
    summary = sim.assignment.summary() if sim.assignment is not None else {}
    if sim.host != "cpu" and "CPU" in summary:
        summary = {(sim.host.upper() if k == "CPU" else k): v for k, v in summary.items()}
    return RunReport(
        latency_ms_per_image=latency_ms,
        throughput_images_per_s=throughput,
        power_w=power,
        energy_j_per_image=sim.energy_j,
        efficiency_images_per_s_per_w=throughput / power,
        assignment_summary=summary,
        top1_accuracy=top1_accuracy,
        label=label,
    )


@dataclass(frozen=True)
class Comparison:
    latency_speedup: float
    efficiency_ratio: float


def compare_reports(baseline: RunReport, candidate: RunReport) -> Comparison:
    return Comparison(
        latency_speedup=baseline.latency_ms_per_image / candidate.latency_ms_per_image,
        efficiency_ratio=(
            candidate.efficiency_images_per_s_per_w / baseline.efficiency_images_per_s_per_w
        ),
    )
