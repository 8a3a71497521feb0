"""Performance, power and resource models for the FPGA accelerator and hosts."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

from .exceptions import ConfigError, LayerUntileable
from .graph import LayerCost

BUILTIN_PLATFORMS = ("paper_calibrated", "kv260")


@dataclass(frozen=True)
class DeviceCapacity:
    luts: int
    dsps: int
    bram_blocks: int


@dataclass(frozen=True)
class AccelConfig:
    num_macs: int
    clock_hz: float
    onchip_buffer_bytes: int
    bus_width_bits: int
    bus_transfers_per_sec: float
    bus_utilization: float
    active_power_w: float
    idle_power_w: float
    per_layer_setup_s: float
    device_capacity: DeviceCapacity
    bram_block_bytes: int = 4608
    dsps_per_mac: int = 1
    lut_base: int = 20000
    lut_per_mac: int = 100
    bytes_per_element: int = 1
    per_image_stream_overhead_s: float = 0.0
    dram_bytes: int | None = None
    name: str = "fpga"

    def __post_init__(self):
        if isinstance(self.device_capacity, dict):
            object.__setattr__(self, "device_capacity", DeviceCapacity(**self.device_capacity))
        if self.num_macs < 1:
            raise ValueError("num_macs must be >= 1")
        if not 0 < self.bus_utilization <= 1:
            raise ValueError("bus_utilization must lie in (0, 1]")
        if self.onchip_buffer_bytes < 1:
            raise ValueError("onchip_buffer_bytes must be >= 1")
        if not self.active_power_w >= self.idle_power_w >= 0:
            raise ValueError("need active_power_w >= idle_power_w >= 0")
        if self.clock_hz <= 0 or self.bus_transfers_per_sec <= 0 or self.bus_width_bits < 1:
            raise ValueError("clock, bus width and transfer rate must be positive")
        if self.per_layer_setup_s < 0 or self.per_image_stream_overhead_s < 0:
            raise ValueError("overheads must be >= 0")
        if self.bram_block_bytes < 1 or self.bytes_per_element < 1:
            raise ValueError("bram_block_bytes and bytes_per_element must be >= 1")


@dataclass(frozen=True)
class HostConfig:
    name: str
    effective_macs_per_sec: float
    per_layer_overhead_s: float
    per_image_stream_overhead_s: float
    power_w: float
    idle_power_w: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            if f.name != "name" and getattr(self, f.name) < 0:
                raise ValueError(f"HostConfig.{f.name} must be >= 0")
        if self.effective_macs_per_sec == 0:
            raise ValueError("effective_macs_per_sec must be > 0")


@dataclass(frozen=True)
class Platforms:
    accel: AccelConfig
    hosts: dict = field(default_factory=dict)

    def host(self, name="cpu"):
        try:
            return self.hosts[name]
        except KeyError:
            raise ConfigError(f"no host named {name!r}", field="hosts") from None

    def to_dict(self):
        return {
            "accelerator": asdict(self.accel),
            "hosts": {k: asdict(v) for k, v in sorted(self.hosts.items())},
        }

    @classmethod
    def from_dict(cls, d, path=None):
        try:
            accel = AccelConfig(**d["accelerator"])
        except KeyError as exc:
            raise ConfigError(f"missing field {exc}", path, "accelerator") from None
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc), path, "accelerator") from None
        hosts = {}
        for name, h in d.get("hosts", {}).items():
            try:
                hosts[name] = HostConfig(**h)
            except (TypeError, ValueError) as exc:
                raise ConfigError(str(exc), path, f"hosts.{name}") from None
        for required in ("cpu", "gpu"):
            if required not in hosts:
                raise ConfigError("host entry missing", path, f"hosts.{required}")
        return cls(accel, hosts)

    def replace_accel(self, **changes):
        params = asdict(self.accel)
        params.update(changes)
        return Platforms(AccelConfig(**params), dict(self.hosts))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def load_platforms(source) -> Platforms:
    """Load a platform file, or one of the shipped configs by name."""
    if isinstance(source, Platforms):
        return source
    if str(source) in BUILTIN_PLATFORMS:
        text = resources.files("agentsim.data.platforms").joinpath(f"{source}.json").read_text()
        path = f"<builtin {source}>"
    else:
        path = Path(source)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read platform config: {exc}", path) from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}", path) from None
    return Platforms.from_dict(data, path)


def effective_bandwidth(cfg: AccelConfig) -> float:
    """Sustained bus bandwidth in bytes per second."""
    return cfg.bus_width_bits / 8 * cfg.bus_transfers_per_sec * cfg.bus_utilization


@dataclass(frozen=True)
class Tile:
    input_bytes: int
    weight_bytes: int
    output_bytes: int
    macs: int

    @property
    def total_bytes(self):
        return self.input_bytes + self.weight_bytes + self.output_bytes


@dataclass(frozen=True)
class TilePlan:
    tiles: tuple[Tile, ...]
    channels_per_tile: int
    rows_per_tile: int
    demand_bytes: int

    @property
    def tile_count(self):
        return len(self.tiles)


def minimal_tile_bytes(cost: LayerCost) -> int:
    """Buffer demand of the smallest legal tile (one output row of one channel)."""
    return cost.geometry.tile_demand(1, 1)


def is_tileable(cost: LayerCost, cfg: AccelConfig) -> bool:
    return minimal_tile_bytes(cost) <= cfg.onchip_buffer_bytes


def _build_tiles(geo, cs, rs):
    tiles = []
    for c0 in range(0, geo.out_channels, cs):
        nc = min(cs, geo.out_channels - c0)
        for r0 in range(0, geo.out_rows, rs):
            nr = min(rs, geo.out_rows - r0)
            in_bytes = geo.input_rows_for(r0, r0 + nr) * geo.in_row_bytes
            if geo.channel_local:
                in_bytes *= nc
            tiles.append(
                Tile(
                    input_bytes=in_bytes,
                    # weights stay resident across the row tiles of a channel group
                    weight_bytes=nc * geo.weight_bytes_per_channel if r0 == 0 else 0,
                    output_bytes=nc * nr * geo.out_unit_bytes,
                    macs=nc * nr * geo.macs_per_unit,
                )
            )
    return tuple(tiles)


def plan_tiles(cost: LayerCost, cfg: AccelConfig) -> TilePlan:
    """Split a layer into the fewest tiles that fit the on-chip buffer.

    Output channels are split first, into groups of ``ceil(C / k)`` for the
    smallest feasible ``k``; only when a single channel is still too large are
    its output rows split the same way.
    """
    geo = cost.geometry
    cap = cfg.onchip_buffer_bytes
    if geo.tile_demand(1, 1) > cap:
        raise LayerUntileable(
            f"minimal tile needs {geo.tile_demand(1, 1)} bytes, buffer holds {cap}"
        )
    C, H = geo.out_channels, geo.out_rows
    cs, rs = None, H
    for k in range(1, C + 1):
        size = -(-C // k)
        if geo.tile_demand(size, H) <= cap:
            cs = size
            break
    if cs is None:
        cs = 1
        for k in range(2, H + 1):
            size = -(-H // k)
            if geo.tile_demand(1, size) <= cap:
                rs = size
                break
    return TilePlan(_build_tiles(geo, cs, rs), cs, rs, geo.tile_demand(cs, rs))


@dataclass(frozen=True)
class LayerTime:
    seconds: float
    compute_s: float
    transfer_s: float
    # (kind, tile_index, start, end) relative to layer start; kind in
    # {"setup", "compute", "load", "store"}
    events: tuple = ()


def fpga_layer_time(
    cost: LayerCost,
    plan: TilePlan,
    cfg: AccelConfig,
    *,
    input_resident_bytes=0,
    output_resident=False,
    double_buffering=True,
) -> LayerTime:
    """Time to run one tiled layer on the accelerator.

    While tile ``i`` computes, the DMA engine fetches tile ``i+1`` and then
    writes back tile ``i-1``. The first load and last store are exposed.
    ``input_resident_bytes`` of the input already sit on chip and are not
    fetched; ``output_resident`` suppresses write-back.
    """
    bw = effective_bandwidth(cfg)
    keep = 1.0
    if input_resident_bytes and cost.input_bytes:
        keep = max(0.0, 1.0 - input_resident_bytes / cost.input_bytes)
    loads = [(t.input_bytes * keep + t.weight_bytes) / bw for t in plan.tiles]
    stores = [0.0 if output_resident else t.output_bytes / bw for t in plan.tiles]
    comps = [math.ceil(t.macs / cfg.num_macs) / cfg.clock_hz for t in plan.tiles]
    n = len(comps)

    events = []
    t = cfg.per_layer_setup_s
    if t > 0:
        events.append(("setup", None, 0.0, t))

    if not double_buffering:
        for i in range(n):
            for kind, d in (("load", loads[i]), ("compute", comps[i]), ("store", stores[i])):
                if d > 0:
                    events.append((kind, i, t, t + d))
                t += d
        return LayerTime(t, sum(comps), sum(loads) + sum(stores), tuple(events))

    if loads and loads[0] > 0:
        events.append(("load", 0, t, t + loads[0]))
    t += loads[0] if loads else 0.0
    for i in range(n):
        if comps[i] > 0:
            events.append(("compute", i, t, t + comps[i]))
        dma = t
        if i + 1 < n and loads[i + 1] > 0:
            events.append(("load", i + 1, dma, dma + loads[i + 1]))
            dma += loads[i + 1]
        if i >= 1 and stores[i - 1] > 0:
            events.append(("store", i - 1, dma, dma + stores[i - 1]))
            dma += stores[i - 1]
        t = max(t + comps[i], dma)
    if n and stores[-1] > 0:
        events.append(("store", n - 1, t, t + stores[-1]))
        t += stores[-1]
    return LayerTime(t, sum(comps), sum(loads) + sum(stores), tuple(events))


def host_layer_time(cost: LayerCost, cfg: HostConfig) -> float:
    return cfg.per_layer_overhead_s + cost.macs / cfg.effective_macs_per_sec


@dataclass(frozen=True)
class ResourceReport:
    luts_used: int
    dsps_used: int
    bram_blocks_used: int
    utilization: float
    lut_utilization: float
    dsp_utilization: float
    bram_utilization: float

    @property
    def feasible(self):
        return self.utilization <= 1.0


def estimate_resources(cfg: AccelConfig) -> ResourceReport:
    cap = cfg.device_capacity
    dsps = cfg.num_macs * cfg.dsps_per_mac
    bram = math.ceil(cfg.onchip_buffer_bytes / cfg.bram_block_bytes)
    luts = cfg.lut_base + cfg.lut_per_mac * cfg.num_macs
    lut_u, dsp_u, bram_u = luts / cap.luts, dsps / cap.dsps, bram / cap.bram_blocks
    return ResourceReport(luts, dsps, bram, max(lut_u, dsp_u, bram_u), lut_u, dsp_u, bram_u)
