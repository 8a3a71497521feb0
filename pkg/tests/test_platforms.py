import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from agentsim.exceptions import ConfigError, LayerUntileable
from agentsim.graph import LayerCost
from agentsim.platforms import (
    AccelConfig, DeviceCapacity, HostConfig, Tile, TilePlan, effective_bandwidth, estimate_resources,
    fpga_layer_time, host_layer_time, is_tileable, load_platforms, minimal_tile_bytes, plan_tiles,
)

from _helpers import occupancy, random_layer

KB = 1024


def accel(**kw):
    base = dict(
        num_macs=1024, clock_hz=200e6, onchip_buffer_bytes=2 * 2**20, bus_width_bits=64,
        bus_transfers_per_sec=2400e6, bus_utilization=0.85, active_power_w=28.0, idle_power_w=0.0,
        per_layer_setup_s=0.0, device_capacity=DeviceCapacity(274080, 1500, 912),
    )
    base.update(kw)
    return AccelConfig(**base)


# -- bandwidth -----------------------------------------------------------------

def test_reference_bus_bandwidth():
    assert effective_bandwidth(accel()) == pytest.approx(16.32e9, rel=1e-12)


def test_unit_bus_bandwidth():
    cfg = accel(bus_width_bits=8, bus_transfers_per_sec=1e9, bus_utilization=1.0)
    assert effective_bandwidth(cfg) == 1e9


@pytest.mark.parametrize("bad", [dict(bus_utilization=0.0), dict(num_macs=0),
                                 dict(active_power_w=1.0, idle_power_w=2.0)])
def test_invalid_accel_rejected(bad):
    with pytest.raises(ValueError):
        accel(**bad)


# -- tiling ----------------------------------------------------------------------

def big_layer(channels=64, rows=16):
    return LayerCost.from_bytes(macs=channels * rows * 1000, input_bytes=512 * KB,
                                weight_bytes=256 * KB, output_bytes=512 * KB,
                                channels=channels, rows=rows)


def smallest_feasible_k(cost, cap):
    """Brute force over channel split counts k (full rows), as in the contract."""
    C = cost.geometry.out_channels
    for k in range(1, C + 1):
        cs = math.ceil(C / k)
        if cost.geometry.tile_demand(cs, cost.geometry.out_rows) <= cap:
            return k, cs
    return None


def test_layer_fits_whole():
    plan = plan_tiles(big_layer(), accel(onchip_buffer_bytes=2 * 2**20))
    assert plan.tile_count == 1


def test_layer_split_when_buffer_small():
    cost = big_layer()
    cap = 2**20
    plan = plan_tiles(cost, accel(onchip_buffer_bytes=cap))
    assert plan.tile_count >= 2
    assert all(t.total_bytes <= cap for t in plan.tiles)
    k, cs = smallest_feasible_k(cost, cap)
    assert plan.channels_per_tile == cs
    assert plan.tile_count == math.ceil(64 / cs)


def test_untileable():
    cost = LayerCost.from_bytes(macs=0, input_bytes=3 * 2**20, weight_bytes=0, output_bytes=1,
                                channels=1, rows=1)
    with pytest.raises(LayerUntileable):
        plan_tiles(cost, accel(onchip_buffer_bytes=2**20))
    assert not is_tileable(cost, accel(onchip_buffer_bytes=2**20))


def test_occupancy_oracle_matches_demand_model():
    rng = np.random.default_rng(7)
    for _ in range(300):
        cost = random_layer(rng)
        g = cost.geometry
        for cs in range(1, g.out_channels + 1):
            for rs in range(1, g.out_rows + 1):
                assert g.tile_demand(cs, rs) == occupancy(cost, cs, rs)


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), cap=st.integers(1, 4000))
def test_tiling_properties(seed, cap):
    cost = random_layer(np.random.default_rng(seed))
    cfg = accel(onchip_buffer_bytes=cap)
    g = cost.geometry
    best = min(occupancy(cost, cs, rs) for cs in range(1, g.out_channels + 1)
               for rs in range(1, g.out_rows + 1))
    if best > cap:
        with pytest.raises(LayerUntileable):
            plan_tiles(cost, cfg)
        return
    plan = plan_tiles(cost, cfg)
    assert all(t.total_bytes <= cap for t in plan.tiles)
    assert plan.demand_bytes <= cap
    assert sum(t.macs for t in plan.tiles) == cost.macs
    assert sum(t.output_bytes for t in plan.tiles) == cost.output_bytes
    assert sum(t.weight_bytes for t in plan.tiles) == cost.weight_bytes
    assert minimal_tile_bytes(cost) == best


# -- timing ------------------------------------------------------------------------

def one_tile(macs, nbytes):
    return TilePlan((Tile(nbytes, 0, 0, macs),), 1, 1, nbytes)


def test_single_tile_example():
    cfg = accel(num_macs=1024, clock_hz=200e6)
    cost = LayerCost(10**6, 0, 100_000, 0)
    lt = fpga_layer_time(cost, one_tile(10**6, 100_000), cfg)
    assert lt.compute_s == pytest.approx(977 / 200e6, rel=1e-12)
    assert lt.compute_s == pytest.approx(4.885e-6, rel=1e-12)
    assert lt.transfer_s == pytest.approx(6.127e-6, rel=1e-3)
    assert 6.127e-6 * (1 - 1e-3) <= lt.seconds <= 11.012e-6 * (1 + 1e-3)


def test_zero_mac_tile():
    cfg = accel(per_layer_setup_s=1e-6)
    lt = fpga_layer_time(LayerCost(0, 0, 1000, 0), one_tile(0, 1000), cfg)
    assert lt.compute_s == 0
    assert lt.seconds == pytest.approx(1e-6 + lt.transfer_s, rel=1e-12)


@pytest.mark.parametrize("n", [1, 2, 5, 50])
def test_identical_tiles_closed_form(n):
    # load X and store X per tile at 1 B/ns; compute 2X ns, so c equals per-tile transfer t
    X = 500
    cfg = accel(num_macs=1, clock_hz=1e9, bus_width_bits=8, bus_transfers_per_sec=1e9,
                bus_utilization=1.0, per_layer_setup_s=3e-6)
    plan = TilePlan(tuple(Tile(X, 0, X, 2 * X) for _ in range(n)), 1, 1, 2 * X)
    cost = LayerCost(2 * X * n, 0, X * n, X * n)
    c = 2 * X * 1e-9
    lt = fpga_layer_time(cost, plan, cfg)
    assert lt.seconds == pytest.approx(3e-6 + (n + 1) * c, rel=1e-12)


def random_plan(rng):
    n = int(rng.integers(1, 12))
    tiles = tuple(
        Tile(int(rng.integers(0, 5000)), int(rng.integers(0, 3000)), int(rng.integers(0, 5000)),
             int(rng.integers(0, 200000)))
        for _ in range(n)
    )
    cost = LayerCost(sum(t.macs for t in tiles), sum(t.weight_bytes for t in tiles),
                     sum(t.input_bytes for t in tiles), sum(t.output_bytes for t in tiles))
    return cost, TilePlan(tiles, 1, 1, max(t.total_bytes for t in tiles))


def random_accel(rng):
    return accel(
        num_macs=int(rng.integers(1, 4096)), clock_hz=float(rng.uniform(5e7, 5e8)),
        bus_width_bits=int(rng.choice([8, 32, 64])), bus_transfers_per_sec=float(rng.uniform(1e7, 3e9)),
        bus_utilization=float(rng.uniform(0.05, 1.0)), per_layer_setup_s=float(rng.uniform(0, 1e-4)),
    )


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_overlap_sandwich_and_serial_bound(seed):
    rng = np.random.default_rng(seed)
    cost, plan = random_plan(rng)
    cfg = random_accel(rng)
    lt = fpga_layer_time(cost, plan, cfg)
    body = lt.seconds - cfg.per_layer_setup_s
    tol = 1e-12 * max(1.0, lt.seconds) + 1e-18
    assert max(lt.compute_s, lt.transfer_s) <= body + tol
    assert body <= lt.compute_s + lt.transfer_s + tol
    serial = fpga_layer_time(cost, plan, cfg, double_buffering=False)
    assert lt.seconds <= serial.seconds + tol


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1.0, 8.0))
def test_time_monotone_in_macs_and_bandwidth(seed, factor):
    rng = np.random.default_rng(seed)
    cost, plan = random_plan(rng)
    cfg = random_accel(rng)
    base = fpga_layer_time(cost, plan, cfg).seconds
    more_macs = replace(cfg, num_macs=int(cfg.num_macs * factor) + 1)
    faster_bus = replace(cfg, bus_transfers_per_sec=cfg.bus_transfers_per_sec * factor)
    assert fpga_layer_time(cost, plan, more_macs).seconds <= base * (1 + 1e-12)
    assert fpga_layer_time(cost, plan, faster_bus).seconds <= base * (1 + 1e-12)


def test_host_layer_time():
    h = HostConfig("cpu", 1e9, 1e-5, 0.0, 85.0)
    assert host_layer_time(LayerCost(10**6, 0, 0, 0), h) == pytest.approx(1.01e-3, rel=1e-12)
    assert host_layer_time(LayerCost(0, 0, 0, 0), h) == 1e-5


def test_host_rejects_negative():
    with pytest.raises(ValueError):
        HostConfig("cpu", 1e9, -1.0, 0.0, 1.0)


# -- resources ---------------------------------------------------------------------

def test_resource_example():
    r = estimate_resources(accel(num_macs=1024, onchip_buffer_bytes=2 * 2**20))
    assert r.dsps_used == 1024
    assert r.bram_blocks_used == 456
    assert r.utilization == max(r.lut_utilization, r.dsp_utilization, r.bram_utilization)


def test_overcommitted_config_flagged():
    r = estimate_resources(accel(num_macs=2000))
    assert r.utilization > 1 and not r.feasible


def test_shipped_configs_load():
    p = load_platforms("paper_calibrated")
    assert 0.65 <= estimate_resources(p.accel).utilization <= 0.75
    k = load_platforms("kv260")
    assert k.accel.dram_bytes == 4 * 2**30
    assert effective_bandwidth(k.accel) == pytest.approx(16.32e9)
    assert estimate_resources(k.accel).feasible


def test_missing_host_is_config_error(tmp_path):
    d = load_platforms("paper_calibrated").to_dict()
    del d["hosts"]["gpu"]
    import json
    path = tmp_path / "p.json"
    path.write_text(json.dumps(d))
    with pytest.raises(ConfigError) as e:
        load_platforms(path)
    assert e.value.field == "hosts.gpu"
