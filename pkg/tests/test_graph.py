import itertools

import pytest
from hypothesis import given, settings, strategies as st

from agentsim.exceptions import (
    CycleDetected, DanglingPredecessor, GraphError, NonPositiveOutputDim, ShapeMismatch,
)
from agentsim.graph import (
    LayerKind, LayerSpec, ModelGraph, TensorShape, build_resnet_like, graph_costs, infer_shapes,
    layer_cost, output_shape, total_macs, validate_graph,
)

K = LayerKind


def conv(i, cin, cout, pred=(), k=3, s=1, p=1):
    return LayerSpec(i, K.CONV2D, cin, cout, k, k, s, p, tuple(pred))


def brute_force_macs(layer, in_shape):
    """Count multiply-accumulates by walking every output position and kernel tap."""
    out = output_shape(layer, in_shape)
    n = 0
    if layer.kind is K.CONV2D:
        for _o, _y, _x in itertools.product(range(out.channels), range(out.height), range(out.width)):
            for _c, _i, _j in itertools.product(range(layer.in_channels), range(layer.kernel_h),
                                                range(layer.kernel_w)):
                n += 1
    elif layer.kind is K.FULLY_CONNECTED:
        for _o in range(layer.out_channels):
            for _c in range(layer.in_channels):
                n += 1
    return n


# -- validation ----------------------------------------------------------------

def test_single_conv_is_valid():
    g = ModelGraph((conv(0, 3, 8),), TensorShape(1, 3, 8, 8))
    assert validate_graph(g)


def test_forward_reference_is_cycle():
    layers = (
        conv(0, 3, 8), conv(1, 8, 8, (0,)), conv(2, 8, 8, (1,)),
        conv(3, 8, 8, (5,)), conv(4, 8, 8, (3,)), conv(5, 8, 8, (4,)),
    )
    with pytest.raises(CycleDetected) as e:
        validate_graph(ModelGraph(layers, TensorShape(1, 3, 8, 8)))
    assert e.value.layer_id == 3


def test_channel_mismatch_names_layer():
    layers = (conv(0, 3, 32), conv(1, 16, 8, (0,)))
    with pytest.raises(ShapeMismatch) as e:
        validate_graph(ModelGraph(layers, TensorShape(1, 3, 8, 8)))
    assert e.value.layer_id == 1
    assert e.value.rule == "shape-consistency"


def test_dangling_predecessor():
    layers = (conv(0, 3, 8), conv(1, 8, 8, (7,)))
    with pytest.raises(DanglingPredecessor):
        validate_graph(ModelGraph(layers, TensorShape(1, 3, 8, 8)))


def test_add_needs_two_predecessors():
    layers = (conv(0, 3, 8), LayerSpec(1, K.ELEMENTWISE_ADD, 8, 8, predecessors=(0,)))
    with pytest.raises(GraphError):
        validate_graph(ModelGraph(layers, TensorShape(1, 3, 8, 8)))


def test_two_sources_rejected():
    layers = (conv(0, 3, 8), conv(1, 3, 8))
    with pytest.raises(GraphError):
        validate_graph(ModelGraph(layers, TensorShape(1, 3, 8, 8)))


def test_tensor_shape_rejects_zero():
    with pytest.raises(ValueError):
        TensorShape(1, 0, 4, 4)


# -- shapes ----------------------------------------------------------------------

def test_same_padding_conv_shape():
    assert output_shape(conv(0, 16, 24), TensorShape(1, 16, 32, 32)) == TensorShape(1, 24, 32, 32)


def test_pool_shape():
    pool = LayerSpec(0, K.POOL2D, 32, 32, 2, 2, 2, 0)
    assert output_shape(pool, TensorShape(1, 32, 32, 32)) == TensorShape(1, 32, 16, 16)


def test_kernel_larger_than_input():
    with pytest.raises(NonPositiveOutputDim):
        output_shape(conv(0, 3, 3, k=7, p=0), TensorShape(1, 3, 4, 4))


def test_fc_shape():
    fc = LayerSpec(0, K.FULLY_CONNECTED, 256, 10)
    assert output_shape(fc, TensorShape(1, 256, 1, 1)) == TensorShape(1, 10, 1, 1)


@given(
    size=st.integers(1, 40), k=st.integers(1, 7), s=st.integers(1, 3), p=st.integers(0, 3),
)
def test_spatial_formula(size, k, s, p):
    layer = conv(0, 2, 2, k=k, s=s, p=p)
    expected = (size + 2 * p - k) // s + 1
    if expected < 1:
        with pytest.raises(NonPositiveOutputDim):
            output_shape(layer, TensorShape(1, 2, size, size))
    else:
        assert output_shape(layer, TensorShape(1, 2, size, size)).height == expected


# -- costs -------------------------------------------------------------------------

def test_conv_macs_against_loop_counter():
    layer = conv(0, 16, 32)
    shape = TensorShape(1, 16, 32, 32)
    assert layer_cost(layer, shape).macs == 4_718_592
    small = conv(0, 3, 5)
    assert layer_cost(small, TensorShape(1, 3, 6, 6)).macs == brute_force_macs(small, TensorShape(1, 3, 6, 6))


def test_fc_macs_against_loop_counter():
    fc = LayerSpec(0, K.FULLY_CONNECTED, 256, 10)
    shape = TensorShape(1, 256, 1, 1)
    assert layer_cost(fc, shape).macs == 2560 == brute_force_macs(fc, shape)


@settings(max_examples=40, deadline=None)
@given(cin=st.integers(1, 4), cout=st.integers(1, 4), size=st.integers(3, 8), k=st.sampled_from([1, 3]),
       s=st.integers(1, 2))
def test_conv_macs_property(cin, cout, size, k, s):
    layer = conv(0, cin, cout, k=k, s=s, p=k // 2)
    shape = TensorShape(1, cin, size, size)
    assert layer_cost(layer, shape).macs == brute_force_macs(layer, shape)


@pytest.mark.parametrize("kind", [K.ACTIVATION, K.POOL2D])
def test_weightless_layers_have_zero_macs(kind):
    layer = LayerSpec(0, kind, 8, 8, 2, 2, 2, 0) if kind is K.POOL2D else LayerSpec(0, kind, 8, 8)
    c = layer_cost(layer, TensorShape(1, 8, 4, 4))
    assert c.macs == 0 and c.weight_bytes == 0 and c.arithmetic_intensity == 0


def test_add_moves_two_inputs():
    add = LayerSpec(2, K.ELEMENTWISE_ADD, 8, 8, predecessors=(0, 1))
    c = layer_cost(add, TensorShape(1, 8, 4, 4))
    assert c.input_bytes == 2 * 128 and c.output_bytes == 128 and c.macs == 0


def test_intensity_definition():
    c = layer_cost(conv(0, 16, 32), TensorShape(1, 16, 32, 32))
    assert c.arithmetic_intensity == c.macs / (c.weight_bytes + c.input_bytes + c.output_bytes)
    assert c.weight_bytes == 16 * 32 * 9


def test_bytes_per_element_scales_bytes_only():
    g = build_resnet_like()
    one, four = graph_costs(g, 1), graph_costs(g, 4)
    for lid in g.layer_ids:
        assert one[lid].macs == four[lid].macs
        assert 4 * one[lid].total_bytes == four[lid].total_bytes


def test_intensity_grows_with_kernel_area():
    shape = TensorShape(1, 16, 16, 16)
    values = [layer_cost(conv(0, 16, 16, k=k, p=k // 2), shape).arithmetic_intensity for k in (1, 3, 5, 7)]
    assert all(a < b for a, b in zip(values, values[1:]))


def test_macs_invariant_under_reordering():
    # two independent branches feeding an add: either branch may be stored first
    a = (conv(0, 3, 8), conv(1, 8, 8, (0,)), conv(2, 8, 8, (0,)),
         LayerSpec(3, K.ELEMENTWISE_ADD, 8, 8, predecessors=(1, 2)))
    b = (a[0], a[2], a[1], a[3])
    shape = TensorShape(1, 3, 8, 8)
    assert total_macs(ModelGraph(a, shape)) == total_macs(ModelGraph(b, shape))


# -- generator ----------------------------------------------------------------------

def test_one_block_has_eight_layers():
    g = build_resnet_like(num_blocks=1, base_channels=16, input_shape=TensorShape(1, 3, 32, 32))
    assert len(g) == 8
    assert g.layers[-1].kind is K.FULLY_CONNECTED
    assert validate_graph(g)


def test_four_blocks_downsample_twice():
    g = build_resnet_like(num_blocks=4)
    strided = [lay for lay in g.layers if lay.kind is K.CONV2D and lay.stride == 2]
    assert len(strided) == 2
    shapes = infer_shapes(g)
    pool = next(lay for lay in g.layers if lay.kind is K.POOL2D)
    assert shapes[pool.predecessors[0]].height == 32 // 4


@given(st.integers(1, 6), st.sampled_from([4, 8, 16]), st.sampled_from([16, 32, 48]))
@settings(max_examples=25, deadline=None)
def test_generator_always_valid(blocks, base, size):
    g = build_resnet_like(blocks, base, TensorShape(1, 3, size, size))
    assert validate_graph(g)


def test_json_round_trip(tmp_path):
    g = build_resnet_like()
    g.save(tmp_path / "m.json")
    assert ModelGraph.load(tmp_path / "m.json") == g
    d = g.to_dict()
    assert d["layers"][0] == {
        "id": 0, "kind": "Conv2D", "kernel": [3, 3], "stride": 1, "padding": 1,
        "in_channels": 3, "out_channels": 16, "pred": [],
    }
