"""Neural-network layer graphs and per-layer cost accounting.

A :class:`ModelGraph` is an ordered list of :class:`LayerSpec` whose storage
order must already be topological. Costs are per single image.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

from .exceptions import (
    CycleDetected,
    DanglingPredecessor,
    GraphError,
    NonPositiveOutputDim,
    ShapeMismatch,
)


class LayerKind(str, enum.Enum):
    CONV2D = "Conv2D"
    POOL2D = "Pool2D"
    FULLY_CONNECTED = "FullyConnected"
    ACTIVATION = "Activation"
    ELEMENTWISE_ADD = "ElementwiseAdd"

    @property
    def spatial(self):
        return self in (LayerKind.CONV2D, LayerKind.POOL2D)

    @property
    def has_weights(self):
        return self in (LayerKind.CONV2D, LayerKind.FULLY_CONNECTED)


@dataclass(frozen=True)
class TensorShape:
    batch: int
    channels: int
    height: int = 1
    width: int = 1

    def __post_init__(self):
        for name in ("batch", "channels", "height", "width"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"TensorShape.{name} must be >= 1, got {getattr(self, name)}")

    @property
    def numel(self):
        """Elements of one image (batch excluded)."""
        return self.channels * self.height * self.width

    def as_list(self):
        return [self.batch, self.channels, self.height, self.width]


@dataclass(frozen=True)
class LayerSpec:
    id: int
    kind: LayerKind
    in_channels: int
    out_channels: int
    kernel_h: int = 1
    kernel_w: int = 1
    stride: int = 1
    padding: int = 0
    predecessors: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "kind", LayerKind(self.kind))
        object.__setattr__(self, "predecessors", tuple(int(p) for p in self.predecessors))

    def to_dict(self):
        return {
            "id": self.id,
            "kind": self.kind.value,
            "kernel": [self.kernel_h, self.kernel_w],
            "stride": self.stride,
            "padding": self.padding,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "pred": list(self.predecessors),
        }

    @classmethod
    def from_dict(cls, d):
        kh, kw = d.get("kernel", [1, 1])
        return cls(
            id=int(d["id"]),
            kind=LayerKind(d["kind"]),
            in_channels=int(d["in_channels"]),
            out_channels=int(d["out_channels"]),
            kernel_h=int(kh),
            kernel_w=int(kw),
            stride=int(d.get("stride", 1)),
            padding=int(d.get("padding", 0)),
            predecessors=tuple(d.get("pred", ())),
        )


@dataclass(frozen=True)
class ModelGraph:
    layers: tuple[LayerSpec, ...]
    input_shape: TensorShape

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))

    def __len__(self):
        return len(self.layers)

    def __iter__(self):
        return iter(self.layers)

    @property
    def layer_ids(self):
        return tuple(layer.id for layer in self.layers)

    def layer(self, layer_id):
        for layer in self.layers:
            if layer.id == layer_id:
                return layer
        raise KeyError(layer_id)

    def consumers(self):
        """Map layer id -> tuple of ids that consume its output."""
        out = {layer.id: [] for layer in self.layers}
        for layer in self.layers:
            for p in layer.predecessors:
                out.setdefault(p, []).append(layer.id)
        return {k: tuple(v) for k, v in out.items()}

    def to_dict(self):
        return {
            "input_shape": self.input_shape.as_list(),
            "layers": [layer.to_dict() for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            layers=tuple(LayerSpec.from_dict(x) for x in d["layers"]),
            input_shape=TensorShape(*d["input_shape"]),
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class TileGeometry:
    """How a layer's output can be cut into (channel, row) tiles.

    ``in_row_bytes`` is the input needed per receptive-field row; for
    channel-local layers (pooling, activation, add) it is per output channel,
    otherwise it covers every input channel.
    """

    out_channels: int = 1
    out_rows: int = 1
    out_unit_bytes: int = 0
    weight_bytes_per_channel: int = 0
    macs_per_unit: int = 0
    in_rows: int = 1
    in_row_bytes: int = 0
    kernel_h: int = 1
    stride: int = 1
    padding: int = 0
    channel_local: bool = False

    def input_rows_for(self, r0, r1):
        """Input rows touched by output rows ``[r0, r1)``, clipped to the tensor."""
        lo = max(0, r0 * self.stride - self.padding)
        hi = min(self.in_rows, (r1 - 1) * self.stride - self.padding + self.kernel_h)
        return max(0, hi - lo)

    def tile_demand(self, channels, rows):
        """Peak buffer bytes when output is cut into ``channels`` x ``rows`` tiles.

        Row tiles start at multiples of ``rows``; a channel group's weights
        stay resident while its row tiles stream through.
        """
        ch_in = channels if self.channel_local else 1
        peak = 0
        for r0 in range(0, self.out_rows, rows):
            nr = min(rows, self.out_rows - r0)
            io = (self.input_rows_for(r0, r0 + nr) * self.in_row_bytes * ch_in
                  + channels * nr * self.out_unit_bytes)
            peak = max(peak, io)
        return peak + channels * self.weight_bytes_per_channel


@dataclass(frozen=True)
class LayerCost:
    macs: int
    weight_bytes: int
    input_bytes: int
    output_bytes: int
    geometry: TileGeometry = field(default_factory=TileGeometry, compare=False)

    @property
    def total_bytes(self):
        return self.weight_bytes + self.input_bytes + self.output_bytes

    @property
    def arithmetic_intensity(self):
        total = self.total_bytes
        return self.macs / total if total else 0.0

    @classmethod
    def from_bytes(cls, macs, input_bytes, weight_bytes, output_bytes, channels=1, rows=1):
        """Cost of a synthetic layer whose tensors split evenly by channel and row.

        Input is shared across channels and partitioned by row, as for a 1x1
        convolution. Byte counts must divide evenly.
        """
        units = channels * rows
        if output_bytes % units or weight_bytes % channels or input_bytes % rows or macs % units:
            raise ValueError("byte and MAC counts must divide evenly into channels x rows")
        geo = TileGeometry(
            out_channels=channels,
            out_rows=rows,
            out_unit_bytes=output_bytes // units,
            weight_bytes_per_channel=weight_bytes // channels,
            macs_per_unit=macs // units,
            in_rows=rows,
            in_row_bytes=input_bytes // rows,
        )
        return cls(macs, weight_bytes, input_bytes, output_bytes, geo)


def validate_graph(graph: ModelGraph) -> bool:
    """Check every structural rule; raise a :class:`GraphError` on the first failure."""
    if not graph.layers:
        raise GraphError("graph has no layers")
    position = {}
    for idx, layer in enumerate(graph.layers):
        if layer.id in position:
            raise GraphError("duplicate layer id", layer.id)
        position[layer.id] = idx
    all_ids = set(position)

    sources = [layer.id for layer in graph.layers if not layer.predecessors]
    if len(sources) != 1:
        raise GraphError(f"expected exactly one input-consuming layer, found {sources}")

    out_channels = {}
    for idx, layer in enumerate(graph.layers):
        for name in ("in_channels", "out_channels", "kernel_h", "kernel_w", "stride"):
            if getattr(layer, name) < 1:
                raise GraphError(f"{name} must be >= 1", layer.id)
        if layer.padding < 0:
            raise GraphError("padding must be >= 0", layer.id)
        preds = layer.predecessors
        if len(set(preds)) != len(preds):
            raise GraphError("repeated predecessor", layer.id)
        if layer.kind is LayerKind.ELEMENTWISE_ADD:
            if len(preds) != 2:
                raise GraphError("ElementwiseAdd needs exactly 2 predecessors", layer.id)
        elif len(preds) > 1:
            raise GraphError(f"{layer.kind.value} takes at most 1 predecessor", layer.id)
        for p in preds:
            if p not in all_ids:
                raise DanglingPredecessor(f"predecessor {p} does not exist", layer.id)
            if position[p] >= idx:
                raise CycleDetected(
                    f"predecessor {p} is not stored before this layer", layer.id
                )
        if preds:
            for p in preds:
                if out_channels[p] != layer.in_channels:
                    raise ShapeMismatch(
                        f"in_channels={layer.in_channels} but predecessor {p} "
                        f"has out_channels={out_channels[p]}",
                        layer.id,
                    )
        elif layer.in_channels != graph.input_shape.channels:
            raise ShapeMismatch(
                f"in_channels={layer.in_channels} but input has "
                f"{graph.input_shape.channels} channels",
                layer.id,
            )
        if not layer.kind.has_weights and layer.in_channels != layer.out_channels:
            raise ShapeMismatch(
                f"{layer.kind.value} must preserve channel count", layer.id
            )
        out_channels[layer.id] = layer.out_channels
    return True


def _spatial_out(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def output_shape(layer: LayerSpec, in_shape: TensorShape) -> TensorShape:
    if layer.kind.spatial:
        h = _spatial_out(in_shape.height, layer.kernel_h, layer.stride, layer.padding)
        w = _spatial_out(in_shape.width, layer.kernel_w, layer.stride, layer.padding)
        if h < 1 or w < 1:
            raise NonPositiveOutputDim(
                f"kernel {layer.kernel_h}x{layer.kernel_w} exceeds padded input "
                f"{in_shape.height}x{in_shape.width}",
                layer.id,
            )
        return TensorShape(in_shape.batch, layer.out_channels, h, w)
    if layer.kind is LayerKind.FULLY_CONNECTED:
        if in_shape.height != 1 or in_shape.width != 1:
            raise ShapeMismatch(
                f"FullyConnected expects a 1x1 spatial input, got "
                f"{in_shape.height}x{in_shape.width}",
                layer.id,
            )
        return TensorShape(in_shape.batch, layer.out_channels, 1, 1)
    return TensorShape(in_shape.batch, layer.out_channels, in_shape.height, in_shape.width)


def input_shapes(graph: ModelGraph) -> dict[int, TensorShape]:
    """Input tensor shape seen by each layer (first predecessor for adds)."""
    outs = infer_shapes(graph)
    return {
        layer.id: outs[layer.predecessors[0]] if layer.predecessors else graph.input_shape
        for layer in graph.layers
    }


def infer_shapes(graph: ModelGraph) -> dict[int, TensorShape]:
    """Output shape of every layer, keyed by layer id."""
    validate_graph(graph)
    shapes = {}
    for layer in graph.layers:
        if layer.predecessors:
            in_shape = shapes[layer.predecessors[0]]
            for p in layer.predecessors[1:]:
                if shapes[p] != in_shape:
                    raise ShapeMismatch(
                        f"ElementwiseAdd inputs differ: {shapes[layer.predecessors[0]]} "
                        f"vs {shapes[p]}",
                        layer.id,
                    )
        else:
            in_shape = graph.input_shape
        shapes[layer.id] = output_shape(layer, in_shape)
    return shapes


def layer_cost(layer: LayerSpec, in_shape: TensorShape, bytes_per_element: int = 1) -> LayerCost:
    """MACs and bytes moved for one image through ``layer``."""
    out = output_shape(layer, in_shape)
    bpe = bytes_per_element
    out_rows = out.height
    out_unit = out.width * bpe
    n_inputs = 2 if layer.kind is LayerKind.ELEMENTWISE_ADD else 1
    input_bytes = n_inputs * in_shape.numel * bpe
    output_bytes = out.numel * bpe

    if layer.kind is LayerKind.CONV2D:
        macs_per_unit = out.width * layer.in_channels * layer.kernel_h * layer.kernel_w
        w_per_ch = layer.in_channels * layer.kernel_h * layer.kernel_w * bpe
    elif layer.kind is LayerKind.FULLY_CONNECTED:
        macs_per_unit = layer.in_channels
        w_per_ch = layer.in_channels * bpe
    else:
        macs_per_unit = 0
        w_per_ch = 0

    channel_local = not layer.kind.has_weights
    in_row_bytes = in_shape.width * bpe * (n_inputs if channel_local else in_shape.channels)
    kernel_h = layer.kernel_h if layer.kind.spatial else 1
    stride = layer.stride if layer.kind.spatial else 1
    padding = layer.padding if layer.kind.spatial else 0

    geo = TileGeometry(
        out_channels=out.channels,
        out_rows=out_rows,
        out_unit_bytes=out_unit,
        weight_bytes_per_channel=w_per_ch,
        macs_per_unit=macs_per_unit,
        in_rows=in_shape.height,
        in_row_bytes=in_row_bytes,
        kernel_h=kernel_h,
        stride=stride,
        padding=padding,
        channel_local=channel_local,
    )
    return LayerCost(
        macs=macs_per_unit * out.channels * out_rows,
        weight_bytes=w_per_ch * out.channels,
        input_bytes=input_bytes,
        output_bytes=output_bytes,
        geometry=geo,
    )


def graph_costs(graph: ModelGraph, bytes_per_element: int = 1) -> dict[int, LayerCost]:
    shapes = infer_shapes(graph)
    costs = {}
    for layer in graph.layers:
        in_shape = shapes[layer.predecessors[0]] if layer.predecessors else graph.input_shape
        costs[layer.id] = layer_cost(layer, in_shape, bytes_per_element)
    return costs


def total_macs(graph: ModelGraph) -> int:
    return sum(c.macs for c in graph_costs(graph).values())


def build_resnet_like(num_blocks=4, base_channels=16, input_shape=None, num_classes=10):
    """Deterministic small residual CNN.

    Layout: 3x3 stem conv, then ``num_blocks`` blocks of
    conv -> relu -> conv -> add -> relu, global average pool, linear classifier.
    Every second block (the 2nd, 4th, ...) halves the spatial size with a
    stride-2 first conv and doubles the channel count. Such a block's skip
    connection cannot reuse the block input, so its add joins the two convs.
    """
    if num_blocks < 1:
        raise ValueError("num_blocks must be >= 1")
    if input_shape is None:
        input_shape = TensorShape(1, 3, 32, 32)
    elif not isinstance(input_shape, TensorShape):
        input_shape = TensorShape(*input_shape)

    layers = []

    def add(kind, cin, cout, pred, kernel=1, stride=1, padding=0):
        kh, kw = kernel if isinstance(kernel, tuple) else (kernel, kernel)
        spec = LayerSpec(
            id=len(layers),
            kind=kind,
            in_channels=cin,
            out_channels=cout,
            kernel_h=kh,
            kernel_w=kw,
            stride=stride,
            padding=padding,
            predecessors=tuple(pred),
        )
        layers.append(spec)
        return spec.id

    ch = base_channels
    x = add(LayerKind.CONV2D, input_shape.channels, ch, (), 3, 1, 1)
    h, w = input_shape.height, input_shape.width
    for b in range(num_blocks):
        downsample = b % 2 == 1
        cout = ch * 2 if downsample else ch
        stride = 2 if downsample else 1
        c1 = add(LayerKind.CONV2D, ch, cout, (x,), 3, stride, 1)
        a1 = add(LayerKind.ACTIVATION, cout, cout, (c1,))
        c2 = add(LayerKind.CONV2D, cout, cout, (a1,), 3, 1, 1)
        skip = c1 if downsample else x
        s = add(LayerKind.ELEMENTWISE_ADD, cout, cout, (c2, skip))
        x = add(LayerKind.ACTIVATION, cout, cout, (s,))
        if downsample:
            h = _spatial_out(h, 3, 2, 1)
            w = _spatial_out(w, 3, 2, 1)
        ch = cout
    add(LayerKind.POOL2D, ch, ch, (x,), kernel=(h, w), stride=max(h, w))
    add(LayerKind.FULLY_CONNECTED, ch, num_classes, (len(layers) - 1,))
    graph = ModelGraph(tuple(layers), input_shape)
    validate_graph(graph)
    return graph
