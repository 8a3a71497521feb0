"""Exception hierarchy shared by all agentsim modules."""


class AgentSimError(Exception):
    """Base class for every error raised by this package."""


class GraphError(AgentSimError, ValueError):
    """A model graph violates one of its structural rules.

    ``layer_id`` names the offending layer (``None`` for graph-wide problems)
    and ``rule`` is a short machine-readable tag.
    """

    rule = "graph"

    def __init__(self, message, layer_id=None):
        super().__init__(message if layer_id is None else f"layer {layer_id}: {message}")
        self.layer_id = layer_id


class CycleDetected(GraphError):
    rule = "acyclic-topological-order"


class ShapeMismatch(GraphError):
    rule = "shape-consistency"


class DanglingPredecessor(GraphError):
    rule = "predecessor-exists"


class NonPositiveOutputDim(GraphError):
    rule = "positive-output-dim"


class LayerUntileable(AgentSimError):
    """Even the minimal tile of a layer does not fit the on-chip buffer."""


class InfeasibleAssignment(AgentSimError):
    """An assignment places work on the FPGA that the FPGA cannot hold."""


class TooManyLayers(AgentSimError, ValueError):
    pass


class EmptyDataset(AgentSimError, ValueError):
    pass


class ConfigError(AgentSimError):
    """A configuration file or field is invalid.

    ``path`` is the file (if any) and ``field`` the dotted field name.
    """

    def __init__(self, message, path=None, field=None):
        where = ":".join(str(p) for p in (path, field) if p)
        super().__init__(f"{where}: {message}" if where else message)
        self.message = message
        self.path = path
        self.field = field


class MissingReport(AgentSimError, KeyError):
    def __str__(self):
        return Exception.__str__(self)
