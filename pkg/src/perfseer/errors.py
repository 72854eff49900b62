"""Exception hierarchy shared by every perfseer module.

Each error carries an ``exit_code`` so the CLI can map failures to its
stable exit codes without a lookup table.
"""


class PerfSeerError(Exception):
    exit_code = 2


class GraphError(PerfSeerError):
    """Malformed or unsupported computational graph."""


class UnsupportedOp(GraphError):
    def __init__(self, kind):
        super().__init__(f"unsupported operator kind: {kind!r}")
        self.kind = kind


class ShapeMismatch(GraphError):
    pass


class CyclicGraph(GraphError):
    pass


class EmptyGraph(GraphError):
    pass


class NotFitted(PerfSeerError):
    pass


class WidthMismatch(PerfSeerError):
    pass


class LengthMismatch(PerfSeerError):
    pass


class TooSmall(PerfSeerError):
    pass


class ZeroTarget(PerfSeerError):
    pass


class NumericError(PerfSeerError):
    exit_code = 3


class NonFiniteError(NumericError):
    """A NaN or Inf showed up in a numeric kernel."""


class StaleTape(NumericError):
    """A gradient tape was replayed after its parameters changed."""


class DivergedLoss(NumericError):
    def __init__(self, epoch, last_good=None):
        super().__init__(f"loss diverged (non-finite) at epoch {epoch}")
        self.epoch = epoch
        self.last_good = last_good
