"""Exception types shared across the runtime."""


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class CapacityError(RuntimeError):
    """KV cache would grow past max_seq_len."""


class BundleError(ValueError):
    """Model/adapter bundle on disk is malformed."""


class UnknownTaskError(KeyError):
    """Requested task id is not present in the adapter bank."""


class BudgetError(ValueError):
    """Draft-tree input rows exceed the per-step row budget."""


class CalibrationError(ValueError):
    """Activation quantization attempted without calibration stats."""


class GraphError(ValueError):
    """Malformed tensor graph (cycle, bad wiring, unknown op)."""


class MissingFeedError(GraphError):
    """Graph evaluation is missing a required input feed."""
