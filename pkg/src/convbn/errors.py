"""Exception types shared across the package."""


class ConvBNError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(ConvBNError):
    """Tensor shapes are inconsistent for the requested operation."""


class DomainError(ConvBNError):
    """Scalar domain violation (division by zero, rsqrt of x <= 0, ...)."""


class FormatError(ConvBNError):
    """Malformed CBNT container. Carries the byte offset of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class SchemaError(ConvBNError):
    """Invalid graph description. Carries the offending node id when known."""

    def __init__(self, message, node_id=None):
        if node_id is not None:
            message = f"node '{node_id}': {message}"
        super().__init__(message)
        self.node_id = node_id


class ModeError(ConvBNError):
    """Operation incompatible with the block/graph mode."""


class DegenerateBatchError(ConvBNError):
    """Batch statistics requested over too few elements."""


class InputError(ConvBNError):
    """Invalid user-supplied data (labels out of range, missing names, ...)."""
