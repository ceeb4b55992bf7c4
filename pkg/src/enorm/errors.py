"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class NumericError(ValueError):
    """A value lies outside the numeric domain (NaN/Inf where finite is required)."""


class DisconnectedNeuronError(ValueError):
    """A hidden unit has no nonzero incoming or outgoing weight, so its
    rescaling coefficient is undefined."""


class ContainerFormatError(ValueError):
    """A serialized network container is malformed."""


class DatasetError(ValueError):
    """A dataset file is malformed or internally inconsistent."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss, parameter, or gradient."""
