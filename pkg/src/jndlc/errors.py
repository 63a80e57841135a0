"""Exception types raised across the package."""


class ShapeError(ValueError):
    """Tensor dimensions violate an operation's shape contract."""


class ModeError(ValueError):
    """A quantized latent is in the wrong mode for the requested operation."""


class FormatError(ValueError):
    """A bitstream, checkpoint or results file has a malformed header or schema."""


class DecodeError(ValueError):
    """Payload could not be decoded (truncated or corrupted)."""


class ConfigurationError(ValueError):
    """Inconsistent loss or training configuration."""


class OutOfRangeError(ValueError):
    """A query lies outside the span covered by an RD curve."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""
