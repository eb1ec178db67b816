class InvalidArgument(ValueError):
    """Bad shapes, out-of-range parameters, malformed inputs."""


class NumericFailure(RuntimeError):
    """A factorisation or solve could not be completed to tolerance."""
