"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Bad shapes, inconsistent specs, or invalid configuration."""


class FormatError(ValueError):
    """A serialized file is corrupt, truncated, or of the wrong kind."""


class DivergenceError(RuntimeError):
    """An optimization run produced non-finite or runaway energies."""
