"""Exception types shared across the pipeline.

Every error carries a short ``code`` so the CLI can print a one-line,
machine-parseable diagnostic.
"""


class FsvcError(Exception):
    code = "error"


class InputError(FsvcError, ValueError):
    """Argument violates an operation's precondition."""

    code = "input"


class ShapeError(InputError):
    code = "shape"


class FormatError(FsvcError, ValueError):
    """A file could not be parsed (bad magic, truncation, checksum, ...)."""

    code = "format"


class DegenerateError(InputError):
    """Data is well-formed but unusable (zero variance, no voiced frames)."""

    code = "degenerate"


class UnstableFilterError(FsvcError, ArithmeticError):
    code = "unstable"
