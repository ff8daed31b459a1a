"""Exception types shared across the package.

Everything raised on bad user input derives from ValueError so callers can
catch broadly, while numerical failures during fitting derive from
RuntimeError (they indicate a degenerate problem rather than a bad call).
"""


class DimensionError(ValueError):
    """Array arguments have incompatible or unexpected shapes."""


class ConstraintError(ValueError):
    """A parameter violates a model constraint (row norms, positivity, ...)."""


class DegenerateDataError(ValueError):
    """The data cannot support the requested operation (constant column,
    empty design, zero denominator in a closed-form update)."""


class ParseError(ValueError):
    """Malformed input file; message carries the offending line number."""


class NumericalError(RuntimeError):
    """A linear-algebra step failed (singular block, non-PD matrix,
    collinear design); message names the offending quantity."""


class SelectionError(RuntimeError):
    """Model selection had no usable candidate fits."""
