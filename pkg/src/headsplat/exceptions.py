"""Exception hierarchy.

``DataError`` subclasses map to CLI exit code 2, ``NumericalAbort`` to exit code 3.
"""


class DataError(Exception):
    """Input data is malformed, incomplete or inconsistent."""


class GdhmFormatError(DataError):
    """A GDHM container could not be parsed (bad magic, truncation, bad dtype)."""


class ShapeMismatchError(DataError, ValueError):
    """Array shapes disagree with each other or with the declared model sizes."""


class NonManifoldError(DataError):
    """An edge is shared by more than two faces."""


class ModelValidationError(DataError, ValueError):
    """A model array violates a value invariant (e.g. skinning weights)."""


class DegenerateTriangleError(ValueError):
    """Triangle area is below the degeneracy threshold."""


class UvOverlapError(DataError):
    """UV triangles overlap; ``pairs`` lists offending (face, face) tuples."""

    def __init__(self, pairs):
        self.pairs = sorted(pairs)
        shown = ", ".join(f"({a}, {b})" for a, b in self.pairs[:10])
        more = "" if len(self.pairs) <= 10 else f" and {len(self.pairs) - 10} more"
        super().__init__(f"overlapping UV triangles: {shown}{more}")


class BundleError(DataError):
    """A dataset bundle is missing files or fails hash verification."""


class NumericalAbort(RuntimeError):
    """Optimization produced a non-finite value."""

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path
