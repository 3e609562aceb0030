"""Exception types shared across the package.

The CLI maps these onto exit codes: validation problems exit 2, numerical
failures exit 3 and optimizer divergence exits 4.
"""


class MeshValidationError(ValueError):
    """Malformed input: parse failure, bad index, negative weight, ..."""


class DegenerateFaceError(MeshValidationError):
    """A face with (numerically) zero area where a normal is required."""


class OpenMeshError(MeshValidationError):
    """The operation requires a closed, consistently oriented mesh."""

    def __init__(self, message, boundary_edges=None):
        super().__init__(message)
        self.boundary_edges = [] if boundary_edges is None else boundary_edges


class SingularSystemError(RuntimeError):
    """The constrained biharmonic system could not be factorized."""


class DivergenceError(RuntimeError):
    """The fitting loss blew up and stayed up."""
