"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Invalid user input (degrees, breakpoints, parameters, configs)."""


class DomainError(ValueError):
    """A point was requested outside the parametric domain [0, 1]."""


class GeometryError(ValueError):
    """A geometry file or mapping is malformed or singular."""


class NotAnalysisSuitable(GeometryError):
    """No linear gluing data exist for the given two-patch geometry."""

    def __init__(self, message, residual):
        super().__init__(f"{message} (max residual {residual:.3e})")
        self.residual = residual


class ConstructionError(RuntimeError):
    """A local collocation system for the interface basis was singular."""


class SolverError(RuntimeError):
    """The linear solver failed or produced an inaccurate solution."""
