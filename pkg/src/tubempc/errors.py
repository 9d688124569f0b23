"""Exception types shared across the toolkit."""


class TubeMPCError(Exception):
    """Base class for toolkit errors."""


class CCMDomainError(TubeMPCError):
    """Metric evaluation failed (W(x) not positive definite at the query point)."""


class GeodesicError(TubeMPCError):
    """Geodesic subproblem did not converge; carries the best iterate found."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class IntegrationError(TubeMPCError):
    """Tube or truth integration produced NaN/Inf."""


class EstimationInconsistent(TubeMPCError):
    """Parameter set intersection is empty: the model class is falsified."""


class UnboundedPolytope(TubeMPCError):
    """Vertex enumeration requested on an unbounded polyhedron."""


class UnsupportedDimension(TubeMPCError):
    """Operation only implemented for small dimensions."""


class RigidTubeInfeasible(TubeMPCError):
    """No finite rigid tube scaling exists (contraction rate exhausted)."""


class ReferencePointError(TubeMPCError):
    """Steady-state reference program infeasible for the given parameter."""


class OCPInfeasible(TubeMPCError):
    """The receding-horizon problem has no feasible point."""
