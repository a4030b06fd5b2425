"""Exception types shared across the planner, perception and simulation modules."""


class TrimanualError(Exception):
    """Base class for all errors raised by this package."""


class DimensionMismatch(TrimanualError, ValueError):
    pass


class StepOutOfRange(TrimanualError, ValueError):
    pass


class NotConverged(TrimanualError):
    """Iterative IK ran out of iterations.

    ``q`` holds the last iterate so callers can use it as a warm start.
    """

    def __init__(self, iterations, residual, q=None, rot_residual=0.0):
        self.iterations = int(iterations)
        self.residual = float(residual)
        self.rot_residual = float(rot_residual)
        self.q = q
        super().__init__(
            f"IK did not converge after {self.iterations} iterations "
            f"(position residual {self.residual:.3g} m, rotation residual {self.rot_residual:.3g} rad)"
        )


class EmptyPointSet(TrimanualError, ValueError):
    pass


class UnknownChain(TrimanualError, KeyError):
    pass


class Unreachable(TrimanualError):
    pass


class NoCollisionFreeSolution(TrimanualError):
    pass


class PhaseInfeasible(TrimanualError):
    def __init__(self, phase, cause):
        self.phase = phase
        self.cause = cause
        super().__init__(f"phase {phase!r} infeasible: {cause}")


class ShapeMismatch(TrimanualError, ValueError):
    pass


class EmptyInput(TrimanualError, ValueError):
    pass


class KExceedsPoints(TrimanualError, ValueError):
    pass


class DegenerateCluster(TrimanualError):
    pass


class InvalidScenario(TrimanualError, ValueError):
    pass


class IllegalTransition(TrimanualError):
    pass
