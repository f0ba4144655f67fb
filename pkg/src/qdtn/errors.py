"""Exception types shared across the toolkit.

Exit-code mapping used by the CLI: InvariantViolation -> 2,
SolverFailure -> 3, anything else -> 1.
"""


class QdtnError(Exception):
    """Base class for all toolkit errors."""


class InvariantViolation(QdtnError):
    """A structural invariant or verification check failed."""


class SolverFailure(QdtnError):
    """An iterative or direct solve did not produce a usable solution."""


class NonConvergence(SolverFailure):
    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class GradientOutOfRange(SolverFailure):
    """A quasilinear iterate left the admissible gradient ball."""


class SymbolSingularity(SolverFailure):
    """A lattice frequency fell inside the guard band of the Faddeev symbol."""


class ZeroXi(QdtnError):
    """Frequency pair construction requires a nonzero spatial frequency."""


class IllConditionedFit(SolverFailure):
    """The amplitude-expansion least-squares system is too ill conditioned."""


class ExtrapolationUnstable(SolverFailure):
    """The large-frequency ladder did not behave like a first-order tail."""


class DegenerateProbes(SolverFailure):
    """Probe gradients fail to be invertible on enough of the domain."""


class SingularOperator(SolverFailure):
    """A discrete elliptic operator is (numerically) singular."""


class VerificationMismatch(InvariantViolation):
    """The assembled operator failed its ground-truth self-test."""


class OscillationBudgetExceeded(SolverFailure):
    """Boundary determination ran out of resolvable oscillation frequencies."""


class LayerSolveNonConvergence(SolverFailure):
    """The second-kind boundary-integral solve did not converge."""
