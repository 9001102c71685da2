"""
Exceptions raised by the lagflow solver library
"""


class LagflowError(Exception):
    """Base class for all solver errors"""


class NonFiniteEvaluation(LagflowError, ArithmeticError):
    """A cost, constraint or derivative evaluation returned NaN or Inf"""


class InvalidBound(LagflowError, ValueError):
    """A variable bound is malformed (lower >= upper or index out of range)"""


class InvalidBounds(LagflowError, ValueError):
    """Curvature/constraint bounds passed to gain tuning are inconsistent"""


class InvalidInput(LagflowError, ValueError):
    """Problem data cannot be generated from the requested inputs"""


class SingularGram(LagflowError, ArithmeticError):
    """J_h J_h^T could not be factorized, even with regularization"""


class NotHurwitz(LagflowError, ValueError):
    """A matrix expected to be Hurwitz has an eigenvalue with Re >= 0"""


class NotStationary(LagflowError, ValueError):
    """The supplied point is not a stationary point of the Lagrangian"""


class RankDeficient(LagflowError, ArithmeticError):
    """The constraint Jacobian has rank lower than the number of constraints"""


class SingularKKT(LagflowError, ArithmeticError):
    """The KKT matrix of a quadratic problem is singular"""
