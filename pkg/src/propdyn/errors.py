"""Exception hierarchy shared by all modules."""


class PropdynError(Exception):
    """Base class for every error raised by this package."""


class InvalidMarket(PropdynError):
    """A market description violates one or more invariants.

    ``violations`` is a list of ``(kind, message)`` pairs where ``kind`` is one
    of ``"ZeroBudget"``, ``"OrphanItem"``, ``"EmptySellerGroup"`` or
    ``"ShapeMismatch"``.
    """

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(f"{k}: {m}" for k, m in self.violations))

    @property
    def kinds(self):
        return [k for k, _ in self.violations]


class InfeasibleShape(PropdynError):
    pass


class ParseError(PropdynError):
    def __init__(self, message, field=None, line=None):
        self.field = field
        self.line = line
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)


class NoConvergence(PropdynError):
    def __init__(self, message, iterations=None, residual=None, partial=None):
        self.iterations = iterations
        self.residual = residual
        self.partial = partial
        super().__init__(f"{message} (iterations={iterations}, residual={residual})")


class NonPositiveUtility(PropdynError, ValueError):
    pass


class TooLarge(PropdynError, ValueError):
    pass


class BuyerValuesNothing(PropdynError, ValueError):
    pass


class DomainError(PropdynError, ValueError):
    pass


class InfeasibleTarget(PropdynError, ValueError):
    pass


class EpsilonFloorViolated(PropdynError, ValueError):
    pass
