"""Exception hierarchy shared by all modules."""


class CodazziLabError(Exception):
    """Base class for every error raised by the package."""


class ExprSyntaxError(CodazziLabError):
    def __init__(self, message, position, text=""):
        self.position = position
        self.text = text
        pointer = ""
        if text:
            pointer = "\n  " + text + "\n  " + " " * position + "^"
        super().__init__(f"{message} at position {position}{pointer}")


class UnknownVariable(CodazziLabError):
    def __init__(self, name, allowed):
        self.name = name
        self.allowed = tuple(allowed)
        super().__init__(f"unknown identifier {name!r}; chart declares {self.allowed}")


class DomainError(CodazziLabError):
    """Evaluation left the natural domain of a subexpression."""

    def __init__(self, point, subexpression, reason=""):
        self.point = point
        self.subexpression = subexpression
        msg = f"domain error in {subexpression!r} at {point}"
        if reason:
            msg += f" ({reason})"
        super().__init__(msg)


class DegenerateMetric(CodazziLabError):
    def __init__(self, point):
        self.point = point
        super().__init__(f"metric is not positive definite at {point}")


class EigenvalueCollision(CodazziLabError):
    def __init__(self, point, gap):
        self.point = point
        self.gap = gap
        super().__init__(f"|lambda - mu| = {gap:.3e} below collision tolerance at {point}")


class SingularJacobian(CodazziLabError):
    def __init__(self, point):
        self.point = point
        super().__init__(f"coordinate map has singular Jacobian at {point}")


class LeftDomain(CodazziLabError):
    def __init__(self, step, point):
        self.step = step
        self.point = point
        super().__init__(f"trajectory left the chart domain at step {step}: {point}")


class ClusterAmbiguity(CodazziLabError):
    def __init__(self, point):
        self.point = point
        super().__init__(f"eigenvalue clusters merge at {point}")


class NotWarpedEvidence(CodazziLabError):
    def __init__(self, failed):
        self.failed = tuple(failed)
        super().__init__(f"characterizing conditions fail: {', '.join(self.failed)}")


class MisalignedFrame(CodazziLabError):
    def __init__(self, deviation):
        self.deviation = deviation
        super().__init__(
            f"simple eigenvector is not a coordinate direction (deviation {deviation:.3e})"
        )


class GridTooCoarse(CodazziLabError):
    pass


class ConvergenceFailure(CodazziLabError):
    pass


class BadParams(CodazziLabError):
    pass


class ConfigError(CodazziLabError):
    def __init__(self, message, field=None, line=None):
        self.field = field
        self.line = line
        where = []
        if field:
            where.append(f"field {field!r}")
        if line is not None:
            where.append(f"line {line}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(message + suffix)
