"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class DmrError(Exception):
    exit_code = 1


class ConfigError(DmrError):
    """Malformed scenario or inadmissible parameters.

    ``violations`` lists every problem found, not just the first.
    """

    exit_code = 1

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class AdmissibilityError(ConfigError):
    """A terminal or obstacle inequality required before solving fails."""


class TerminalConditionError(AdmissibilityError):
    """Terminal anchor outside the band: l(T, a) <= 0 <= r(T, a) fails."""


class ConvergenceError(DmrError):
    """Iteration stopped without meeting its tolerance; ``trace`` holds the residual history."""

    exit_code = 2

    def __init__(self, message, trace=None):
        self.trace = list(trace or [])
        super().__init__(message)


class InvariantViolation(DmrError):
    """A checked invariant failed. ``witness`` holds the offending values."""

    exit_code = 3

    def __init__(self, message, witness=None):
        self.witness = witness
        super().__init__(message)


class InfeasibleBoundaries(InvariantViolation):
    pass


class NumericError(InvariantViolation):
    pass


class RegressionError(NumericError):
    pass


class OracleUnavailable(DmrError):
    exit_code = 1
