"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class PdacSubtypeError(Exception):
    exit_code = 1


class InputValidationError(PdacSubtypeError, ValueError):
    """Malformed or out-of-contract input (shapes, ids, ranges, modes)."""

    exit_code = 2


class MissingGenesError(InputValidationError):
    def __init__(self, genes, context=""):
        self.genes = list(genes)
        prefix = f"{context}: " if context else ""
        super().__init__(f"{prefix}missing genes {self.genes}")


class DegenerateStatisticsError(PdacSubtypeError, ArithmeticError):
    """A statistic is undefined for the given data (zero variance, single class, ...)."""

    exit_code = 3


class DataIOError(PdacSubtypeError, OSError):
    exit_code = 4
