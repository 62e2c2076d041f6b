"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class ParseError(ValueError):
    """Malformed input file. Carries the offending line number when known."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class EmptyDatasetError(ValueError):
    """No records left to work with."""


class ShapeError(ValueError):
    """Incompatible array shapes or dtypes."""


class NumericDomainError(ValueError):
    """Operand outside an op's mathematical domain (log of non-positive, division by zero)."""


class ContractError(RuntimeError):
    """A caller violated an operation's contract."""


class TaxonomyConflictError(ValueError):
    """The same class name observed under two different parents."""


class CompatibilityError(ValueError):
    """Checkpoint does not match the requested model or tokenizer."""


class DegenerateVarianceError(ValueError):
    """Statistic undefined because the sample variance is zero."""
