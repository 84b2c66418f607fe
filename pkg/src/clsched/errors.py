"""Exception types shared across the package."""


class NumericalError(ArithmeticError):
    """A matrix lost positive definiteness or could not be inverted."""


class SingularGeometryError(NumericalError):
    """Two agents are (numerically) co-located, so the range Jacobian is undefined."""


class SchemaError(ValueError):
    """A persisted model file does not match the expected schema."""


class DataError(ValueError):
    """Malformed or inconsistent input data (log files, sample tables)."""


class ConfigError(ValueError):
    """Invalid experiment configuration."""
