"""Exception hierarchy. Each class carries the CLI exit code for its category."""


class CasmError(Exception):
    exit_code = 1


class ConfigError(CasmError):
    """Bad configuration: unknown keys, type mismatches, shape mismatches."""

    exit_code = 2


class DataError(CasmError):
    """Malformed or inconsistent interaction data."""

    exit_code = 3


class NumericalError(CasmError):
    """NaN/Inf or out-of-range values produced by the numerical core."""

    exit_code = 4


class ProtocolError(CasmError):
    """A procedure's preconditions cannot be met (e.g. too few candidate items)."""

    exit_code = 5
