"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes, so each class carries its own.
"""


class SplatgenError(Exception):
    exit_code = 1


class ParameterError(SplatgenError, ValueError):
    """Invalid argument value or shape."""

    exit_code = 2


class ConfigError(SplatgenError, ValueError):
    """Run configuration failed validation.

    ``problems`` lists every offending key with a reason.
    """

    exit_code = 2

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class PlyParseError(SplatgenError, ValueError):
    exit_code = 3


class ModelFormatError(SplatgenError, ValueError):
    exit_code = 3


class DegenerateCollapseError(SplatgenError, RuntimeError):
    """Pruning or sampling left nothing to work with."""

    exit_code = 4


class NumericalError(SplatgenError, FloatingPointError):
    """NaN/Inf found where finite data is required."""

    exit_code = 4


class ProviderError(SplatgenError):
    exit_code = 5
    retriable = False


class TransportError(ProviderError):
    """Network-level failure talking to a score provider; safe to retry."""

    retriable = True


class ProtocolError(ProviderError):
    """Score provider answered with a malformed or mismatched frame."""
