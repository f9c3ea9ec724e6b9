"""Exception taxonomy for the package.

Every error raised on purpose derives from :class:`MedtrError` so callers
(and the CLI) can catch one type and map it to a nonzero exit.
"""


class MedtrError(Exception):
    """Base class for all deliberate failures."""


class DimensionError(MedtrError):
    """Operand shapes are incompatible for the requested op."""


class ConfigError(MedtrError):
    """A configuration value or file is invalid."""


class ContractError(MedtrError):
    """An API precondition was violated (e.g. backward on a non-scalar)."""


class InputError(MedtrError):
    """Runtime data is out of range (bad token id, malformed manifest)."""


class TransplantError(MedtrError):
    """Parameter transfer failed; message names the offending parameter."""


class InfeasibleError(MedtrError):
    """The requested alignment/label combination admits no valid path."""


class NumericError(MedtrError):
    """A non-finite value appeared where finiteness is required."""


class DivergenceError(MedtrError):
    """Training loss became non-finite and could not recover."""
