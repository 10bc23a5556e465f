class CdunError(Exception):
    """Base class for errors raised by this package."""


class ContractError(CdunError, ValueError):
    """Inputs violate an operation's shape or range contract."""


class ConfigError(CdunError):
    """Invalid or incomplete configuration."""


class IngestError(CdunError):
    """A dataset directory on disk is malformed."""


class NumericalGuardError(CdunError):
    """A numerical guard tripped and the caller asked for strict mode."""
