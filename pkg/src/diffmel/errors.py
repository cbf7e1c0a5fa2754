"""Exception types mapped to CLI exit codes (see cli.EXIT_*)."""


class ConfigError(Exception):
    """Configuration file or option is invalid."""


class DataError(Exception):
    """Input data is missing, malformed, or inconsistent."""


class NumericalError(Exception):
    """A computation produced non-finite or otherwise unusable values."""
