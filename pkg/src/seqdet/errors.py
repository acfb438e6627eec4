"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand dimensions violate an operation's contract."""


class ConfigError(ValueError):
    """Invalid or unknown configuration value."""


class ParseError(ValueError):
    """Malformed input file; message carries the offending location."""
