"""Exception types shared across the package.

The CLI maps these onto stable exit codes: config problems exit 2,
numeric aborts exit 3, filesystem problems exit 4.
"""


class FlowstyleError(Exception):
    pass


class ConfigError(FlowstyleError):
    """Bad configuration value, unknown key, or invalid id range."""


class ShapeError(FlowstyleError):
    """Tensor extents do not line up for the requested operation."""


class ContractError(FlowstyleError):
    """An API precondition was violated by the caller."""


class InputError(FlowstyleError):
    """Model inputs violate an inference rule (e.g. aspect ratio)."""


class NumericError(FlowstyleError):
    """Non-finite values where finite ones are required."""
