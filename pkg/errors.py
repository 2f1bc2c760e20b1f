"""
Exception types shared by the pipeline.
Each carries the process exit code the command line reports for it.
"""


class BshError(Exception):
    """Base class for failures the command line maps to an exit code."""
    exit_code = 1


class ConfigError(BshError):
    """Unknown key, bad value or schema violation in a run configuration."""
    exit_code = 2


class DataError(BshError):
    """Missing, truncated or malformed dataset file."""
    exit_code = 3


class NumericError(BshError):
    """NaN input or non-finite loss."""
    exit_code = 4
