"""Exception hierarchy shared by every module.

Each error carries a machine-readable ``category`` string; the CLI maps
categories to exit codes so callers can branch without parsing messages.
"""


class LabError(Exception):
    category = "internal"


class ConfigError(LabError):
    category = "config"


class UsageError(LabError):
    category = "usage"


class GuardRailError(UsageError):
    category = "guardrail"


class DataError(LabError):
    category = "data"


class SchemaError(DataError):
    category = "schema"


class SplitError(DataError):
    category = "split"


class NumericError(LabError):
    category = "numeric"


class MetricError(LabError):
    category = "metric"


class MaskError(LabError):
    category = "mask"


class InvariantError(LabError):
    category = "invariant"
