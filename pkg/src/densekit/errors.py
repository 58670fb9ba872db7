"""Exception hierarchy shared by the library and the CLI.

Every error carries the process exit code and a short machine-parseable
prefix so the CLI can report failures as a single line.
"""


class DenseKitError(Exception):
    exit_code = 1
    code = "E_INTERNAL"


class ConfigError(DenseKitError, ValueError):
    exit_code = 2
    code = "E_CONFIG"


class UsageError(ConfigError):
    code = "E_USAGE"


class UnsupportedError(ConfigError):
    code = "E_UNSUPPORTED"


class DataError(DenseKitError, ValueError):
    exit_code = 3
    code = "E_DATA"


class DegenerateBatchError(DataError):
    code = "E_DEGENERATE_BATCH"


class DivergenceError(DenseKitError, FloatingPointError):
    exit_code = 4
    code = "E_DIVERGENCE"

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class PlanBugError(DenseKitError, RuntimeError):
    exit_code = 5
    code = "E_PLAN_BUG"

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
