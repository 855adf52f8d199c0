"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: configuration problems exit
with 2, data problems with 3, numerical divergence with 4.
"""


class ConfigError(ValueError):
    """Invalid configuration: bad preset name, out-of-range field, unknown key."""


class DataError(Exception):
    """Problems with dataset packs or external sources."""


class PackFormatError(DataError):
    """Manifest missing, unreadable, or not a recognized pack format."""


class PackMissingFileError(DataError):
    """A file named by the manifest does not exist."""


class CheckpointFormatError(DataError):
    """Checkpoint file is unreadable: bad magic, version, or truncation."""


class PackSizeError(DataError):
    """A patch store's byte size disagrees with the manifest."""


class ShapeError(ValueError):
    """Tensor arguments whose shapes violate an operation's contract."""


class MiningError(ValueError):
    """Hard negative mining is impossible (batch too small)."""


class NumericDomainError(ValueError):
    """Non-finite values fed to an operation that requires finite input."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss component."""

    def __init__(self, component: str, step: int | None = None, breakdown=None):
        self.component = component
        self.step = step
        self.breakdown = breakdown
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite loss component '{component}'{where}")


EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4
