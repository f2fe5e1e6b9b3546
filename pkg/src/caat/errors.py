"""Exception types shared across the toolkit.

The CLI maps these onto process exit codes: validation problems exit 1,
resource-guard refusals exit 2, runtime numeric failures exit 3.
"""


class ConfigError(ValueError):
    """Invalid configuration value; message names the offending field."""


class SizeGuardError(RuntimeError):
    """A desk-scale resource guard refused the requested computation."""


class NumericError(ArithmeticError):
    """A non-finite value surfaced mid-computation; carries a diagnostic."""


class CheckpointError(ValueError):
    """Checkpoint file is malformed (bad magic, version, or payload size)."""


class IdxError(ValueError):
    """Base class for IDX file format violations."""


class IdxBadMagic(IdxError):
    """IDX file carries the wrong magic number."""


class IdxTruncated(IdxError):
    """IDX payload shorter (or longer) than its header declares."""


class IdxCountMismatch(IdxError):
    """Image file and label file disagree on the sample count."""
