"""Exception hierarchy shared by all stages.

Exit-code mapping used by the CLI: ValidationError -> 2, NumericError -> 3,
ProtocolError -> 4.
"""


class IndexcastError(Exception):
    """Base class for all package errors."""


class ValidationError(IndexcastError):
    """Bad input data, bad arguments, or violated preconditions."""


class ParseError(ValidationError):
    """Malformed file content; message names the offending line."""


class ConfigError(ValidationError):
    """Inconsistent or incomplete configuration."""


class MissingArtifactError(ValidationError):
    """A required upstream stage artifact is absent; message names the stage."""


class NumericError(IndexcastError):
    """Numerical failure (factorization, divergence, non-finite values)."""


class TrainingError(NumericError):
    """Training diverged; message carries the epoch/round index."""


class ProtocolError(IndexcastError):
    """Walk-forward protocol violation (range misuse, stale artifacts)."""


class StalenessError(ProtocolError):
    """Artifact was produced under a different configuration."""
