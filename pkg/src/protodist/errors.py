"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: configuration/usage problems exit 1,
data problems exit 2, state problems exit 3.
"""


class ProtodistError(Exception):
    """Base class for all package errors."""


class ConfigError(ProtodistError):
    """Invalid configuration value or key; message names the offending key."""


class FormatError(ProtodistError):
    """A file does not conform to its declared binary/text format."""


class ConsistencyError(ProtodistError):
    """Two inputs that must agree (e.g. image and label counts) do not."""


class IngestionError(ProtodistError):
    """A manifest entry could not be loaded; message names the entry."""


class ShapeError(ProtodistError):
    """An array violated a shape contract."""


class NormalizerError(ProtodistError):
    """Score normalizer could not be fitted (degenerate or too few scores)."""


class EvaluationError(ProtodistError):
    """Evaluation was asked to run on unusable inputs (e.g. empty score set)."""


class StateError(ProtodistError):
    """Operation requires state that is not present (e.g. unfitted normalizers)."""


class MigrationError(StateError):
    """Checkpoint was written by an incompatible format version."""


class TrainingDivergedError(ProtodistError):
    """A non-finite loss was encountered; message carries the loss breakdown."""
