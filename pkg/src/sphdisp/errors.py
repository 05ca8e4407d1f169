"""Exception types shared across the package."""


class DegenerateInputError(ValueError):
    """An input matrix has a zero-norm row (or is all zero) where a
    directional quantity was requested."""


class ArityError(ValueError):
    """Too few rows/sentences/tokens for the requested operation."""


class VocabularyError(ValueError):
    """A token id falls outside the vocabulary."""


class SliceDegenerateError(RuntimeError):
    """Fewer than two points survived projection onto a great circle.

    Raised by the projection helper; callers skip the slice.
    """


class DispersionUndefinedError(ValueError):
    """Every sampled slice was degenerate; the Monte Carlo estimate is empty."""


class PoolTooSmallError(ValueError):
    """Fewer than two tokens are eligible for rare-token subsampling."""


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


class UnsupportedCombinationError(ConfigError):
    """A (objective, regularization target) pair the trainer does not support.

    The cosine-regression objective only regularizes the target embedding
    table; hidden-state targets are rejected up front.
    """


class CorpusParseError(ValueError):
    """Malformed corpus text; carries the 1-based line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class CheckpointError(ValueError):
    """Unreadable or malformed checkpoint file."""


class IncompatibleCheckpointsError(ValueError):
    """Checkpoints in a sweep disagree on the model architecture."""


class TrainingAbortError(RuntimeError):
    """Non-finite loss encountered; carries the path of the batch dump."""

    def __init__(self, message: str, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path


class EvaluationError(ValueError):
    """A function under gradient checking produced a non-finite value."""


class HalfPrecisionOverflowError(ValueError):
    """A weight exceeds the largest finite binary16 value; carries the tensor name."""

    def __init__(self, tensor_name: str, value: float):
        super().__init__(
            f"tensor {tensor_name!r} has |w|={value:g} > 65504 (binary16 max)"
        )
        self.tensor_name = tensor_name
