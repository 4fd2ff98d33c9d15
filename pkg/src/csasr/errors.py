"""Exception hierarchy shared by every stage of the toolkit."""


class CsasrError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(CsasrError, ValueError):
    pass


class ConfigError(CsasrError, ValueError):
    pass


class ContractError(CsasrError, ValueError):
    """A caller violated an operation's precondition."""


class DataError(CsasrError, ValueError):
    pass


class FormatError(CsasrError, ValueError):
    """A file on disk does not match its declared format.

    ``offset`` is a byte offset for binary files and a 1-based line number
    for text files (see ``unit``).
    """

    def __init__(self, message, offset=None, unit="byte"):
        if offset is not None:
            message = f"{message} (at {unit} {offset})"
        super().__init__(message)
        self.offset = offset
        self.unit = unit


class EmptyInputError(CsasrError, ValueError):
    pass


class DegenerateStatsError(CsasrError, ValueError):
    def __init__(self, dim):
        super().__init__(f"zero variance in feature dimension {dim}")
        self.dim = dim


class UnalignableError(CsasrError, ValueError):
    """CTC target cannot be aligned within the available frames."""

    def __init__(self, index, frames, required):
        super().__init__(
            f"utterance {index}: target needs {required} frames, only {frames} available"
        )
        self.index = index
        self.frames = frames
        self.required = required


class TrainingDiverged(CsasrError, RuntimeError):
    def __init__(self, step, batch_id):
        super().__init__(f"non-finite loss at step {step} (batch {batch_id})")
        self.step = step
        self.batch_id = batch_id


class StageError(CsasrError, RuntimeError):
    """Pipeline stage prerequisites or config state are not satisfied."""


class InputTooShortError(CsasrError, ValueError):
    pass
