"""Exception types shared across the package."""


class PromptMILError(Exception):
    """Base class for all package-specific errors."""


class ContractViolationError(PromptMILError, ValueError):
    """An argument broke a documented precondition (shape, range, dtype)."""


class DegenerateInputError(PromptMILError, ValueError):
    """Input is structurally valid but numerically unusable (zero norm, empty bag, single-class labels, non-finite objective)."""


class ConfigurationError(PromptMILError, ValueError):
    """A configuration object or file is invalid."""


class VocabularyError(PromptMILError, KeyError):
    """A token is unknown to the vocabulary, or the vocabulary is frozen."""

    def __str__(self):  # KeyError quotes its message; keep it readable
        return self.args[0] if self.args else ""


class EpisodeError(PromptMILError, RuntimeError):
    """The support set handed to an episode has the wrong composition."""


class DivergenceError(PromptMILError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, message: str = ""):
        self.epoch = epoch
        super().__init__(message or f"non-finite loss at epoch {epoch}")


class ArchiveFormatError(PromptMILError, ValueError):
    """An embedding archive or its manifest is malformed."""
