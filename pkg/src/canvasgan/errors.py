"""Exception hierarchy shared by every canvasgan module.

Errors that describe bad shapes or values also derive from ``ValueError``
(index problems from ``IndexError``) so callers catching builtins keep working.
"""

from __future__ import annotations


class CanvasGANError(Exception):
    """Base class for all canvasgan failures."""


class ConfigError(CanvasGANError, ValueError):
    """Config file or override could not be parsed or validated."""


class ConfigMismatch(CanvasGANError, ValueError):
    """A checkpoint's config echo disagrees with the requested config."""


class CorruptFile(CanvasGANError):
    """A checkpoint or artifact file is unreadable."""


class EmptyCaption(CanvasGANError, ValueError):
    """No tokens survived tokenization."""


class EmptySequence(CanvasGANError, ValueError):
    """Attention was asked to pool over zero tokens."""


class IndexOutOfRange(CanvasGANError, IndexError):
    """A token index falls outside the vocabulary."""


class ShapeMismatch(CanvasGANError, ValueError):
    """A tensor does not have the shape the configuration requires."""


class BatchTooSmall(CanvasGANError, ValueError):
    """An operation needing contrastive pairs got fewer than two rows."""


class NonFiniteLoss(CanvasGANError, FloatingPointError):
    """A training loss became NaN or infinite."""

    def __init__(self, message: str, step: int | None = None) -> None:
        super().__init__(message)
        self.step = step


class MissingImage(CanvasGANError, FileNotFoundError):
    """A manifest references an image file that does not exist."""


class MalformedLine(CanvasGANError, ValueError):
    """A manifest line could not be parsed."""

    def __init__(self, line: int, detail: str = "") -> None:
        msg = f"malformed manifest line {line}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
        self.line = line


class InvalidDistribution(CanvasGANError, ValueError):
    """A posterior row is negative, non-finite or does not sum to one."""


class MalformedTrace(CanvasGANError, ValueError):
    """A paint-trace JSON file does not have the expected structure."""
