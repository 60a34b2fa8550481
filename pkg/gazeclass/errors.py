"""Exception hierarchy shared by every gazeclass module."""


class GazeclassError(Exception):
    """Base class for all domain errors raised by gazeclass."""

    def to_report(self):
        return {"success": False, "error": type(self).__name__, "message": str(self)}


class ConfigError(GazeclassError, ValueError):
    pass


class ShapeMismatchError(GazeclassError, ValueError):
    pass


class NonFiniteError(GazeclassError, ArithmeticError):
    pass


class TraceMismatchError(GazeclassError, ValueError):
    pass


class LabelError(GazeclassError, ValueError):
    pass


class GazeFormatError(GazeclassError, ValueError):
    """Raised for unreadable gaze CSV files. ``lines`` holds 1-based line numbers."""

    def __init__(self, message, lines=()):
        self.lines = list(lines)
        if self.lines:
            shown = ", ".join(str(n) for n in self.lines[:20])
            message = f"{message} (line {shown})"
        super().__init__(message)


class ImageFormatError(GazeclassError, ValueError):
    pass


class WeightsFormatError(GazeclassError, ValueError):
    pass


class CacheConflictError(GazeclassError):
    pass


class PlanError(GazeclassError, ValueError):
    pass


class EvaluationError(GazeclassError, ValueError):
    pass


class AttributionError(GazeclassError, ValueError):
    pass


class EmbeddingError(GazeclassError, ValueError):
    pass


class ArtifactMissingError(GazeclassError, FileNotFoundError):
    pass


class DatasetError(GazeclassError, ValueError):
    pass
