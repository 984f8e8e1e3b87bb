"""Exception hierarchy shared by every hig module."""


class HIGError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(HIGError, ValueError):
    pass


class DegenerateVectorError(HIGError, ValueError):
    pass


class NumericError(HIGError, ArithmeticError):
    pass


class EmptyInputError(HIGError, ValueError):
    pass


class HierarchyError(HIGError, ValueError):
    pass


class AnnotationParseError(HIGError, ValueError):
    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset


class AnnotationValidationError(HIGError, ValueError):
    def __init__(self, message, frame=None, field=None):
        super().__init__(message)
        self.frame = frame
        self.field = field


class ConfigError(HIGError, ValueError):
    pass


class DivergenceError(HIGError, RuntimeError):
    def __init__(self, message, video_id=None, level=None):
        super().__init__(message)
        self.video_id = video_id
        self.level = level
