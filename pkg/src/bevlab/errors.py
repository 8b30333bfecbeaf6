"""Exception hierarchy. CLI exit codes hang off the base classes."""


class BevlabError(Exception):
    exit_code = 1


class ValidationError(BevlabError):
    exit_code = 2

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = list(diagnostics or [])


class ParseError(ValidationError):
    pass


class GeometryError(ValidationError):
    pass


class LengthMismatch(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class FormatError(BevlabError):
    exit_code = 3


class NumericError(BevlabError):
    exit_code = 4


class NonFiniteLoss(NumericError):
    pass


class EmptyMask(NumericError):
    pass


class EmptyCorrespondence(EmptyMask):
    pass


class DegenerateBatch(NumericError):
    pass


class EmptyRegion(NumericError):
    pass


class EmptyStaticMap(ValidationError):
    pass


class InsufficientViews(ValidationError):
    pass


class UnlabeledCloud(ValidationError):
    pass


class PoseOutsideScene(ValidationError):
    pass


class RankDeficientWarning(UserWarning):
    pass
