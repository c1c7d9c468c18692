"""Exception types shared across the package."""


class HierLogLossError(Exception):
    """Base class for all package errors."""


# probabilities
class SupportMismatch(HierLogLossError, ValueError):
    pass


class LengthMismatch(HierLogLossError, ValueError):
    pass


class NotNormalized(HierLogLossError, ValueError):
    pass


class LabelOutOfRange(HierLogLossError, ValueError):
    pass


# trees
class InvalidK(HierLogLossError, ValueError):
    pass


class InvalidPermutation(HierLogLossError, ValueError):
    pass


class ParseError(HierLogLossError, ValueError):
    pass


class DuplicateClass(ParseError):
    pass


class MissingClass(HierLogLossError, ValueError):
    pass


# composition / learning
class AlignmentMismatch(HierLogLossError, ValueError):
    pass


class MissingClassParam(HierLogLossError, KeyError):
    pass


class EmptyNodeSet(HierLogLossError, ValueError):
    pass


# theorem checks
class ViolationFound(HierLogLossError, AssertionError):
    def __init__(self, message, payload=None):
        super().__init__(message)
        self.payload = payload


class FormulaMismatch(HierLogLossError, AssertionError):
    pass


class MissingPosteriors(HierLogLossError, ValueError):
    pass


# data files
class NonPDCovariance(HierLogLossError, ValueError):
    pass


class BadMagic(HierLogLossError, ValueError):
    pass


class TruncatedFile(HierLogLossError, ValueError):
    pass


class CountMismatch(HierLogLossError, ValueError):
    pass


class HeaderMismatch(HierLogLossError, ValueError):
    pass


class ShapeMismatch(HierLogLossError, ValueError):
    pass
