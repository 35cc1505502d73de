"""Exception types raised across the package."""


class AvatarError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(AvatarError, ValueError):
    pass


class AllFacesDegenerate(AvatarError, ValueError):
    pass


class NonFiniteLatent(AvatarError, ValueError):
    pass


class BehindCamera(AvatarError):
    pass


class ResolutionMismatch(AvatarError, ValueError):
    pass


class SchemaMismatch(AvatarError, ValueError):
    pass


class DegenerateBox(AvatarError, ValueError):
    pass


class NoExtractor(AvatarError, RuntimeError):
    pass


class MissingLandmarks(AvatarError, ValueError):
    pass


class GeneratorNotInitialized(AvatarError, RuntimeError):
    pass


class MissingTracking(AvatarError, FileNotFoundError):
    pass


class FrameCountMismatch(AvatarError, ValueError):
    pass


class BadBox(AvatarError, ValueError):
    pass
