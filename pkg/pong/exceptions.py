class PongError(Exception):
    pass


class ShapeError(PongError, ValueError):
    pass


class ConfigurationError(PongError, ValueError):
    pass


class RegimeError(ConfigurationError):
    pass


class ArtifactError(PongError, OSError):
    pass


class GradientError(PongError, ArithmeticError):
    pass
