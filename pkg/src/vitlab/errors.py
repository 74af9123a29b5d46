"""Exception types shared across vitlab."""


class VitlabError(Exception):
    """Base class for every error raised by this package."""


class ShapeMismatch(VitlabError, ValueError):
    pass


class NonFiniteResult(VitlabError, FloatingPointError):
    pass


class EvenKernel(VitlabError, ValueError):
    pass


class NotScalarLoss(VitlabError, ValueError):
    pass


class DetachedGraph(VitlabError, RuntimeError):
    pass


class EmptyPatch(VitlabError, ValueError):
    pass


class IndivisibleImage(VitlabError, ValueError):
    pass


class BadThreshold(VitlabError, ValueError):
    pass


class DegenerateTokenWarning(UserWarning):
    """A zero-norm token was met while computing cosine similarities."""


class ConfigError(VitlabError):
    pass


class ParseError(ConfigError):
    def __init__(self, key, reason):
        self.key = key
        self.reason = reason
        super().__init__(f"{key}: {reason}")


class UnknownKey(ConfigError):
    def __init__(self, key):
        self.key = key
        super().__init__(f"unknown key {key!r}")


class IdxFormatError(VitlabError):
    pass


class BadMagic(IdxFormatError):
    pass


class CountMismatch(IdxFormatError):
    pass


class Truncated(IdxFormatError):
    pass


class CheckpointError(VitlabError):
    pass


class BudgetExceeded(VitlabError):
    pass


class IoFailure(VitlabError, OSError):
    pass
