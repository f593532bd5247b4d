"""Exception types shared across the package."""


class CtcalError(Exception):
    """Base class for all package-specific errors."""


class UnknownWord(CtcalError):
    def __init__(self, word):
        self.word = word
        super().__init__(f"word not in lexicon: {word!r}")


class NoNounTokens(CtcalError):
    pass


class PromptTooLong(CtcalError):
    pass


class ShapeMismatch(CtcalError):
    pass


class ChecksumMismatch(CtcalError):
    pass


class VersionMismatch(CtcalError):
    pass


class EmptyRecords(CtcalError):
    pass


class MixedProvenance(CtcalError):
    pass


class NonFiniteLoss(CtcalError):
    pass


class InvalidStrategy(CtcalError):
    pass


class TargetNotFound(CtcalError):
    pass


class UntrainedModel(CtcalError):
    pass


class EmptyDataset(CtcalError):
    pass


class InvalidTimesteps(CtcalError):
    pass


class TooFewImages(CtcalError):
    pass


class ConfigError(CtcalError):
    pass
