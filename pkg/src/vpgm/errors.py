"""Exception hierarchy shared by all vpgm modules."""


class VpgmError(Exception):
    """Base class for every error raised by this package."""


# graph
class CyclicGraph(VpgmError):
    pass


class UnknownVariable(VpgmError, KeyError):
    pass


class StructureFormatError(VpgmError, ValueError):
    """A PGM document could not be decoded into a structure."""


# prompts
class UnparseableReply(VpgmError, ValueError):
    pass


# gateway
class ProviderError(VpgmError):
    def __init__(self, message, retryable=False, status=None):
        super().__init__(message)
        self.retryable = retryable
        self.status = status


class ExhaustedRetries(ProviderError):
    def __init__(self, message, attempts, last_error=None):
        status = getattr(last_error, "status", None)
        super().__init__(message, retryable=False, status=status)
        self.attempts = attempts
        self.last_error = last_error


# inference
class EmptySamples(VpgmError, ValueError):
    pass


class AllSamplesUnparseable(VpgmError):
    def __init__(self, question_id, dropped, errors=()):
        super().__init__(
            f"question {question_id!r}: all {dropped} samples were dropped"
        )
        self.question_id = question_id
        self.dropped = dropped
        self.errors = list(errors)


# calibration
class InvalidPrior(VpgmError, ValueError):
    pass


class NonPositiveLambda(VpgmError, ValueError):
    pass


class EmptyBatch(VpgmError, ValueError):
    pass


class NonFiniteLoss(VpgmError, FloatingPointError):
    def __init__(self, message, lam=None, loss=None, grad=None):
        super().__init__(message)
        self.lam = lam
        self.loss = loss
        self.grad = grad


# metrics
class EmptyInput(VpgmError, ValueError):
    pass


class LengthMismatch(VpgmError, ValueError):
    pass


class DegenerateInput(VpgmError, ValueError):
    pass


class TooFewRecords(VpgmError, ValueError):
    pass


class MissingLatent(VpgmError, KeyError):
    pass


# cli / runner
class ConfigError(VpgmError):
    pass


class DigestMismatch(VpgmError):
    def __init__(self, path, expected, actual):
        super().__init__(
            f"digest mismatch for {path}: recorded {expected[:12]}, found {actual[:12]}"
        )
        self.path = path
