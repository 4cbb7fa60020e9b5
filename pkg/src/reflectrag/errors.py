"""Exception types shared across modules."""


class ReflectRagError(Exception):
    pass


class MalformedOutput(ReflectRagError, ValueError):
    pass


class EmptyGroup(ReflectRagError, ValueError):
    pass


class EmptySequence(ReflectRagError, ValueError):
    pass


class NonPositiveProbability(ReflectRagError, ValueError):
    pass


class EmptyList(ReflectRagError, ValueError):
    pass


class EmptyBatch(ReflectRagError, ValueError):
    pass


class ShapeMismatch(ReflectRagError, ValueError):
    pass


class BadCheckpoint(ReflectRagError):
    pass


class InsufficientContexts(ReflectRagError):
    pass


class NoCandidates(ReflectRagError):
    pass


class BackendError(ReflectRagError):
    def __init__(self, message, status=None, body=None):
        super().__init__(message)
        self.status = status
        self.body = body


class MissingLogprobs(BackendError):
    pass


class BadScenario(ReflectRagError, ValueError):
    pass


class UnknownQueryId(ReflectRagError, KeyError):
    pass


class IdMismatch(ReflectRagError):
    def __init__(self, message, ids=()):
        super().__init__(message)
        self.ids = list(ids)


class ConfigError(ReflectRagError, ValueError):
    """Invalid run configuration; ``field`` names the offending option."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field
