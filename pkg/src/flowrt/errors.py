"""Exception hierarchy for the runtime, codec, and algorithm layers."""

from __future__ import annotations


class FlowrtError(Exception):
    """Base class for every error raised by this package."""


# -- runtime lifecycle / API ------------------------------------------------

class SessionStopped(FlowrtError):
    """An API call was made outside the start..stop window of a session."""


class DuplicateRegistration(FlowrtError):
    """A function_id was registered twice within one session."""


class ArityMismatch(FlowrtError):
    """A task invocation passed a number of arguments different from the
    registered arity."""


class UnknownHandle(FlowrtError):
    """A handle was passed to a session or graph that did not mint it."""


class ScratchUnwritable(FlowrtError):
    """The configured scratch directory does not exist or is not writable."""


class WorkerSpawnFailure(FlowrtError):
    """Worker pool could not be brought up (bad counts or a worker process
    failed to report in). Carries the virtual node id when known."""

    def __init__(self, message: str, node_id: int | None = None):
        super().__init__(message)
        self.node_id = node_id


class IllegalTransition(FlowrtError):
    """A task-state transition outside the allowed state machine."""


class TaskFailed(FlowrtError):
    """Raised by wait_on when the producing task failed after all retries.

    ``info`` is the failure record of the task being waited on; the chain of
    upstream causes is reachable through ``info.cause`` and flattened by
    ``chain()``.
    """

    def __init__(self, info):
        super().__init__(str(info))
        self.info = info
        self.task_id = info.task_id

    def chain(self):
        return self.info.chain()


# -- serialization codec ----------------------------------------------------

class CodecError(FlowrtError):
    """Base class for payload encode/decode errors."""


class UnsupportedType(CodecError):
    """encode() was given a value outside the supported type tags."""


class BadMagic(CodecError):
    """Payload does not start with the expected magic bytes."""


class ChecksumMismatch(CodecError):
    """Trailing checksum does not match the payload contents."""


class UnknownTypeTag(CodecError):
    """Payload declares a type tag this codec does not know."""


class TruncatedPayload(CodecError):
    """Payload is shorter than its header and trailer require."""


# -- algorithms -------------------------------------------------------------

class DimensionMismatch(FlowrtError):
    """Operands disagree on feature dimensionality or row counts."""


class ShapeMismatch(FlowrtError):
    """Partial results being merged have incompatible shapes."""


class SentinelPresent(FlowrtError):
    """A padded +inf neighbor survived until classification, meaning k
    exceeds the total number of training rows."""


class SingularSystem(FlowrtError):
    """The normal-equations matrix is not positive definite."""
