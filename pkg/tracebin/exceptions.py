"""Error hierarchy for tracebin.

Every error raised by the library derives from TracebinError so management
commands can translate them into CommandError in one place.
"""


class TracebinError(Exception):
    """Base class for all tracebin errors"""


# Trace sets

class TraceSetError(TracebinError):
    pass


class NoModule(TraceSetError):
    pass


class AmbiguousModule(TraceSetError):
    pass


class ConflictingInstruction(TraceSetError):
    pass


class OverlappingInstruction(TraceSetError):
    pass


class ConflictingModule(TraceSetError):
    pass


class InvalidTraceSet(TraceSetError):
    pass


class TraceFormatError(TraceSetError):
    def __init__(self, lineno, message):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


# Disassembler output ingestion

class IngestError(TracebinError):
    pass


class MalformedLine(IngestError):
    def __init__(self, lineno, line):
        super().__init__(f"line {lineno}: cannot parse {line!r}")
        self.lineno = lineno


class EmptyListing(IngestError):
    pass


class MissingBase(IngestError):
    pass


class MalformedRecord(IngestError):
    def __init__(self, lineno, message):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class DuplicateOffset(IngestError):
    pass


class UnderflowingOffset(IngestError):
    pass


# Evaluation and explanation

class EvaluationError(TracebinError):
    pass


class ModuleMismatch(EvaluationError):
    pass


class TargetMismatch(EvaluationError):
    pass


class InconsistentInputs(EvaluationError):
    pass


class ReportFormatError(EvaluationError):
    pass


# Decoding

class DecodeError(TracebinError):
    def __init__(self, offset, message):
        super().__init__(f"{message} at offset {offset:#x}")
        self.offset = offset


class InvalidOpcode(DecodeError):
    pass


class TruncatedInstruction(DecodeError):
    pass


class UndecodableInstruction(TracebinError):
    pass


# Corpus

class CorpusError(TracebinError):
    pass


class UnknownCase(CorpusError):
    pass


class ImageTooLarge(CorpusError):
    pass


class EmulationError(CorpusError):
    pass


# Patch lab

class PatchError(TracebinError):
    pass


class NoViableSite(PatchError):
    pass


class BytesMismatch(PatchError):
    pass


class TraceFailure(PatchError):
    pass


# Batch evaluation

class BatchError(TracebinError):
    pass


class EmptyBatch(BatchError):
    pass


# Tracer

class TracerError(TracebinError):
    pass


class UnsupportedPlatform(TracerError):
    pass


class LaunchFailure(TracerError):
    pass


class SelfModifyingDetected(TracerError):
    pass


class MultiThreadedTarget(TracerError):
    pass
