"""Exception hierarchy shared across the pipeline."""


class KforgeError(Exception):
    """Base class for all pipeline errors."""


class EmptyDocumentError(KforgeError):
    """Ingested file has no content (or no non-empty line for a title)."""


class EncodingError(KforgeError):
    """Input bytes are not valid UTF-8."""


class TemplateError(KforgeError):
    """Prompt template problem: unknown template or unbound placeholder."""


class TransportError(KforgeError):
    """Chat endpoint unreachable after the configured number of retries."""


class ProtocolError(KforgeError):
    """Chat endpoint answered with a non-success status or malformed body."""


class LabelMissingError(KforgeError):
    """Expected `Label: value` line absent from a completion."""


class GenerationEmptyError(KforgeError):
    """Every generation call for a chunk yielded zero usable QA pairs."""


class UnknownChunkError(KforgeError):
    """QA pair references a chunk id that is not in the corpus."""


class EmptyCorpusError(KforgeError):
    """Index build invoked with no documents."""


class IndexNotBuiltError(KforgeError):
    """Search or context construction attempted before an index exists."""


class MissingChapterMapError(KforgeError):
    """per_chapter bucket policy selected without a chapter->bucket map entry."""


class EmptyTrainSplitError(KforgeError):
    """Dataset build invoked with no train-split QA pairs."""


class TemplateArityError(KforgeError):
    """Context length does not match the prompt template's passage slots."""


class JudgeParseError(KforgeError):
    """Judge completion lacks a <score> span or the score is not 0/1."""


class MissingScoreError(KforgeError):
    """Benchmark score file lacks one of the required raw scores."""


class StageDependencyError(KforgeError):
    """CLI stage invoked before the stage that produces its input."""
