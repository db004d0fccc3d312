"""Exception types shared across the package."""


class FewshotDlgError(Exception):
    """Base class for all package errors."""


class ParseError(FewshotDlgError):
    """A corpus file could not be parsed; message carries the file/record locus."""


class SchemaError(FewshotDlgError):
    """A corpus record is missing a required field."""


class UnknownDomain(FewshotDlgError):
    """A domain name is absent from the corpus or from the exclusion map."""


class EmptyDialogue(FewshotDlgError):
    """Dialogue has no system turn preceded by a user turn."""


class EmptyBatch(FewshotDlgError):
    """A loss function received an empty batch."""


class EmptyInput(FewshotDlgError):
    """A metric received an empty pair list."""


class InvalidDistribution(FewshotDlgError):
    """A probability row does not normalize or a prior is not strictly positive."""


class MissingCodes(FewshotDlgError):
    """Latent conditioning was requested but codes are absent."""


class MissingStage1(FewshotDlgError):
    """The model variant needs stage-1 checkpoints but none were given."""


class VocabMismatch(FewshotDlgError):
    """Checkpoint components were trained against different vocabularies."""


class ConfigError(FewshotDlgError):
    """Bad configuration value or unknown configuration key."""


class DataError(FewshotDlgError):
    """Corpus unusable for the requested training stage (e.g. empty after exclusion)."""


class BadCheckpoint(FewshotDlgError):
    """Checkpoint directory is missing pieces or is internally inconsistent."""


class PluginLookupMiss(FewshotDlgError):
    """External-encoder sidecar has no entry for the requested utterance."""
