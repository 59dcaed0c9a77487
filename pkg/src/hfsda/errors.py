"""Exception hierarchy shared across the package."""


class HfsdaError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(HfsdaError, ValueError):
    pass


class DimensionError(HfsdaError, ValueError):
    pass


class ConfigError(HfsdaError, ValueError):
    """Bad configuration: unknown key, invalid value or unknown preset."""


class FormatError(HfsdaError):
    """Audio file in an unsupported layout (channels, sample rate, encoding)."""


class CorpusError(HfsdaError):
    pass


class CheckpointError(HfsdaError):
    pass


class IncompatibleCheckpointError(CheckpointError):
    """Checkpoint was written for a different model configuration or format."""


class CorruptCheckpointError(CheckpointError):
    """Checkpoint bytes are truncated or fail their digest."""


class EncoderUnavailableError(HfsdaError):
    pass


class OracleError(HfsdaError):
    pass


class TrainingAborted(HfsdaError):
    def __init__(self, message, batch_id=None, dump_path=None):
        super().__init__(message)
        self.batch_id = batch_id
        self.dump_path = dump_path
