"""Exception types shared across the package."""


class MSGATError(Exception):
    """Base class for all package errors."""


class DimensionError(MSGATError, ValueError):
    """Tensor shapes or feature widths do not line up."""


class ContractError(MSGATError, ValueError):
    """A caller broke an operation's precondition."""


class GraphValidationError(MSGATError, ValueError):
    """Malformed road graph (bad node id, self-loop, duplicate edge)."""


class IngestionError(MSGATError):
    """A dataset file is missing or malformed."""

    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


class ConfigError(MSGATError, ValueError):
    """Invalid configuration value or unknown key."""


class GenerationError(MSGATError):
    """Synthetic data generation could not satisfy its constraints."""


class SamplingError(MSGATError):
    """Balanced sampling could not be carried out."""


class CheckpointError(MSGATError):
    """Checkpoint file is corrupt, truncated or does not match its config."""


class MissingArtifactError(MSGATError, FileNotFoundError):
    """A required input artifact (prepared data, checkpoint) does not exist."""
