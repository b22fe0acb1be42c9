"""Exception types shared across the package."""


class CodecRLError(Exception):
    """Base class for all package errors."""


class InvalidInput(CodecRLError, ValueError):
    pass


class ConfigError(CodecRLError, ValueError):
    pass


class WorldTooLarge(CodecRLError, ValueError):
    pass


class UnknownSymbol(CodecRLError, KeyError):
    pass


class LengthExceeded(CodecRLError, ValueError):
    pass


class TrainingDiverged(CodecRLError, RuntimeError):
    """Raised when a loss becomes non-finite; carries a diagnostic payload."""

    def __init__(self, message, diagnostic=None):
        super().__init__(message)
        self.diagnostic = diagnostic


class MissingArtifact(ConfigError):
    """A stage's input file does not exist yet (run the producing stage first)."""

    def __init__(self, path, producer: str):
        super().__init__(f"missing artifact {path}; run `{producer}` first")
        self.path = path
