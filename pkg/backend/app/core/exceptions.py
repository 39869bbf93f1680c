"""Project exceptions that carry enough context for the CLI exit-code mapping."""

from typing import Optional


class ConfigError(ValueError):
    """Raised for malformed or unknown configuration keys (CLI exit code 2)."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"config key '{key}': {message}")


class NumericError(RuntimeError):
    """Raised when a run produces non-finite values (CLI exit code 3)."""

    def __init__(self, message: str, diagnostics_path: Optional[str] = None):
        self.diagnostics_path = diagnostics_path
        if diagnostics_path:
            message = f"{message} (diagnostics: {diagnostics_path})"
        super().__init__(message)
