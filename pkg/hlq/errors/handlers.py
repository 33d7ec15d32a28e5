class HLQError(Exception):
    """Base exception for the HLQ training library"""
    pass

class DimensionError(HLQError):
    """Raised when tensor shapes or extents do not line up"""
    pass

class ParameterError(HLQError):
    """Raised when a parameter is outside its valid range"""
    pass

class NonFiniteError(HLQError, ValueError):
    """Raised when NaN or Inf reaches a tensor constructor or quantizer"""
    pass

class StateError(HLQError):
    """Raised when state carried between forward and backward is missing or mismatched"""
    pass

class FormatError(HLQError):
    """Raised when a binary container is corrupt; `offset` is the first bad byte"""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)

class ConfigError(HLQError):
    """Raised when an experiment config or catalog cannot be parsed"""
    pass

class DatasetError(HLQError):
    """Raised when a dataset file cannot be read"""
    pass

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2

def handle_hlq_error(error):
    """Map an error to a diagnostic message and a process exit code"""
    if isinstance(error, ConfigError):
        return f"Config Error: {error}", EXIT_CONFIG
    elif isinstance(error, FormatError):
        return f"Format Error: {error}", EXIT_RUNTIME
    elif isinstance(error, HLQError):
        return f"{type(error).__name__}: {error}", EXIT_RUNTIME
    return f"Unexpected Error: {error}", EXIT_RUNTIME
