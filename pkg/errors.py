#!/usr/bin/env python3
"""
Exception hierarchy for the qvpr toolkit
"""


class QVPRError(Exception):
    """Base class for all toolkit errors"""


class ShapeError(QVPRError, ValueError):
    """Tensor or layer shapes do not line up"""


class ConfigError(QVPRError, ValueError):
    """Invalid architecture, search or planning configuration"""


class CalibrationError(QVPRError, ValueError):
    """Calibration sample or statistics are unusable"""


class QuantizationError(QVPRError, ValueError):
    """A model or tensor cannot be quantized as requested"""


class SearchError(QVPRError, ValueError):
    """Mixed-precision search cannot run with the given inputs"""


class InfeasibleBudgetError(QVPRError, ValueError):
    """A latency or memory budget cannot be met"""


class RetrievalError(QVPRError, ValueError):
    """Descriptor databases or queries cannot be searched as requested"""


class ContainerError(QVPRError):
    """Malformed on-disk container"""


class BadMagicError(ContainerError):
    def __init__(self, expected: bytes, found: bytes, path=None):
        where = f" in {path}" if path else ""
        super().__init__(f"Bad magic{where}: expected {expected!r}, found {found!r}")


class VersionMismatchError(ContainerError):
    def __init__(self, expected: int, found: int, path=None):
        where = f" in {path}" if path else ""
        super().__init__(f"Unsupported container version{where}: expected {expected}, found {found}")


class TruncatedBlobError(ContainerError):
    def __init__(self, what: str, needed: int, available: int, path=None):
        where = f" in {path}" if path else ""
        super().__init__(
            f"Truncated {what}{where}: needed {needed} bytes, only {available} available"
        )
