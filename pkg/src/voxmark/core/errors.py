#!/usr/bin/env python3
"""
VoxMark Error Types

Exception hierarchy shared by every module. Each error also derives from
the closest built-in so callers catching ValueError/OSError keep working.
"""


class VoxMarkError(Exception):
    """Base class for all VoxMark errors."""


class ValidationError(VoxMarkError, ValueError):
    """Invalid array contents, lengths or shapes."""


class AudioFormatError(VoxMarkError, ValueError):
    """WAV encoding that cannot be read."""


class AudioIOError(VoxMarkError, OSError):
    """Truncated, unreadable or unwritable audio file."""


class ConfigurationError(VoxMarkError, ValueError):
    """Invalid configuration, edit name or dataset."""


class UsageError(ConfigurationError):
    """Command-line usage problem (exit code 2)."""


class NoWatermarkError(VoxMarkError, RuntimeError):
    """Message decoding requested where no watermark was detected."""
