"""Exception hierarchy shared by every semtab_cpa module."""

from __future__ import annotations


class CpaError(Exception):
    """Base exception for the annotation toolkit."""


class ConfigError(CpaError):
    """Base exception for configuration issues."""


class ConfigFileError(ConfigError):
    """Raised when the JSON config file is missing or invalid."""


class BackendRefusal(ConfigError):
    """Raised when the LLM endpoint rejects a request (HTTP 4xx)."""


class DataError(CpaError):
    """Base exception for corrupt or unusable input data."""


class MalformedInput(DataError):
    """Raised when a table file cannot be parsed."""


class EmptyCorpus(DataError):
    """Raised when a stats build receives no usable tables."""


class IoFailure(DataError):
    """Raised when a persisted artifact cannot be read or written."""


class SchemaVersionMismatch(DataError):
    """Raised when a stats file was written by an incompatible version."""


class TransportFailure(DataError):
    """Raised when the LLM endpoint stays unreachable after retries."""


class ContractError(CpaError):
    """Raised when a caller violates an operation precondition."""


class EmptyCandidates(ContractError):
    """Raised when a prompt is requested for an empty candidate list."""


__all__ = [
    "CpaError",
    "ConfigError",
    "ConfigFileError",
    "BackendRefusal",
    "DataError",
    "MalformedInput",
    "EmptyCorpus",
    "IoFailure",
    "SchemaVersionMismatch",
    "TransportFailure",
    "ContractError",
    "EmptyCandidates",
]
