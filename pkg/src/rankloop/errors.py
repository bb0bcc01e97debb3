"""Exception taxonomy shared across the package.

The pipeline keeps two failure families apart: report-fetch failures are
retriable, everything else aborts the round immediately.
"""

from __future__ import annotations


class RankloopError(Exception):
    """Base class for all package errors."""


class InvalidInputError(RankloopError, ValueError):
    """Rejected input: non-finite values, empty requests, malformed rows."""


class ConfigurationError(RankloopError, ValueError):
    """A configuration value is out of its legal domain."""


class UnknownItemError(RankloopError, KeyError):
    """Item id not present in the request."""


class NoSignalError(RankloopError):
    """A dataset contains zero informative pairs; no influence report exists."""


class DegenerateBaselineError(RankloopError, ZeroDivisionError):
    """Relative uplift requested against a zero baseline."""


class DegenerateRelationError(RankloopError):
    """Transfer slope too close to zero to invert for a target range."""


class SearchFailedError(RankloopError):
    """Every search trial raised; no completed trial exists."""


class MissingEpisodeError(RankloopError, KeyError):
    """Episode key not found in the memory store."""


class IdempotencyError(RankloopError):
    """A write was replayed with a payload that conflicts with the stored one."""


class MigrationRequiredError(RankloopError):
    """Memory store schema version does not match this build."""


class MemoryIntegrityError(RankloopError):
    """The memory store file failed its integrity check."""


class AdvisorInvocationError(RankloopError):
    """Advisor subprocess could not be spawned, timed out, or exited nonzero."""


class ExtractionError(RankloopError):
    """No JSON document could be extracted from the advisor's raw output."""


class ProposalRejectedError(RankloopError):
    """A parsed advisor proposal failed validation as a whole."""


class InvalidReportError(RankloopError):
    """A/B report file is missing, too short, or unparseable (retriable)."""


class DataUnavailableError(RankloopError):
    """A/B report still invalid after the full retry budget."""


class PublishError(RankloopError):
    """Key-value endpoint rejected or lost a parameter write (fatal)."""


class PipelineFatalError(RankloopError):
    """Non-retriable pipeline failure; the loop must exit immediately."""
