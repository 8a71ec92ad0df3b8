#!/usr/bin/env python3
"""
Error hierarchy for PipeForge

Services raise these; the command layer maps them to exit codes.
"""

from typing import Any, List, Optional


class PipeForgeError(Exception):
    """Base class for every error raised by the package"""


class ConfigError(PipeForgeError):
    """Invalid or unknown configuration"""


class DataError(PipeForgeError):
    """Dataset ingestion or validation failure"""


class SchemaError(DataError):
    """Column layout does not match the expected schema"""

    def __init__(self, message: str, columns: Optional[List[str]] = None):
        super().__init__(message)
        self.columns = list(columns or [])


class EvaluationError(PipeForgeError):
    """Metric evaluation on malformed inputs"""


class InapplicableStepError(PipeForgeError):
    """A step cannot be applied to its input; prunes the search branch"""

    def __init__(self, step: str, reason: str, position: Optional[int] = None):
        where = f" at position {position}" if position is not None else ""
        super().__init__(f"inapplicable step '{step}'{where}: {reason}")
        self.step = step
        self.reason = reason
        self.position = position

    def at(self, position: int) -> "InapplicableStepError":
        """Return a copy tagged with the pipeline position"""
        return InapplicableStepError(self.step, self.reason, position)


class EvaluationTimeout(PipeForgeError):
    """Pipeline evaluation exceeded its deadline"""


class PipelineError(PipeForgeError):
    """Malformed pipeline candidate"""


class SearchError(PipeForgeError):
    """Search tree structure violation"""


class DeadNodeError(SearchError):
    """No legal action remains below a node"""


class SearchExhausted(SearchError):
    """Every branch below the root has been pruned"""


class HpoError(PipeForgeError):
    """Hyperparameter optimizer misuse"""


class MetaBaseError(PipeForgeError):
    """Meta-learning base could not be built, read or queried"""


class EnsembleError(PipeForgeError):
    """Ensemble selection or prediction failure"""


class NoEvaluationsError(PipeForgeError):
    """The budget ran out before any pipeline was evaluated successfully"""

    def __init__(self, message: str, failures: Optional[List[Any]] = None):
        super().__init__(message)
        self.failures = list(failures or [])
