# Exception types shared by the cnma package and mapped to CLI exit codes

from typing import List, Optional


class CnmaError(Exception):
    """Base error. `exit_code` is what the CLI returns when this escapes."""

    exit_code: int = 1

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


class DataValidationError(CnmaError):
    """Input data (labels, CSV rows, study structure) is unusable."""

    exit_code = 2

    def __init__(self, detail: str, study_id: Optional[str] = None):
        super().__init__(detail)
        self.study_id = study_id


class LabelError(DataValidationError):
    """A treatment/component label is malformed or cannot be encoded."""


class ConfigError(CnmaError):
    """Run configuration or model specification is invalid."""

    exit_code = 2


class EstimabilityRefusal(CnmaError):
    """Ranking was requested for elements whose relative effects are not estimable."""

    exit_code = 3

    def __init__(self, detail: str, labels: Optional[List[str]] = None):
        super().__init__(detail)
        self.labels = list(labels or [])
