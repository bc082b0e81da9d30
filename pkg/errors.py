from enum import Enum
from typing import Any, Dict, Optional


class ErrorType(Enum):
    VALIDATION = "validation_error"
    MESH = "mesh_error"
    UNISOLVENCE = "unisolvence_error"
    SOLVER = "solver_error"
    INCOMPATIBLE_LOAD = "incompatible_load"
    BENCHMARK = "benchmark_error"


# exit codes of the command line entry point
EXIT_CODES = {
    ErrorType.VALIDATION: 2,
    ErrorType.MESH: 3,
    ErrorType.UNISOLVENCE: 3,
    ErrorType.SOLVER: 3,
    ErrorType.INCOMPATIBLE_LOAD: 3,
    ErrorType.BENCHMARK: 3,
}


class WeaksymError(Exception):
    def __init__(self, error_type: ErrorType, message: str, context: Optional[Dict[str, Any]] = None):
        self.error_type = error_type
        self.message = message
        self.context = dict(context or {})
        super().__init__(message)

    def __str__(self) -> str:
        if not self.context:
            return self.message
        details = ", ".join(f"{k}={v}" for k, v in self.context.items())
        return f"{self.message} ({details})"

    def with_context(self, **context: Any) -> "WeaksymError":
        """Attach more context (iteration, case name, ...) and return self for re-raising."""
        self.context.update(context)
        return self

    @property
    def exit_code(self) -> int:
        return EXIT_CODES[self.error_type]


class ValidationError(WeaksymError):
    def __init__(self, message: str, context: Optional[Dict[str, Any]] = None):
        super().__init__(ErrorType.VALIDATION, message, context)


class MeshError(WeaksymError):
    def __init__(self, message: str, context: Optional[Dict[str, Any]] = None):
        super().__init__(ErrorType.MESH, message, context)


class UnisolvenceError(WeaksymError):
    def __init__(self, message: str, context: Optional[Dict[str, Any]] = None):
        super().__init__(ErrorType.UNISOLVENCE, message, context)


class SolverError(WeaksymError):
    def __init__(self, message: str, context: Optional[Dict[str, Any]] = None):
        super().__init__(ErrorType.SOLVER, message, context)


class IncompatibleLoadError(WeaksymError):
    def __init__(self, message: str, context: Optional[Dict[str, Any]] = None):
        super().__init__(ErrorType.INCOMPATIBLE_LOAD, message, context)


class BenchmarkError(WeaksymError):
    def __init__(self, message: str, context: Optional[Dict[str, Any]] = None):
        super().__init__(ErrorType.BENCHMARK, message, context)
