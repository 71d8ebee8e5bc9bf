from typing import Any, Dict, Optional

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3


class SuperdiffError(Exception):
    """Base error; `kind` and `code` feed the CLI's one-line error report"""
    kind = "error"
    code = EXIT_NUMERIC

    def __init__(self, message: str, payload: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.payload = payload or {}

    def one_line(self) -> str:
        extras = " ".join(f"{key}={value}" for key, value in self.payload.items())
        line = f"error={self.kind} code={self.code} message={self.message}"
        return f"{line} {extras}" if extras else line


class ConfigurationError(SuperdiffError, ValueError):
    kind = "configuration"
    code = EXIT_USAGE


class DomainError(SuperdiffError, ValueError):
    kind = "domain"
    code = EXIT_NUMERIC


class PreconditionError(SuperdiffError, ValueError):
    kind = "precondition"
    code = EXIT_NUMERIC


class NumericalError(SuperdiffError, ArithmeticError):
    """Quadrature did not reach its tolerance"""
    kind = "numeric"
    code = EXIT_NUMERIC

    def __init__(self, message: str, value: float = float("nan"), error: float = float("nan"),
                 payload: Optional[Dict[str, Any]] = None):
        payload = dict(payload or {})
        payload.setdefault("value", value)
        payload.setdefault("error", error)
        super().__init__(message, payload)
        self.value = value
        self.error = error


class InstabilityError(SuperdiffError, RuntimeError):
    """A single Euler step moved the particle more than L/4"""
    kind = "instability"
    code = EXIT_NUMERIC

    def __init__(self, message: str, trajectory: int = -1, time: float = float("nan"),
                 payload: Optional[Dict[str, Any]] = None):
        payload = dict(payload or {})
        payload.setdefault("trajectory", trajectory)
        payload.setdefault("time", time)
        super().__init__(message, payload)
        self.trajectory = trajectory
        self.time = time
