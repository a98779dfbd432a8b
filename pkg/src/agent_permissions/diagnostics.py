from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Any, Iterable


class Severity(str, Enum):
    ERROR = "error"
    WARNING = "warning"
    INFO = "info"


@dataclass(frozen=True)
class Diagnostic:
    severity: Severity
    code: str
    path: str
    message: str

    def __str__(self) -> str:
        return f"{self.severity.value.upper()} {self.code} {self.path} {self.message}"

    def to_dict(self) -> dict[str, Any]:
        return {
            "severity": self.severity.value,
            "code": self.code,
            "path": self.path,
            "message": self.message,
        }


def error(code: str, path: str, message: str) -> Diagnostic:
    return Diagnostic(Severity.ERROR, code, path, message)


def warning(code: str, path: str, message: str) -> Diagnostic:
    return Diagnostic(Severity.WARNING, code, path, message)


def info(code: str, path: str, message: str) -> Diagnostic:
    return Diagnostic(Severity.INFO, code, path, message)


def errors_in(diagnostics: Iterable[Diagnostic]) -> list[Diagnostic]:
    return [d for d in diagnostics if d.severity is Severity.ERROR]


def summarize(diagnostics: Iterable[Diagnostic]) -> str:
    diagnostics = list(diagnostics)
    n_err = sum(d.severity is Severity.ERROR for d in diagnostics)
    n_warn = sum(d.severity is Severity.WARNING for d in diagnostics)
    return (
        f"{n_err} error{'s' if n_err != 1 else ''}, "
        f"{n_warn} warning{'s' if n_warn != 1 else ''}"
    )
