from __future__ import annotations

from dataclasses import dataclass


class ContractViolation(ValueError):
    """Pré-condição de uma operação violada (shape, faixa, razão de máscara...)."""


class ProtocolError(RuntimeError):
    """Falha do protocolo federado (agregação vazia, rodada sem clientes)."""


@dataclass(frozen=True)
class Diagnostic:
    field: str
    line: int | None
    message: str

    def __str__(self) -> str:
        where = f"linha {self.line}" if self.line is not None else "sem linha"
        return f"{self.field} ({where}): {self.message}"


class ConfigError(ValueError):
    def __init__(self, diagnostics: list[Diagnostic]):
        self.diagnostics = list(diagnostics)
        lines = "\n".join(f"  - {d}" for d in self.diagnostics)
        super().__init__(f"Configuração inválida ({len(self.diagnostics)} problema(s)):\n{lines}")
