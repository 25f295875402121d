"""Exceções categorizadas do fmnet.

Cada erro carrega uma `category` (config, data ou usage) usada pela CLI para
escolher o código de saída.
"""


class FmnetError(Exception):
    category = "internal"
    exit_code = 1


class ConfigError(FmnetError, ValueError):
    """Configuração inválida: dimensões incompatíveis, presets ou caminhos inexistentes."""

    category = "config"
    exit_code = 3


class DataError(FmnetError):
    """Dados ausentes ou corrompidos em disco."""

    category = "data"
    exit_code = 4

    def __init__(self, message: str, offset: int | None = None) -> None:
        if offset is not None:
            message = f"{message} (byte {offset})"
        super().__init__(message)
        self.offset = offset


class UsageError(FmnetError, ValueError):
    """Chamada incorreta: argumentos ou formatos fora do contrato."""

    category = "usage"
    exit_code = 2
