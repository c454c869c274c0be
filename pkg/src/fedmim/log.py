from __future__ import annotations

import logging
import os
import sys

LOGGER_NAME = "fedmim"
ENV_VAR = "FMIM_LOG"

_LEVELS = {
    "error": logging.ERROR,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}


def get_logger(name: str | None = None) -> logging.Logger:
    root = logging.getLogger(LOGGER_NAME)
    return root.getChild(name) if name else root


def configure_logging(level: str | None = None) -> logging.Logger:
    """Configura o logger do pacote no formato `[INFO] mensagem`.

    O nível vem de `level` ou da variável de ambiente FMIM_LOG (error|info|debug).
    Chamadas repetidas apenas ajustam o nível.
    """
    logger = logging.getLogger(LOGGER_NAME)
    raw = (level or os.getenv(ENV_VAR) or "info").strip().lower()
    resolved = _LEVELS.get(raw)

    if not any(getattr(h, "_fedmim", False) for h in logger.handlers):
        handler = logging.StreamHandler(sys.stdout)
        handler.setFormatter(logging.Formatter("[%(levelname)s] %(message)s"))
        handler._fedmim = True  # type: ignore[attr-defined]
        logger.addHandler(handler)
        logger.propagate = False

    logger.setLevel(resolved if resolved is not None else logging.INFO)
    if resolved is None:
        logger.warning("%s=%r desconhecido; usando info", ENV_VAR, raw)
    return logger
