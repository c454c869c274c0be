"""Simulador federado de pré-treino por modelagem de imagens mascaradas (MAE/BEiT) e fine-tuning supervisionado."""

__version__ = "0.1.0"

__all__ = [
    "cli",
    "config",
    "data",
    "errors",
    "evaluate",
    "experiments",
    "fed",
    "formats",
    "log",
    "masking",
    "model",
    "numerics",
    "pipeline",
    "plots",
    "tokenizer",
]
