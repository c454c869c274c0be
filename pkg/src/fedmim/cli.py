"""Ponto de entrada `fedmim`: um subcomando por estágio ou receita de experimento."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import ExperimentConfig, emit_config, parse_config, validate_config, write_config
from .errors import ConfigError
from .experiments import (
    COMPARE_ARMS,
    FEDPROX_MU,
    ablate_augment,
    ablate_datasize,
    ablate_labels,
    ablate_mask,
    ablate_rounds,
    compare,
    gradcheck_report,
)
from .formats import load_checkpoint
from .log import configure_logging, get_logger
from .pipeline import load_datasets, run_pipeline, stage_evaluate

log = get_logger("cli")

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2

PIPELINE_COMMANDS = {
    "partition": ["partition"],
    "pretrain": ["partition", "pretrain"],
    "finetune": ["partition", "finetune"],
    "run": None,
}


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="Arquivo YAML do experimento")
    parser.add_argument("--seed", type=int, default=None, help="Seed mestre (sobrescreve run.seed)")
    parser.add_argument("--out", default=None, help="Diretório de saída (sobrescreve run.out)")
    parser.add_argument("--precision", type=int, choices=[32, 64], default=None)
    parser.add_argument("--threads", type=int, default=None, help="Só afeta velocidade, nunca resultados")


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        prog="fedmim",
        description="Simulador federado de pré-treino MIM (MAE/BEiT) + fine-tuning supervisionado.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (
        ("partition", "Gera a partição Dirichlet, manifesto e relatório de heterogeneidade"),
        ("pretrain", "Partição + pré-treino federado"),
        ("finetune", "Partição + fine-tuning federado (encoder pré-treinado ou scratch)"),
        ("run", "Executa os estágios de run.stages em ordem"),
    ):
        _common(sub.add_parser(name, help=help_text))

    p = sub.add_parser("evaluate", help="Avalia um checkpoint de fine-tuning no conjunto de teste")
    _common(p)
    p.add_argument("--checkpoint", default=None, help="Checkpoint FMIM (padrão: último fine-tuning em --out)")

    p = sub.add_parser("validate", help="Valida a configuração e imprime a versão normalizada")
    _common(p)

    p = sub.add_parser("gradcheck", help="Grad-check em 64 bits das losses MAE, BEiT e supervisionada")
    _common(p)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--samples-per-param", type=int, default=2)

    p = sub.add_parser("ablate-mask", help="Ablação da razão de máscara")
    _common(p)
    p.add_argument("--ratios", type=float, nargs="+", default=[0.3, 0.4, 0.5, 0.6, 0.7])
    p.add_argument("--alphas", type=float, nargs="+", default=None)
    p.add_argument("--seeds", type=int, nargs="+", default=[0])

    p = sub.add_parser("ablate-rounds", help="Acurácia vs rodadas de comunicação (pré-treino vs scratch)")
    _common(p)
    p.add_argument("--pretrain-rounds", type=int, nargs="+", default=[4, 8, 16])
    p.add_argument("--finetune-rounds", type=int, default=4)
    p.add_argument("--seeds", type=int, nargs="+", default=[0])

    p = sub.add_parser("ablate-labels", help="Frações de rótulos, pré-treino vs scratch")
    _common(p)
    p.add_argument("--fractions", type=float, nargs="+", default=[0.1, 0.3, 0.7, 1.0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])

    p = sub.add_parser("ablate-datasize", help="Tamanho do conjunto de treino, pré-treino vs scratch")
    _common(p)
    p.add_argument("--fractions", type=float, nargs="+", default=[1 / 3, 2 / 3, 1.0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0])

    p = sub.add_parser("ablate-augment", help="Aumento no pré-treino: crop+flip vs crop+flip+gray+jitter")
    _common(p)
    p.add_argument("--seeds", type=int, nargs="+", default=[0])

    p = sub.add_parser("compare", help="Grade fedavg | scratch | fedprox | semifl por α e seed")
    _common(p)
    p.add_argument("--arms", nargs="+", choices=list(COMPARE_ARMS), default=list(COMPARE_ARMS))
    p.add_argument("--alphas", type=float, nargs="+", default=None)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--mu", type=float, default=FEDPROX_MU)

    return parser.parse_args(argv)


def load_with_overrides(args: argparse.Namespace) -> ExperimentConfig:
    cfg, diags = validate_config(args.config)
    if cfg is None:
        raise ConfigError(diags)
    cfg = cfg.with_overrides(seed=args.seed, out=args.out, precision=args.precision, threads=args.threads)
    if args.seed is not None:
        cfg = cfg.replace("partition", seed=args.seed)
    checked, diags = parse_config(emit_config(cfg))
    if checked is None:
        raise ConfigError(diags)
    return checked


def _dispatch(args: argparse.Namespace, cfg: ExperimentConfig) -> int:
    out = Path(cfg.run.out)
    cmd = args.command
    if cmd in PIPELINE_COMMANDS:
        run_pipeline(cfg, PIPELINE_COMMANDS[cmd])
    elif cmd == "validate":
        sys.stdout.write(emit_config(cfg))
        if args.out:
            write_config(cfg, out / "config.yaml")
    elif cmd == "evaluate":
        params = load_checkpoint(args.checkpoint)[0] if args.checkpoint else None
        out.mkdir(parents=True, exist_ok=True)
        stage_evaluate(cfg, load_datasets(cfg)[1], out, params)
    elif cmd == "gradcheck":
        table = gradcheck_report(cfg, seed=cfg.run.seed, samples_per_param=args.samples_per_param, tolerance=args.tolerance)
        out.mkdir(parents=True, exist_ok=True)
        table.to_csv(out / "gradcheck.csv", index=False)
        if not table["passed"].all():
            log.error("Grad-check acima da tolerância %.1e", args.tolerance)
            return EXIT_FAILED
    elif cmd == "ablate-mask":
        ablate_mask(cfg, out, args.ratios, args.alphas, args.seeds)
    elif cmd == "ablate-rounds":
        ablate_rounds(cfg, out, args.pretrain_rounds, args.finetune_rounds, args.seeds)
    elif cmd == "ablate-labels":
        ablate_labels(cfg, out, args.fractions, args.seeds)
    elif cmd == "ablate-datasize":
        ablate_datasize(cfg, out, args.fractions, args.seeds)
    elif cmd == "ablate-augment":
        ablate_augment(cfg, out, args.seeds)
    elif cmd == "compare":
        compare(cfg, out, args.arms, args.alphas, args.seeds, args.mu)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    configure_logging()
    args = parse_args(argv)
    try:
        cfg = load_with_overrides(args)
    except ConfigError as exc:
        for d in exc.diagnostics:
            log.error("%s", d)
        return EXIT_CONFIG
    except OSError as exc:
        log.error("Não foi possível ler a configuração: %s", exc)
        return EXIT_CONFIG

    try:
        return _dispatch(args, cfg)
    except ConfigError as exc:
        for d in exc.diagnostics:
            log.error("%s", d)
        return EXIT_CONFIG
    except Exception as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
