"""Receitas de experimentos em escala de bancada: ablações, comparação de baselines e grad-check."""

from __future__ import annotations

from collections.abc import Callable, Sequence
from pathlib import Path

import numpy as np
import pandas as pd

from .config import ExperimentConfig, emit_config, parse_config
from .errors import ConfigError
from .fed import comm_cost
from .log import get_logger
from .masking import make_mask, round_half_up
from .model import (
    ModelParams,
    beit_loss,
    ce_loss,
    classify,
    decode_beit,
    decode_mae,
    encode,
    encode_beit,
    encode_mae,
    init_finetune_params,
    init_pretrain_params,
    mae_loss,
    masked_targets,
    patchify,
)
from .numerics import grad_check
from .pipeline import checkpoint_path, run_pipeline
from .plots import plot_summary
from .tokenizer import Codebook, tokenize_batch

log = get_logger("experiments")

COMPARE_ARMS = ("fedavg", "scratch", "fedprox", "semifl")
FEDPROX_MU = 0.001


def _arm_config(base: ExperimentConfig, out: Path, seed: int, **sections) -> ExperimentConfig:
    cfg = base.with_overrides(seed=seed, out=str(out))
    cfg = cfg.replace("partition", seed=seed)
    for section, changes in sections.items():
        cfg = cfg.replace(section, **changes)
    checked, diags = parse_config(emit_config(cfg))
    if checked is None:
        raise ConfigError(diags)
    return checked


def _pretrain_once(cfg: ExperimentConfig) -> Path:
    """Roda partição + pré-treino e devolve o checkpoint final."""
    outcome = run_pipeline(cfg, stages=["partition", "pretrain"])
    return checkpoint_path(outcome.out_dir, "pretrain", cfg.pretrain.rounds)


def _finetune(cfg: ExperimentConfig, checkpoint: Path | None) -> dict:
    if checkpoint is None:
        cfg = cfg.replace("finetune", init="scratch", checkpoint="")
    else:
        cfg = cfg.replace("finetune", init="pretrained", checkpoint=str(checkpoint))
    outcome = run_pipeline(cfg, stages=["partition", "finetune", "evaluate"])
    res = outcome.evaluation
    return {"accuracy": res.accuracy, "f1_macro": res.f1_macro, "loss": res.loss}


def _write(table: pd.DataFrame, out: Path, name: str) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{name}.csv"
    table.to_csv(path, index=False)
    log.info("Resumo salvo em: %s", path)
    return path


def _seed_mean(rows: pd.DataFrame, keys: list[str]) -> pd.DataFrame:
    return (
        rows.groupby(keys, sort=False)[["accuracy", "f1_macro"]]
        .agg(["mean", "std"])
        .reset_index()
        .pipe(lambda df: df.set_axis(["_".join(c).rstrip("_") for c in df.columns], axis=1))
    )


def ablate_mask(
    cfg: ExperimentConfig,
    out: Path,
    ratios: Sequence[float] = (0.3, 0.4, 0.5, 0.6, 0.7),
    alphas: Sequence[float] | None = None,
    seeds: Sequence[int] = (0,),
) -> pd.DataFrame:
    """Acurácia após pré-treino + fine-tuning para cada razão de máscara γ (e cada α)."""
    alphas = list(alphas or [cfg.partition.alpha])
    rows = []
    for alpha in alphas:
        for ratio in ratios:
            for seed in seeds:
                run_dir = out / f"alpha_{alpha:g}" / f"mask_{ratio:g}" / f"seed_{seed}"
                arm = _arm_config(cfg, run_dir, seed, partition={"alpha": alpha}, pretrain={"mask_ratio": ratio})
                metrics = _finetune(arm, _pretrain_once(arm))
                rows.append({"alpha": alpha, "mask_ratio": ratio, "seed": seed, **metrics})
    detail = pd.DataFrame(rows)
    _write(detail, out, "mask_ablation_runs")
    summary = _seed_mean(detail, ["alpha", "mask_ratio"])
    _write(summary, out, "mask_ablation")
    plot_summary(summary, "mask_ratio", "accuracy_mean", "alpha", out / "mask_ablation.svg", "Ablação da razão de máscara")
    return summary


def ablate_rounds(
    cfg: ExperimentConfig,
    out: Path,
    pretrain_rounds: Sequence[int] = (4, 8, 16),
    finetune_rounds: int = 4,
    seeds: Sequence[int] = (0,),
) -> pd.DataFrame:
    """Acurácia vs total de rodadas: pré-treino T_p + fine-tuning T_f contra scratch com T_p + T_f."""
    rows = []
    for seed in seeds:
        for tp in pretrain_rounds:
            total = tp + finetune_rounds
            run_dir = out / f"seed_{seed}" / f"pretrain_{tp}"
            arm = _arm_config(
                cfg, run_dir, seed,
                pretrain={"rounds": tp, "warmup_rounds": min(cfg.pretrain.warmup_rounds, tp)},
                finetune={"rounds": finetune_rounds, "warmup_rounds": min(cfg.finetune.warmup_rounds, finetune_rounds)},
            )
            ckpt = _pretrain_once(arm)
            metrics = _finetune(arm, ckpt)
            cost = _round_cost(arm, tp, finetune_rounds)
            rows.append({"arm": "pretrained", "seed": seed, "pretrain_rounds": tp, "finetune_rounds": finetune_rounds,
                         "total_rounds": total, "comm_values": cost, **metrics})

            scratch = _arm_config(
                cfg, out / f"seed_{seed}" / f"scratch_{total}", seed,
                finetune={"rounds": total, "warmup_rounds": min(cfg.finetune.warmup_rounds, total)},
            )
            metrics = _finetune(scratch, None)
            rows.append({"arm": "scratch", "seed": seed, "pretrain_rounds": 0, "finetune_rounds": total,
                         "total_rounds": total, "comm_values": _round_cost(scratch, 0, total), **metrics})
    detail = pd.DataFrame(rows)
    _write(detail, out, "rounds_ablation_runs")
    summary = _seed_mean(detail, ["arm", "total_rounds"])
    _write(summary, out, "rounds_ablation")
    plot_summary(summary, "total_rounds", "accuracy_mean", "arm", out / "rounds_ablation.svg", "Acurácia vs rodadas de comunicação")
    return summary


def _round_cost(cfg: ExperimentConfig, pretrain_rounds: int, finetune_rounds: int) -> int:
    """Valores trafegados por cliente (um sentido): encoder+decoder no pré-treino, encoder+classificador depois."""
    g, dims = cfg.image_geometry(), cfg.model_dims()
    cost = comm_cost(init_finetune_params(g, dims, 0), finetune_rounds)
    if pretrain_rounds:
        cost += comm_cost(init_pretrain_params(cfg.pretrain.method, g, dims, 0), pretrain_rounds)
    return cost


def _pretrained_vs_scratch(
    cfg: ExperimentConfig,
    out: Path,
    name: str,
    values: Sequence,
    variant: Callable[[ExperimentConfig, object], ExperimentConfig],
    seeds: Sequence[int],
    share_pretrain: bool,
) -> pd.DataFrame:
    rows = []
    for seed in seeds:
        shared_ckpt = None
        for value in values:
            run_dir = out / f"seed_{seed}" / f"{name}_{value:g}"
            arm = variant(_arm_config(cfg, run_dir / "pretrained", seed), value)
            if shared_ckpt is None or not share_pretrain:
                shared_ckpt = _pretrain_once(arm)
            rows.append({name: value, "arm": "pretrained", "seed": seed, **_finetune(arm, shared_ckpt)})
            scratch = variant(_arm_config(cfg, run_dir / "scratch", seed), value)
            rows.append({name: value, "arm": "scratch", "seed": seed, **_finetune(scratch, None)})
    detail = pd.DataFrame(rows)
    _write(detail, out, f"{name}_ablation_runs")
    summary = _seed_mean(detail, [name, "arm"])
    _write(summary, out, f"{name}_ablation")
    plot_summary(summary, name, "accuracy_mean", "arm", out / f"{name}_ablation.svg", f"Pré-treino vs scratch por {name}")
    return summary


def ablate_labels(
    cfg: ExperimentConfig,
    out: Path,
    fractions: Sequence[float] = (0.1, 0.3, 0.7, 1.0),
    seeds: Sequence[int] = (0, 1, 2),
) -> pd.DataFrame:
    """Fração de rótulos: o pré-treino usa D^k inteiro e é compartilhado entre as frações de um seed."""
    return _pretrained_vs_scratch(
        cfg, out, "label_fraction", fractions,
        lambda c, v: c.replace("data", label_fraction=float(v)),
        seeds, share_pretrain=True,
    )


def ablate_datasize(
    cfg: ExperimentConfig,
    out: Path,
    fractions: Sequence[float] = (1 / 3, 2 / 3, 1.0),
    seeds: Sequence[int] = (0,),
) -> pd.DataFrame:
    """Tamanho do treino: pré-treino e fine-tuning veem só a fração das imagens."""
    return _pretrained_vs_scratch(
        cfg, out, "train_fraction", fractions,
        lambda c, v: c.replace("data", train_fraction=float(v)),
        seeds, share_pretrain=False,
    )


AUGMENT_VARIANTS = {
    "crop_flip": {"jitter": 0.0, "grayscale_prob": 0.0},
    "crop_flip_gray_jitter": {"jitter": 0.4, "grayscale_prob": 0.2},
}


def ablate_augment(cfg: ExperimentConfig, out: Path, seeds: Sequence[int] = (0,)) -> pd.DataFrame:
    rows = []
    for seed in seeds:
        for name, changes in AUGMENT_VARIANTS.items():
            arm = _arm_config(cfg, out / f"seed_{seed}" / name, seed, pretrain_augment=changes)
            rows.append({"augment": name, "seed": seed, **_finetune(arm, _pretrain_once(arm))})
    detail = pd.DataFrame(rows)
    _write(detail, out, "augment_ablation_runs")
    summary = _seed_mean(detail, ["augment"])
    _write(summary, out, "augment_ablation")
    return summary


def compare(
    cfg: ExperimentConfig,
    out: Path,
    arms: Sequence[str] = COMPARE_ARMS,
    alphas: Sequence[float] | None = None,
    seeds: Sequence[int] = (0, 1, 2),
    mu: float = FEDPROX_MU,
) -> pd.DataFrame:
    """Grade de baselines por α e seed.

    fedavg = pré-treino MIM + fine-tuning FedAvg; scratch = FedAvg de inicialização aleatória;
    fedprox e semifl também partem de inicialização aleatória.
    """
    unknown = set(arms) - set(COMPARE_ARMS)
    if unknown:
        raise ValueError(f"Braços desconhecidos: {sorted(unknown)}; use {list(COMPARE_ARMS)}")
    alphas = list(alphas or [cfg.partition.alpha])
    rows = []
    for alpha in alphas:
        for seed in seeds:
            base_dir = out / f"alpha_{alpha:g}" / f"seed_{seed}"
            for arm_name in arms:
                fed = {"mu": 0.0, "semifl": False}
                if arm_name == "fedprox":
                    fed["mu"] = mu
                elif arm_name == "semifl":
                    fed["semifl"] = True
                arm = _arm_config(cfg, base_dir / arm_name, seed, partition={"alpha": alpha}, federation=fed)
                ckpt = _pretrain_once(arm) if arm_name == "fedavg" else None
                rows.append({"arm": arm_name, "alpha": alpha, "seed": seed, **_finetune(arm, ckpt)})
    detail = pd.DataFrame(rows)
    _write(detail, out, "compare_runs")
    summary = _seed_mean(detail, ["arm", "alpha"])
    _write(summary, out, "compare")
    return summary


# ----------------------------------------------------------------------
# Grad-check
# ----------------------------------------------------------------------
def _jittered(params: ModelParams, rng: np.random.Generator, scale: float) -> ModelParams:
    return ModelParams.from_arrays(
        (n, a.astype(np.float64) + rng.normal(0.0, scale, a.shape)) for n, a in params.arrays().items()
    )


def gradcheck_report(
    cfg: ExperimentConfig,
    seed: int = 0,
    batch: int = 2,
    samples_per_param: int = 2,
    eps: float = 1e-5,
    tolerance: float = 1e-4,
) -> pd.DataFrame:
    """Erro relativo máximo entre gradiente analítico e diferença central, em 64 bits, por objetivo."""
    g, dims = cfg.image_geometry(), cfg.model_dims()
    rng = np.random.default_rng(seed)
    images = rng.random((batch, *g.image_shape))
    patches = patchify(images, g)
    p = cfg.pretrain
    rows = []

    mae_params = _jittered(init_pretrain_params("mae", g, dims, seed, np.float64), rng, 0.3)
    plans = [make_mask("random", g.grid, p.mask_ratio, rng) for _ in range(batch)]
    targets = masked_targets(patches, plans)

    def mae_closure():
        h = encode_mae(patches, plans, mae_params, dims)
        return mae_loss(decode_mae(h, plans, mae_params, dims), targets)

    rows.append(("mae", grad_check(mae_closure, mae_params, eps, samples_per_param, 1e-6, seed)))

    beit_params = _jittered(init_pretrain_params("beit", g, dims, seed, np.float64), rng, 0.3)
    codebook = Codebook(rng.random((dims.codebook_size, g.patch_dim)), iterations=0, inertia=float("nan"), seed=seed)
    min_block = min(p.min_block, round_half_up(p.mask_ratio, g.num_patches))
    block_plans = [make_mask("block", g.grid, p.mask_ratio, rng, min_block, p.max_aspect) for _ in range(batch)]
    tokens = tokenize_batch(masked_targets(patches, block_plans), codebook)

    def beit_closure():
        h = encode_beit(patches, block_plans, beit_params, dims)
        return beit_loss(decode_beit(h, block_plans, beit_params), tokens)

    rows.append(("beit", grad_check(beit_closure, beit_params, eps, samples_per_param, 1e-6, seed)))

    cls_params = _jittered(init_finetune_params(g, dims, seed, np.float64), rng, 0.3)
    labels = rng.integers(0, dims.num_classes, size=batch)

    def cls_closure():
        return ce_loss(classify(encode(patches, g, cls_params, dims), cls_params), labels)

    rows.append(("supervised", grad_check(cls_closure, cls_params, eps, samples_per_param, 1e-6, seed)))

    table = pd.DataFrame(rows, columns=["objective", "max_rel_error"])
    table["tolerance"] = tolerance
    table["passed"] = table["max_rel_error"] < tolerance
    for row in table.itertuples():
        log.info("grad-check %s: erro relativo máximo %.3e (%s)", row.objective, row.max_rel_error, "ok" if row.passed else "FALHOU")
    return table
