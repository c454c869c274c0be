"""Orquestração de uma execução: partição → pré-treino → fine-tuning → avaliação, com artefatos em disco."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .config import STAGE_ORDER, ExperimentConfig, emit_config, write_config
from .data import (
    Dataset,
    LabelSplit,
    Partition,
    PartitionSpec,
    dirichlet_partition,
    partition_from_manifest,
    subsample_dataset,
    subsample_labels,
    synth_dataset,
)
from .evaluate import EvalResult, evaluate_params, heterogeneity_report
from .fed import FederatedData, RoundState, StageResult, Task, run_stage, train_centralized
from .formats import (
    CHECKPOINT_VERSION,
    IMAGE_VERSION,
    load_checkpoint,
    read_image_dataset,
    read_images,
    read_manifest,
    save_checkpoint,
    write_images,
    write_labels,
    write_manifest,
)
from .log import get_logger
from .model import ModelParams, init_finetune_params, init_pretrain_params, patchify
from .plots import plot_accuracy, plot_heterogeneity, plot_loss_curves
from .tokenizer import Codebook, fit_codebook

log = get_logger("pipeline")


@dataclass
class PreparedData:
    train: Dataset
    test: Dataset
    public: Dataset
    partition: Partition
    label_splits: list[LabelSplit]

    def federated(self) -> FederatedData:
        return FederatedData(self.train, self.partition, self.label_splits)


@dataclass
class RunOutcome:
    out_dir: Path
    status: str = "running"
    evaluation: EvalResult | None = None
    metrics: dict[str, pd.DataFrame] = field(default_factory=dict)
    pretrained: ModelParams | None = None
    finetuned: ModelParams | None = None
    codebook: Codebook | None = None


def checkpoint_path(out_dir: Path, stage: str, round_no: int) -> Path:
    return out_dir / "checkpoints" / f"{stage}_round_{round_no:04d}.fmim"


# ----------------------------------------------------------------------
# Dados
# ----------------------------------------------------------------------
def load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset, Dataset, np.ndarray | None]:
    """(treino, teste, pool público, client_ids do CSV de rótulos ou None)."""
    d = cfg.data
    g = cfg.image_geometry()
    clients = None
    if d.source == "synthetic":
        train, test, public = synth_dataset(
            d.classes, d.n_per_class, g, cfg.run.seed, d.n_test_per_class, d.n_public_per_class, d.noise
        )
    else:
        train, clients = read_image_dataset(d.train_images, d.train_labels, d.classes, "train")
        test, _ = read_image_dataset(d.test_images, d.test_labels, d.classes, "test")
        if d.public_images:
            pool = read_images(d.public_images)
            public = Dataset(pool, np.zeros(len(pool), dtype=np.int64), d.classes, "public")
        else:
            public = Dataset(np.empty((0, *g.image_shape)), np.empty(0, dtype=np.int64), d.classes, "public")
        for name, ds in (("treino", train), ("teste", test), ("público", public)):
            if len(ds) and ds.images.shape[1:] != g.image_shape:
                raise ValueError(f"Imagens de {name} com shape {ds.images.shape[1:]}, geometria {g.image_shape}")
    if d.train_fraction < 1.0:
        if clients is not None:
            raise ValueError("train_fraction < 1 não combina com client_id explícito nos rótulos")
        train = subsample_dataset(train, d.train_fraction, cfg.run.seed)
        log.info("Treino reduzido para %d imagens (fração %.3f)", len(train), d.train_fraction)
    return train, test, public, clients


def prepare_data(cfg: ExperimentConfig) -> PreparedData:
    train, test, public, clients = load_datasets(cfg)
    p = cfg.partition
    if cfg.data.manifest_path:
        partition = read_manifest(cfg.data.manifest_path, train, p.num_clients)
        log.info("Partição reproduzida do manifesto %s", cfg.data.manifest_path)
    elif clients is not None:
        partition = partition_from_manifest(p.num_clients, clients, np.arange(len(train)), train)
        log.info("Partição lida da coluna client_id dos rótulos")
    else:
        partition = dirichlet_partition(train, PartitionSpec(p.num_clients, p.alpha, p.seed, p.resample_empty))
    splits = subsample_labels(partition, train, cfg.data.label_fraction, p.seed)
    sizes = partition.sizes()
    log.info(
        "Partição: N=%d, tamanhos %s, rotulados %d/%d",
        partition.num_clients, sizes.tolist(), sum(s.labeled.size for s in splits), int(sizes.sum()),
    )
    if (sizes == 0).any():
        log.warning("Clientes sem dados: %s", np.flatnonzero(sizes == 0).tolist())
    return PreparedData(train, test, public, partition, splits)


def fit_public_codebook(cfg: ExperimentConfig, public: Dataset) -> Codebook:
    """Codebook ajustado no servidor sobre o pool público e enviado a todos os clientes."""
    if len(public) == 0:
        raise ValueError("Pool público vazio: BEiT precisa de imagens públicas para o codebook")
    g = cfg.image_geometry()
    patches = patchify(public.images, g).reshape(-1, g.patch_dim)
    p = cfg.pretrain
    cb = fit_codebook(patches, cfg.model.codebook_size, p.codebook_iters, cfg.run.seed, p.codebook_restarts)
    log.info("Codebook: K=%d, inércia=%.4f, %d iterações", cb.size, cb.inertia, cb.iterations)
    return cb


def build_task(cfg: ExperimentConfig, stage: str, codebook: Codebook | None = None) -> Task:
    g, dims = cfg.image_geometry(), cfg.model_dims()
    if stage == "pretrain":
        p = cfg.pretrain
        return Task(
            method=p.method,
            geometry=g,
            dims=dims,
            mask_ratio=p.mask_ratio,
            mask_strategy=p.mask_strategy or None,
            min_block=p.min_block,
            max_aspect=p.max_aspect,
            augment=cfg.pretrain_augment.policy(),
            codebook=codebook,
        )
    return Task(
        method="supervised",
        geometry=g,
        dims=dims,
        augment=cfg.finetune_augment.policy(),
        consistency_augment=cfg.finetune_augment.policy(),
    )


# ----------------------------------------------------------------------
# Estágios
# ----------------------------------------------------------------------
def _run(cfg: ExperimentConfig, stage: str, task: Task, data: PreparedData, init: ModelParams, evaluator, hook):
    fcfg = cfg.fed_config(stage)
    if cfg.federation.centralized:
        return train_centralized(fcfg, task, data.federated(), init, evaluator)
    return run_stage(fcfg, task, data.federated(), init, evaluator=evaluator, on_round=hook)


def _checkpoint_hook(out_dir: Path, stage: str, every: int, codebook: Codebook | None):
    if every <= 0:
        return None

    def hook(state: RoundState, params: ModelParams) -> None:
        if state.round % every == 0:
            save_checkpoint(checkpoint_path(out_dir, stage, state.round), params, codebook)

    return hook


def stage_partition(cfg: ExperimentConfig, data: PreparedData, out_dir: Path) -> None:
    part_dir = out_dir / "partition"
    write_manifest(part_dir / "manifest.csv", data.partition)
    report = heterogeneity_report(data.partition, data.train)
    report.to_csv(part_dir / "heterogeneity.csv")
    rows = [
        (k, int(i), True) for k, s in enumerate(data.label_splits) for i in s.labeled
    ] + [(k, int(i), False) for k, s in enumerate(data.label_splits) for i in s.unlabeled]
    pd.DataFrame(rows, columns=["client_id", "dataset_index", "labeled"]).sort_values(
        ["client_id", "dataset_index"]
    ).to_csv(part_dir / "label_split.csv", index=False)
    if cfg.data.source == "synthetic":
        owner = np.full(len(data.train), -1, dtype=np.int64)
        for k, ix in enumerate(data.partition.client_indices):
            owner[ix] = k
        write_images(out_dir / "data" / "train.fimg", data.train.images, dtype="f64")
        write_labels(out_dir / "data" / "train_labels.csv", data.train.labels, owner)
        write_images(out_dir / "data" / "test.fimg", data.test.images, dtype="f64")
        write_labels(out_dir / "data" / "test_labels.csv", data.test.labels)
    plot_heterogeneity(report.counts, out_dir / "plots" / "heterogeneity.svg", report.skew)
    log.info("Skew score da partição: %.4f", report.skew)


def stage_pretrain(cfg: ExperimentConfig, data: PreparedData, out_dir: Path) -> tuple[ModelParams, Codebook | None, StageResult]:
    p = cfg.pretrain
    codebook = fit_public_codebook(cfg, data.public) if p.method == "beit" else None
    init = init_pretrain_params(p.method, cfg.image_geometry(), cfg.model_dims(), cfg.run.seed, cfg.dtype)
    task = build_task(cfg, "pretrain", codebook)
    hook = _checkpoint_hook(out_dir, "pretrain", p.checkpoint_every, codebook)
    result = _run(cfg, "pretrain", task, data, init, None, hook)
    save_checkpoint(checkpoint_path(out_dir, "pretrain", p.rounds), result.params, codebook)
    result.metrics.to_csv(out_dir / "pretrain_metrics.csv", index=False)
    return result.params, codebook, result


def _pretrained_encoder(cfg: ExperimentConfig, out_dir: Path, pretrained: ModelParams | None) -> ModelParams | None:
    if cfg.finetune.init == "scratch":
        return None
    if pretrained is not None:
        return pretrained
    path = Path(cfg.finetune.checkpoint) if cfg.finetune.checkpoint else checkpoint_path(out_dir, "pretrain", cfg.pretrain.rounds)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint pré-treinado não encontrado: {path}")
    params, _ = load_checkpoint(path)
    log.info("Encoder pré-treinado carregado de %s", path)
    return params


def stage_finetune(
    cfg: ExperimentConfig,
    data: PreparedData,
    out_dir: Path,
    pretrained: ModelParams | None = None,
) -> tuple[ModelParams, StageResult]:
    g, dims = cfg.image_geometry(), cfg.model_dims()
    encoder = _pretrained_encoder(cfg, out_dir, pretrained)
    init = init_finetune_params(g, dims, cfg.run.seed, cfg.dtype, pretrained=encoder)

    def evaluator(params: ModelParams) -> EvalResult:
        return evaluate_params(params, data.test, g, dims)

    task = build_task(cfg, "finetune")
    hook = _checkpoint_hook(out_dir, "finetune", cfg.finetune.checkpoint_every, None)
    result = _run(cfg, "finetune", task, data, init, evaluator, hook)
    save_checkpoint(checkpoint_path(out_dir, "finetune", cfg.finetune.rounds), result.params)
    result.metrics.to_csv(out_dir / "finetune_metrics.csv", index=False)
    return result.params, result


def stage_evaluate(cfg: ExperimentConfig, test: Dataset, out_dir: Path, params: ModelParams | None = None) -> EvalResult:
    g, dims = cfg.image_geometry(), cfg.model_dims()
    if params is None:
        path = checkpoint_path(out_dir, "finetune", cfg.finetune.rounds)
        if not path.exists():
            raise FileNotFoundError(f"Checkpoint de fine-tuning não encontrado: {path}")
        params, _ = load_checkpoint(path)
    params = params.astype(cfg.dtype)
    result = evaluate_params(params, test, g, dims)
    write_evaluation(result, out_dir)
    log.info("Avaliação: acc=%.4f f1_macro=%.4f (n=%d)", result.accuracy, result.f1_macro, result.num_samples)
    return result


def write_evaluation(result: EvalResult, out_dir: Path) -> None:
    pd.DataFrame(
        [{"accuracy": result.accuracy, "f1_macro": result.f1_macro, "loss": result.loss, "num_samples": result.num_samples}]
    ).to_csv(out_dir / "eval_metrics.csv", index=False)
    pd.DataFrame(
        {
            "class_id": np.arange(result.per_class_f1.size),
            "f1": result.per_class_f1,
            "absent": result.absent_classes,
        }
    ).to_csv(out_dir / "eval_per_class.csv", index=False)


# ----------------------------------------------------------------------
# Execução completa
# ----------------------------------------------------------------------
def write_provenance(cfg: ExperimentConfig, out_dir: Path) -> Path:
    text = emit_config(cfg)
    meta = {
        "package_version": __version__,
        "master_seed": cfg.run.seed,
        "precision": cfg.run.precision,
        "checkpoint_format_version": CHECKPOINT_VERSION,
        "image_format_version": IMAGE_VERSION,
        "config_sha256": hashlib.sha256(text.encode("utf-8")).hexdigest(),
    }
    path = out_dir / "provenance.json"
    path.write_text(json.dumps(meta, indent=2, ensure_ascii=False), encoding="utf-8")
    return path


def _requested(cfg: ExperimentConfig, stages) -> list[str]:
    wanted = set(stages if stages is not None else cfg.run.stages)
    return [s for s in STAGE_ORDER if s in wanted]


def run_pipeline(cfg: ExperimentConfig, stages: list[str] | None = None) -> RunOutcome:
    """Executa os estágios pedidos em ordem e grava config, métricas, checkpoints e figuras.

    Em qualquer falha grava `run_meta.json` com status "failed" e o erro, depois relança.
    """
    out_dir = Path(cfg.run.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out_dir / "config.yaml")
    write_provenance(cfg, out_dir)
    meta_path = out_dir / "run_meta.json"
    todo = _requested(cfg, stages)
    outcome = RunOutcome(out_dir=out_dir)
    started_at = datetime.now(timezone.utc).isoformat()

    def write_meta(status: str, **extra) -> None:
        meta = {
            "started_at_utc": started_at,
            "finished_at_utc": datetime.now(timezone.utc).isoformat(),
            "status": status,
            "stages": todo,
            "seed": cfg.run.seed,
            **extra,
        }
        meta_path.write_text(json.dumps(meta, indent=2, ensure_ascii=False), encoding="utf-8")

    try:
        log.info("Execução em %s: estágios %s", out_dir, todo)
        data = prepare_data(cfg)
        if "partition" in todo:
            stage_partition(cfg, data, out_dir)
        if "pretrain" in todo:
            outcome.pretrained, outcome.codebook, res = stage_pretrain(cfg, data, out_dir)
            outcome.metrics["pretrain"] = res.metrics
        if "finetune" in todo:
            outcome.finetuned, res = stage_finetune(cfg, data, out_dir, outcome.pretrained)
            outcome.metrics["finetune"] = res.metrics
        if "evaluate" in todo:
            outcome.evaluation = stage_evaluate(cfg, data.test, out_dir, outcome.finetuned)

        if outcome.metrics:
            frames = pd.concat(list(outcome.metrics.values()), ignore_index=True)
            plot_loss_curves(frames, out_dir / "plots" / "loss.svg")
            plot_accuracy(frames, out_dir / "plots" / "accuracy.svg")
        extra = {}
        if outcome.evaluation is not None:
            extra = {"accuracy": outcome.evaluation.accuracy, "f1_macro": outcome.evaluation.f1_macro}
        outcome.status = "success"
        write_meta("success", **extra)
        log.info("Artefatos salvos em: %s", out_dir)
    except Exception as exc:
        outcome.status = "failed"
        write_meta("failed", error=f"{type(exc).__name__}: {exc}")
        log.error("Execução falhou. Metadados salvos em: %s", meta_path)
        raise
    return outcome
