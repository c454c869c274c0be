"""Protocolo federado em dois estágios: treino local, agregação ponderada, seleção e variantes.

Cada cliente só enxerga o próprio `LocalData`; o servidor só recebe (client_id, params, tamanho).
"""

from __future__ import annotations

import threading
from collections.abc import Callable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .data import AugmentPolicy, Dataset, LabelSplit, Partition, augment, class_rng
from .errors import ContractViolation, ProtocolError
from .evaluate import EvalResult
from .log import get_logger
from .masking import MaskPlan, make_mask
from .model import (
    ImageGeometry,
    ModelDims,
    ModelParams,
    beit_loss,
    ce_loss,
    classify,
    decode_beit,
    decode_mae,
    encode,
    encode_beit,
    encode_mae,
    mae_loss,
    masked_targets,
    patchify,
)
from .numerics import (
    OptimizerState,
    Schedule,
    Tensor,
    adamw_step,
    backward,
    log as tensor_log,
    no_grad,
    schedule_at,
    softmax,
    take_along,
)
from .tokenizer import Codebook, tokenize_batch

log = get_logger("fed")

STAGES = ("pretrain", "finetune")
METHODS = ("mae", "beit", "supervised")
METRIC_COLUMNS = ["round", "stage", "client_id", "num_samples", "loss", "lr", "accuracy", "f1_macro"]

_STAGE_TAG = {"pretrain": 1, "finetune": 2}


@dataclass(frozen=True)
class FedConfig:
    num_clients: int
    rounds: int
    local_epochs: int = 1
    batch_size: int = 32
    clients_per_round: int | None = None
    stage: str = "pretrain"
    method: str = "mae"
    lr: float = 1e-3
    warmup_rounds: int = 0
    lr_floor: float = 0.0
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    mu: float = 0.0
    semifl: bool = False
    semifl_threshold: float | None = None
    eval_interval: int = 0
    threads: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.clients_per_round is None:
            object.__setattr__(self, "clients_per_round", self.num_clients)
        if self.num_clients < 1:
            raise ContractViolation(f"N precisa ser >= 1: {self.num_clients}")
        if not 1 <= self.clients_per_round <= self.num_clients:
            raise ContractViolation(f"K={self.clients_per_round} fora de [1, N={self.num_clients}]")
        if self.local_epochs < 1 or self.batch_size < 1 or self.rounds < 0:
            raise ContractViolation(
                f"E, B >= 1 e T >= 0: E={self.local_epochs}, B={self.batch_size}, T={self.rounds}"
            )
        if self.stage not in STAGES:
            raise ContractViolation(f"Estágio desconhecido: {self.stage}")
        if self.method not in METHODS:
            raise ContractViolation(f"Método desconhecido: {self.method}")
        if (self.stage == "finetune") != (self.method == "supervised"):
            raise ContractViolation(f"Método {self.method} não combina com o estágio {self.stage}")
        if self.mu < 0:
            raise ContractViolation(f"μ precisa ser >= 0: {self.mu}")
        if self.semifl and self.stage != "finetune":
            raise ContractViolation("Semi-FL só existe no fine-tuning")
        if self.semifl_threshold is not None and not 0.0 <= self.semifl_threshold < 1.0:
            raise ContractViolation(f"Limiar Semi-FL fora de [0, 1): {self.semifl_threshold}")
        if self.threads < 1:
            raise ContractViolation(f"threads precisa ser >= 1: {self.threads}")

    @property
    def schedule(self) -> Schedule:
        total = self.rounds * self.local_epochs
        return Schedule(self.lr, min(self.warmup_rounds * self.local_epochs, total), total, self.lr_floor)

    def new_optimizer(self) -> OptimizerState:
        return OptimizerState(beta1=self.beta1, beta2=self.beta2, weight_decay=self.weight_decay)


@dataclass(frozen=True)
class Task:
    """O que um passo local otimiza: objetivo, geometria, máscara, aumento e codebook."""

    method: str
    geometry: ImageGeometry
    dims: ModelDims
    mask_ratio: float = 0.75
    mask_strategy: str | None = None
    min_block: int = 4
    max_aspect: float = 3.0
    augment: AugmentPolicy | None = None
    consistency_augment: AugmentPolicy | None = None
    codebook: Codebook | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ContractViolation(f"Método desconhecido: {self.method}")
        if self.mask_strategy is None:
            object.__setattr__(self, "mask_strategy", "block" if self.method == "beit" else "random")
        if self.method == "beit" and self.codebook is None:
            raise ContractViolation("BEiT precisa de um codebook de tokens visuais")


# ----------------------------------------------------------------------
# Dados locais e auditoria de acesso
# ----------------------------------------------------------------------
class AccessAudit:
    """Registra cada índice global lido por cada dono de dados."""

    def __init__(self):
        self._lock = threading.Lock()
        self._touched: dict[int, set[int]] = {}

    def record(self, owner: int, indices: np.ndarray) -> None:
        with self._lock:
            self._touched.setdefault(owner, set()).update(int(i) for i in indices)

    def touched(self, owner: int) -> np.ndarray:
        with self._lock:
            return np.array(sorted(self._touched.get(owner, ())), dtype=np.int64)

    def owners(self) -> list[int]:
        with self._lock:
            return sorted(self._touched)


class LocalData:
    def __init__(self, dataset: Dataset, indices: np.ndarray, owner: int, audit: AccessAudit | None = None):
        self._dataset = dataset
        self._indices = np.asarray(indices, dtype=np.int64)
        self.owner = owner
        self._audit = audit

    def __len__(self) -> int:
        return int(self._indices.size)

    @property
    def indices(self) -> np.ndarray:
        return self._indices.copy()

    def batch(self, positions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        global_ix = self._indices[np.asarray(positions, dtype=np.int64)]
        if self._audit is not None:
            self._audit.record(self.owner, global_ix)
        return self._dataset.images[global_ix], self._dataset.labels[global_ix]

    def union(self, other: LocalData) -> LocalData:
        ix = np.sort(np.concatenate([self._indices, other._indices]))
        return LocalData(self._dataset, ix, self.owner, self._audit)


@dataclass
class ClientState:
    client_id: int
    labeled: LocalData
    unlabeled: LocalData
    optimizer: OptimizerState
    params: ModelParams | None = None

    def __post_init__(self):
        overlap = np.intersect1d(self.labeled.indices, self.unlabeled.indices)
        if overlap.size:
            raise ContractViolation(f"Cliente {self.client_id}: D_l e D_u se sobrepõem ({overlap.size} itens)")

    @property
    def size(self) -> int:
        return len(self.labeled) + len(self.unlabeled)

    def stage_data(self, stage: str) -> LocalData:
        """Pré-treino usa D^k inteiro (rótulos ignorados); fine-tuning só D^k_l."""
        return self.labeled.union(self.unlabeled) if stage == "pretrain" else self.labeled


@dataclass(frozen=True)
class FederatedData:
    dataset: Dataset
    partition: Partition
    label_splits: Sequence[LabelSplit] | None = None

    def client_splits(self) -> list[LabelSplit]:
        if self.label_splits is not None:
            if len(self.label_splits) != self.partition.num_clients:
                raise ContractViolation(
                    f"{len(self.label_splits)} divisões de rótulo para {self.partition.num_clients} clientes"
                )
            return list(self.label_splits)
        return [LabelSplit(ix, np.empty(0, dtype=np.int64)) for ix in self.partition.client_indices]


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    params: ModelParams
    num_samples: int
    loss: float = float("nan")
    lr: float = float("nan")


@dataclass
class RoundState:
    round: int
    stage: str
    global_params: ModelParams
    selected: list[int]
    received: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        received_ids = {k for k, _ in self.received}
        if not received_ids <= set(self.selected):
            raise ProtocolError(f"Rodada {self.round}: recebido de clientes não selecionados")
        if any(n <= 0 for _, n in self.received):
            raise ProtocolError(f"Rodada {self.round}: atualização com tamanho 0")


@dataclass
class StageResult:
    params: ModelParams
    metrics: pd.DataFrame


Evaluator = Callable[[ModelParams], EvalResult]
RoundHook = Callable[[RoundState, ModelParams], None]


def build_clients(
    data: FederatedData,
    cfg: FedConfig,
    audit: AccessAudit | None = None,
) -> list[ClientState]:
    """Um `ClientState` por cliente; no Semi-FL, D_u de todos vai para um cliente extra de id N."""
    splits = data.client_splits()
    empty = np.empty(0, dtype=np.int64)
    clients = []
    for k, split in enumerate(splits):
        unlabeled = empty if cfg.semifl else split.unlabeled
        clients.append(
            ClientState(
                client_id=k,
                labeled=LocalData(data.dataset, split.labeled, k, audit),
                unlabeled=LocalData(data.dataset, unlabeled, k, audit),
                optimizer=cfg.new_optimizer(),
            )
        )
    if cfg.semifl:
        pooled = np.sort(np.concatenate([s.unlabeled for s in splits])) if splits else empty
        extra = len(splits)
        clients.append(
            ClientState(
                client_id=extra,
                labeled=LocalData(data.dataset, empty, extra, audit),
                unlabeled=LocalData(data.dataset, pooled, extra, audit),
                optimizer=cfg.new_optimizer(),
            )
        )
    return clients


# ----------------------------------------------------------------------
# Losses por batch
# ----------------------------------------------------------------------
def _augmented(images: np.ndarray, policy: AugmentPolicy | None, rng: np.random.Generator) -> np.ndarray:
    if policy is None:
        return images
    return np.stack([augment(img, policy, rng) for img in images])


def pretrain_loss(params: ModelParams, images: np.ndarray, task: Task, rng: np.random.Generator) -> Tensor:
    g = task.geometry
    patches = patchify(_augmented(images, task.augment, rng), g)
    plans = [
        make_mask(task.mask_strategy, g.grid, task.mask_ratio, rng, task.min_block, task.max_aspect)
        for _ in range(len(patches))
    ]
    targets = masked_targets(patches, plans)
    if task.method == "mae":
        h = encode_mae(patches, plans, params, task.dims)
        return mae_loss(decode_mae(h, plans, params, task.dims), targets)
    h = encode_beit(patches, plans, params, task.dims)
    return beit_loss(decode_beit(h, plans, params), tokenize_batch(targets, task.codebook))


def supervised_loss(
    params: ModelParams,
    images: np.ndarray,
    labels: np.ndarray,
    task: Task,
    rng: np.random.Generator,
) -> Tensor:
    patches = patchify(_augmented(images, task.augment, rng), task.geometry)
    return ce_loss(classify(encode(patches, task.geometry, params, task.dims), params), labels)


def semifl_consistency_loss(
    params: ModelParams,
    images: np.ndarray,
    policy: AugmentPolicy | None,
    rng: np.random.Generator,
    task: Task,
    label_params: ModelParams | None = None,
    threshold: float | None = None,
) -> Tensor:
    """CE entre a visão aumentada e o pseudo-rótulo argmax da imagem original.

    O ramo de pseudo-rotulagem roda sem grafo; só o ramo aumentado recebe gradiente.
    Com `threshold`, itens com probabilidade máxima abaixo dele não contribuem.
    """
    g, dims = task.geometry, task.dims
    with no_grad():
        original = classify(encode(patchify(images, g), g, label_params or params, dims), label_params or params)
        logits0 = original.data
    pseudo = logits0.argmax(axis=1)

    logits = classify(encode(patchify(_augmented(images, policy, rng), g), g, params, dims), params)
    if threshold is None:
        return ce_loss(logits, pseudo)

    shifted = np.exp(logits0 - logits0.max(axis=1, keepdims=True))
    confident = (shifted / shifted.sum(axis=1, keepdims=True)).max(axis=1) >= threshold
    if not confident.any():
        return logits.sum() * 0.0
    weights = confident.astype(logits.dtype) / confident.sum()
    per_item = _per_item_ce(logits, pseudo)
    return (per_item * Tensor(weights)).sum()


def _per_item_ce(logits: Tensor, targets: np.ndarray) -> Tensor:
    picked = take_along(softmax(logits, axis=-1).reshape(*logits.shape, 1), targets.reshape(-1, 1))
    return -tensor_log(picked.reshape(logits.shape[0]))


# ----------------------------------------------------------------------
# FedProx
# ----------------------------------------------------------------------
def fedprox_penalty(
    w_local: Mapping[str, Tensor],
    w_t: Mapping[str, Tensor],
    mu: float,
) -> tuple[float, dict[str, np.ndarray]]:
    """(μ/2)·Σ‖w − w_t‖² e sua contribuição μ(w − w_t) para cada gradiente."""
    if mu < 0:
        raise ContractViolation(f"μ precisa ser >= 0: {mu}")
    if set(w_local) != set(w_t):
        raise ContractViolation("FedProx: conjuntos de parâmetros diferentes")
    penalty = 0.0
    grads: dict[str, np.ndarray] = {}
    for name, p in w_local.items():
        anchor = w_t[name]
        if p.shape != anchor.shape:
            raise ContractViolation(f"FedProx: shape divergente em {name}: {p.shape} vs {anchor.shape}")
        diff = p.data - anchor.data
        penalty += float(np.sum(diff.astype(np.float64) ** 2))
        grads[name] = (mu * diff).astype(p.dtype, copy=False)
    return 0.5 * mu * penalty, grads


# ----------------------------------------------------------------------
# Treino local
# ----------------------------------------------------------------------
def local_train(
    params: ModelParams,
    optimizer: OptimizerState,
    data: LocalData,
    task: Task,
    cfg: FedConfig,
    round_index: int,
    client_id: int,
    anchor: ModelParams | None = None,
    consistency: bool = False,
) -> tuple[float, float]:
    """E épocas de AdamW sobre `data`; devolve (loss média dos passos, último lr).

    O lr é indexado por round·E + época, de modo que todos os clientes compartilham a agenda.
    """
    schedule = cfg.schedule
    losses = []
    lr = 0.0
    for epoch in range(cfg.local_epochs):
        rng = class_rng(cfg.seed, _STAGE_TAG[cfg.stage], client_id, round_index, epoch)
        lr = schedule_at(schedule, round_index * cfg.local_epochs + epoch)
        order = rng.permutation(len(data))
        for start in range(0, len(order), cfg.batch_size):
            images, labels = data.batch(order[start : start + cfg.batch_size])
            params.zero_grad()
            if consistency:
                loss = semifl_consistency_loss(
                    params, images, task.consistency_augment, rng, task, threshold=cfg.semifl_threshold
                )
            elif task.method == "supervised":
                loss = supervised_loss(params, images, labels, task, rng)
            else:
                loss = pretrain_loss(params, images, task, rng)
            value = float(loss.data)
            if not np.isfinite(value):
                raise FloatingPointError(f"Cliente {client_id}, rodada {round_index + 1}: loss não finita")
            backward(loss)
            if anchor is not None and cfg.mu > 0:
                penalty, extra = fedprox_penalty(params, anchor, cfg.mu)
                for name, g in extra.items():
                    params[name].grad = g.copy() if params[name].grad is None else params[name].grad + g
                value += penalty
            for p in params.values():
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
            adamw_step(params, optimizer, lr)
            losses.append(value)
    params.zero_grad()
    return (float(np.mean(losses)) if losses else float("nan")), lr


def _client_update(
    cs: ClientState,
    w_t: ModelParams,
    task: Task,
    cfg: FedConfig,
    round_index: int,
    consistency: bool = False,
) -> ClientUpdate | None:
    data = cs.unlabeled if consistency else cs.stage_data(cfg.stage)
    if len(data) == 0:
        log.debug("[%s] cliente %d sem dados nesta etapa; excluído", cfg.stage, cs.client_id)
        return None
    cs.params = w_t.copy()
    anchor = w_t if cfg.mu > 0 else None
    loss, lr = local_train(cs.params, cs.optimizer, data, task, cfg, round_index, cs.client_id, anchor, consistency)
    return ClientUpdate(cs.client_id, cs.params, len(data), loss, lr)


def client_update_pretrain(cs: ClientState, w_t: ModelParams, task: Task, cfg: FedConfig, round_index: int = 0):
    """Pré-treino MIM local a partir de w_t; o tamanho reportado é |D^k|."""
    if cfg.stage != "pretrain":
        raise ContractViolation(f"client_update_pretrain com estágio {cfg.stage}")
    return _client_update(cs, w_t, task, cfg, round_index)


def client_update_finetune(cs: ClientState, w_t: ModelParams, task: Task, cfg: FedConfig, round_index: int = 0):
    """Fine-tuning supervisionado sobre D^k_l; o tamanho reportado é |D^k_l|."""
    if cfg.stage != "finetune":
        raise ContractViolation(f"client_update_finetune com estágio {cfg.stage}")
    return _client_update(cs, w_t, task, cfg, round_index)


# ----------------------------------------------------------------------
# Servidor
# ----------------------------------------------------------------------
def select_clients(num_clients: int, k: int, rng: np.random.Generator) -> list[int]:
    if not 1 <= k <= num_clients:
        raise ContractViolation(f"K={k} fora de [1, N={num_clients}]")
    if k == num_clients:
        return list(range(num_clients))
    return sorted(int(i) for i in rng.choice(num_clients, size=k, replace=False))


def aggregate(received: Sequence[ClientUpdate]) -> ModelParams:
    """Média ponderada por num_samples, somada em ordem crescente de client_id."""
    if not received:
        raise ProtocolError("Agregação sem atualizações")
    updates = sorted(received, key=lambda u: u.client_id)
    first = updates[0].params
    for u in updates:
        if u.num_samples <= 0:
            raise ProtocolError(f"Cliente {u.client_id} enviou tamanho {u.num_samples}")
        first.check_compatible(u.params)
    total = sum(u.num_samples for u in updates)
    weights = [u.num_samples / total for u in updates]

    merged = {}
    for name in first:
        acc = (weights[0] * updates[0].params[name].data).astype(first[name].dtype, copy=False)
        for w, u in zip(weights[1:], updates[1:]):
            acc = acc + (w * u.params[name].data).astype(acc.dtype, copy=False)
        merged[name] = acc
    return ModelParams.from_arrays(merged)


def comm_cost(params: ModelParams, rounds: int) -> int:
    """Valores trafegados por cliente participante, em um sentido, ao longo de `rounds` rodadas."""
    return params.num_parameters() * rounds


def _metric_row(round_no: int, stage: str, client_id, num_samples, loss, lr, acc=None, f1=None) -> dict:
    return {
        "round": round_no,
        "stage": stage,
        "client_id": client_id,
        "num_samples": num_samples,
        "loss": loss,
        "lr": lr,
        "accuracy": acc,
        "f1_macro": f1,
    }


def metrics_frame(rows: list[dict]) -> pd.DataFrame:
    df = pd.DataFrame(rows, columns=METRIC_COLUMNS)
    for col in ("round", "client_id", "num_samples"):
        df[col] = df[col].astype("Int64")
    for col in ("loss", "lr", "accuracy", "f1_macro"):
        df[col] = df[col].astype("float64")
    return df


def _eval_row(round_no: int, stage: str, evaluator: Evaluator | None, params: ModelParams, lr: float) -> dict | None:
    if evaluator is None:
        return None
    res = evaluator(params)
    log.info("[%s] rodada %d: acc=%.4f f1=%.4f", stage, round_no, res.accuracy, res.f1_macro)
    return _metric_row(round_no, stage, None, res.num_samples, res.loss, lr, res.accuracy, res.f1_macro)


def _should_eval(cfg: FedConfig, round_no: int) -> bool:
    return round_no == cfg.rounds or (cfg.eval_interval > 0 and round_no % cfg.eval_interval == 0)


def run_stage(
    cfg: FedConfig,
    task: Task,
    data: FederatedData,
    init: ModelParams,
    evaluator: Evaluator | None = None,
    audit: AccessAudit | None = None,
    on_round: RoundHook | None = None,
) -> StageResult:
    """T rodadas de {seleção, atualizações locais em paralelo, agregação}."""
    if task.method != cfg.method:
        raise ContractViolation(f"Tarefa {task.method} e configuração {cfg.method} divergem")
    clients = build_clients(data, cfg, audit)
    by_id = {cs.client_id: cs for cs in clients}
    extra_id = cfg.num_clients if cfg.semifl else None
    if cfg.semifl and len(by_id[extra_id].unlabeled) == 0:
        log.warning("Semi-FL sem dados não rotulados; o cliente extra nunca participa")

    w = init
    rows: list[dict] = []
    log.info(
        "[%s] %s: N=%d K=%d E=%d T=%d B=%d μ=%g",
        cfg.stage, cfg.method, cfg.num_clients, cfg.clients_per_round,
        cfg.local_epochs, cfg.rounds, cfg.batch_size, cfg.mu,
    )
    with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
        for t in range(cfg.rounds):
            round_no = t + 1
            selected = select_clients(
                cfg.num_clients, cfg.clients_per_round, class_rng(cfg.seed, 0x5E1, _STAGE_TAG[cfg.stage], t)
            )
            jobs = [(by_id[k], False) for k in selected]
            if extra_id is not None and t >= cfg.rounds // 2:
                selected = selected + [extra_id]
                jobs.append((by_id[extra_id], True))

            futures = [pool.submit(_client_update, cs, w, task, cfg, t, consistency) for cs, consistency in jobs]
            updates = [u for u in (f.result() for f in futures) if u is not None]
            if not updates:
                raise ProtocolError(f"Rodada {round_no}: todos os clientes selecionados foram excluídos")

            state = RoundState(round_no, cfg.stage, w, selected, [(u.client_id, u.num_samples) for u in updates])
            w = aggregate(updates)
            if not w.is_finite():
                raise FloatingPointError(f"Rodada {round_no}: parâmetros globais não finitos")

            for u in updates:
                log.debug("[%s] rodada %d cliente %d: loss=%.6f n=%d", cfg.stage, round_no, u.client_id, u.loss, u.num_samples)
                rows.append(_metric_row(round_no, cfg.stage, u.client_id, u.num_samples, u.loss, u.lr))
            mean_loss = float(np.mean([u.loss for u in updates]))
            log.info("[%s] rodada %d/%d loss=%.6f lr=%.3g", cfg.stage, round_no, cfg.rounds, mean_loss, updates[0].lr)
            if _should_eval(cfg, round_no):
                row = _eval_row(round_no, cfg.stage, evaluator, w, updates[0].lr)
                if row is not None:
                    rows.append(row)
            if on_round is not None:
                on_round(state, w)
    return StageResult(params=w, metrics=metrics_frame(rows))


def train_centralized(
    cfg: FedConfig,
    task: Task,
    data: FederatedData,
    init: ModelParams,
    evaluator: Evaluator | None = None,
) -> StageResult:
    """Referência centralizada: um único "cliente 0" com a união dos dados, sem agregação.

    Usa a mesma rotina local e os mesmos streams de rng do cliente 0 no protocolo federado.
    """
    splits = data.client_splits()
    pooled = FederatedData(
        data.dataset,
        Partition([np.sort(np.concatenate(data.partition.client_indices))], np.ones((data.dataset.num_classes, 1))),
        [
            LabelSplit(
                np.sort(np.concatenate([s.labeled for s in splits])),
                np.sort(np.concatenate([s.unlabeled for s in splits])),
            )
        ],
    )
    single = FedConfig(**{**cfg.__dict__, "num_clients": 1, "clients_per_round": 1, "mu": 0.0, "semifl": False})
    (client,) = build_clients(pooled, single)
    data_view = client.stage_data(single.stage)
    if len(data_view) == 0:
        raise ProtocolError("Treino centralizado sem dados")

    params = init.copy()
    rows: list[dict] = []
    for t in range(single.rounds):
        loss, lr = local_train(params, client.optimizer, data_view, task, single, t, 0)
        rows.append(_metric_row(t + 1, single.stage, 0, len(data_view), loss, lr))
        if _should_eval(single, t + 1):
            row = _eval_row(t + 1, single.stage, evaluator, params, lr)
            if row is not None:
                rows.append(row)
    return StageResult(params=params, metrics=metrics_frame(rows))
