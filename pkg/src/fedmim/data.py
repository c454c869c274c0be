"""Imagens sintéticas, partição Dirichlet entre clientes, subamostragem de rótulos e aumento de dados."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from .errors import ContractViolation
from .masking import round_half_up
from .model import ImageGeometry


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        images = np.asarray(self.images)
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        if images.ndim != 4:
            raise ContractViolation(f"Imagens devem ser (N, H, W, C), recebeu {images.shape}")
        if images.shape[0] != labels.shape[0]:
            raise ContractViolation(f"{images.shape[0]} imagens para {labels.shape[0]} rótulos")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ContractViolation(f"Rótulo fora de [0, {self.num_classes})")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, indices: np.ndarray, split: str | None = None) -> Dataset:
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[indices], self.labels[indices], self.num_classes, split or self.split)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass(frozen=True)
class PartitionSpec:
    num_clients: int
    alpha: float
    seed: int = 0
    resample_empty: bool = False
    max_resample: int = 100


@dataclass(frozen=True)
class Partition:
    client_indices: list[np.ndarray]
    proportions: np.ndarray
    drawn: np.ndarray | None = None

    @property
    def num_clients(self) -> int:
        return len(self.client_indices)

    def sizes(self) -> np.ndarray:
        return np.array([len(ix) for ix in self.client_indices], dtype=np.int64)


@dataclass(frozen=True)
class LabelSplit:
    labeled: np.ndarray
    unlabeled: np.ndarray

    @property
    def size(self) -> int:
        return int(self.labeled.size + self.unlabeled.size)


@dataclass(frozen=True)
class AugmentPolicy:
    scale: tuple[float, float] = (1.0, 1.0)
    crop: int | None = None
    flip_prob: float = 0.0
    rotation: float = 0.0
    jitter: float = 0.0
    grayscale_prob: float = 0.0

    def __post_init__(self):
        lo, hi = self.scale
        if not 0.0 < lo <= hi:
            raise ContractViolation(f"Faixa de escala inválida: {self.scale}")
        for name in ("flip_prob", "grayscale_prob"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ContractViolation(f"{name} fora de [0, 1]: {value}")
        if self.rotation < 0 or self.jitter < 0:
            raise ContractViolation("rotation e jitter devem ser >= 0")


class SyntheticData(NamedTuple):
    train: Dataset
    test: Dataset
    public: Dataset


def class_rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *stream]))


# ----------------------------------------------------------------------
# Gerador sintético
# ----------------------------------------------------------------------
def _coords(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.meshgrid(np.linspace(-1.0, 1.0, h), np.linspace(-1.0, 1.0, w), indexing="ij")
    return yy, xx


def _stripes(rng, yy, xx, variant):
    theta = rng.uniform(0.0, math.pi)
    freq = rng.uniform(2.0, 3.5) * (1 + variant)
    phase = rng.uniform(0.0, 2 * math.pi)
    return 0.5 + 0.5 * np.sin(freq * math.pi * (xx * math.cos(theta) + yy * math.sin(theta)) + phase)


def _blob(rng, yy, xx, variant):
    cy, cx = rng.uniform(-0.5, 0.5, size=2)
    radius = rng.uniform(0.25, 0.6) / (1 + variant)
    return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius**2))


def _checker(rng, yy, xx, variant):
    cells = rng.uniform(1.5, 3.0) * (1 + variant)
    oy, ox = rng.uniform(0.0, 1.0, size=2)
    return ((np.floor((yy + oy) * cells) + np.floor((xx + ox) * cells)) % 2).astype(float)


def _ring(rng, yy, xx, variant):
    cy, cx = rng.uniform(-0.3, 0.3, size=2)
    radius = rng.uniform(0.35, 0.7) / (1 + variant)
    width = rng.uniform(0.08, 0.18)
    r = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    return np.exp(-((r - radius) ** 2) / (2 * width**2))


def _gradient(rng, yy, xx, variant):
    theta = rng.uniform(0.0, 2 * math.pi)
    ramp = (xx * math.cos(theta) + yy * math.sin(theta) + 1.0) / 2.0
    return np.clip(ramp, 0.0, 1.0) ** (1 + variant)


def _cross(rng, yy, xx, variant):
    cy, cx = rng.uniform(-0.4, 0.4, size=2)
    width = rng.uniform(0.1, 0.25) / (1 + variant)
    return np.maximum(np.exp(-((yy - cy) ** 2) / (2 * width**2)), np.exp(-((xx - cx) ** 2) / (2 * width**2)))


_FAMILIES = (_stripes, _blob, _checker, _ring, _gradient, _cross)


def _render(label: int, rng: np.random.Generator, g: ImageGeometry, noise: float) -> np.ndarray:
    yy, xx = _coords(g.height, g.width)
    family = _FAMILIES[label % len(_FAMILIES)]
    pattern = family(rng, yy, xx, label // len(_FAMILIES))
    contrast = rng.uniform(0.6, 1.0)
    background = rng.uniform(0.0, 0.3)
    base = background + contrast * (1.0 - background) * pattern
    tint = rng.uniform(0.5, 1.0, size=g.channels) if g.channels > 1 else np.ones(1)
    image = base[:, :, None] * tint[None, None, :]
    if noise > 0:
        image = image + rng.normal(0.0, noise, size=image.shape)
    return np.clip(image, 0.0, 1.0)


def _generate(num_classes: int, per_class: int, g: ImageGeometry, seed: int, split_tag: int, noise: float, split: str) -> Dataset:
    images = np.empty((num_classes * per_class, *g.image_shape), dtype=np.float64)
    labels = np.repeat(np.arange(num_classes), per_class)
    for j in range(num_classes):
        for i in range(per_class):
            rng = class_rng(seed, split_tag, j, i)
            images[j * per_class + i] = _render(j, rng, g, noise)
    order = class_rng(seed, split_tag, 10_000).permutation(labels.size)
    return Dataset(images[order], labels[order], num_classes, split)


def synth_dataset(
    num_classes: int,
    n_per_class: int,
    g: ImageGeometry,
    seed: int,
    n_test_per_class: int | None = None,
    n_public_per_class: int = 0,
    noise: float = 0.1,
) -> SyntheticData:
    """Gera treino/teste/pool público com padrões espaciais distintos por classe.

    Listras orientadas, blobs centrados, xadrez, anéis, gradientes e cruzes; classes além
    de seis reutilizam as famílias em escala diferente.
    """
    if num_classes < 2:
        raise ContractViolation(f"synth_dataset exige J >= 2, recebeu {num_classes}")
    if n_test_per_class is None:
        n_test_per_class = max(1, n_per_class // 3)
    train = _generate(num_classes, n_per_class, g, seed, 0, noise, "train")
    test = _generate(num_classes, n_test_per_class, g, seed, 1, noise, "test")
    public = _generate(num_classes, n_public_per_class, g, seed, 2, noise, "public")
    return SyntheticData(train, test, public)


# ----------------------------------------------------------------------
# Particionamento
# ----------------------------------------------------------------------
def largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Contagens inteiras que somam `total`; sobras vão aos maiores restos (empate → menor índice)."""
    quotas = np.asarray(proportions, dtype=np.float64) * total
    counts = np.floor(quotas).astype(np.int64)
    leftover = int(total - counts.sum())
    if leftover > 0:
        order = np.argsort(-(quotas - counts), kind="stable")
        counts[order[:leftover]] += 1
    return counts


def _draw_partition(labels: np.ndarray, num_classes: int, spec: PartitionSpec, attempt: int) -> Partition:
    rng = class_rng(spec.seed, 0xD1, attempt)
    n = spec.num_clients
    buckets: list[list[np.ndarray]] = [[] for _ in range(n)]
    drawn = np.zeros((num_classes, n))
    realized = np.zeros((num_classes, n))
    for j in range(num_classes):
        members = np.flatnonzero(labels == j)
        if members.size == 0:
            raise ContractViolation(f"Classe {j} sem instâncias")
        members = rng.permutation(members)
        p = rng.dirichlet(np.full(n, spec.alpha)) if n > 1 else np.ones(1)
        counts = largest_remainder(p, members.size)
        drawn[j] = p
        realized[j] = counts / members.size
        for k, chunk in enumerate(np.split(members, np.cumsum(counts)[:-1])):
            buckets[k].append(chunk)
    indices = [np.sort(np.concatenate(b)) if b else np.empty(0, dtype=np.int64) for b in buckets]
    return Partition(indices, realized, drawn)


def dirichlet_partition(ds: Dataset, spec: PartitionSpec) -> Partition:
    """p_j ~ Dir_N(α) por classe; contagens por arredondamento de maior resto."""
    if spec.num_clients < 1:
        raise ContractViolation(f"N precisa ser >= 1: {spec.num_clients}")
    if not spec.alpha > 0:
        raise ContractViolation(f"α precisa ser > 0: {spec.alpha}")
    attempts = spec.max_resample if spec.resample_empty else 1
    part = _draw_partition(ds.labels, ds.num_classes, spec, 0)
    for attempt in range(1, attempts):
        if part.sizes().min() > 0:
            break
        part = _draw_partition(ds.labels, ds.num_classes, spec, attempt)
    return part


def partition_from_manifest(num_clients: int, client_ids: np.ndarray, indices: np.ndarray, ds: Dataset) -> Partition:
    """Reconstrói uma partição explícita (client_id, dataset_index)."""
    client_ids = np.asarray(client_ids, dtype=np.int64)
    indices = np.asarray(indices, dtype=np.int64)
    if np.unique(indices).size != indices.size:
        raise ContractViolation("Manifesto atribui um índice a mais de um cliente")
    if indices.size and (indices.min() < 0 or indices.max() >= len(ds)):
        raise ContractViolation("Manifesto com índice fora do dataset")
    if client_ids.size and (client_ids.min() < 0 or client_ids.max() >= num_clients):
        raise ContractViolation(f"Manifesto com client_id fora de [0, {num_clients})")
    per_client = [np.sort(indices[client_ids == k]) for k in range(num_clients)]
    realized = np.zeros((ds.num_classes, num_clients))
    totals = np.maximum(np.bincount(ds.labels[indices], minlength=ds.num_classes), 1)
    for k, ix in enumerate(per_client):
        realized[:, k] = np.bincount(ds.labels[ix], minlength=ds.num_classes) / totals
    return Partition(per_client, realized)


def heterogeneity_score(part: Partition) -> float:
    """Média, sobre classes, da maior fração de uma classe em um único cliente."""
    return float(np.mean(part.proportions.max(axis=1)))


def subsample_labels(part: Partition, ds: Dataset, fraction: float, seed: int = 0) -> list[LabelSplit]:
    """Por cliente e classe, round-half-up(fração·contagem) itens rotulados; o resto fica sem rótulo."""
    if not 0.0 < fraction <= 1.0:
        raise ContractViolation(f"Fração de rótulos fora de (0, 1]: {fraction}")
    splits = []
    for k, indices in enumerate(part.client_indices):
        labeled, unlabeled = [], []
        for j in range(ds.num_classes):
            members = indices[ds.labels[indices] == j]
            if members.size == 0:
                continue
            members = class_rng(seed, 0x1AB, k, j).permutation(members)
            n_lab = round_half_up(fraction, members.size)
            labeled.append(members[:n_lab])
            unlabeled.append(members[n_lab:])
        lab = np.sort(np.concatenate(labeled)) if labeled else np.empty(0, dtype=np.int64)
        unl = np.sort(np.concatenate(unlabeled)) if unlabeled else np.empty(0, dtype=np.int64)
        splits.append(LabelSplit(lab.astype(np.int64), unl.astype(np.int64)))
    return splits


def subsample_dataset(ds: Dataset, fraction: float, seed: int = 0) -> Dataset:
    """Reduz o conjunto de treino preservando a proporção de classes."""
    if not 0.0 < fraction <= 1.0:
        raise ContractViolation(f"Fração fora de (0, 1]: {fraction}")
    keep = []
    for j in range(ds.num_classes):
        members = class_rng(seed, 0x5A, j).permutation(np.flatnonzero(ds.labels == j))
        keep.append(members[: max(1, round_half_up(fraction, members.size))])
    return ds.subset(np.sort(np.concatenate(keep)))


# ----------------------------------------------------------------------
# Aumento de dados
# ----------------------------------------------------------------------
def _resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w, _ = image.shape
    if (out_h, out_w) == (h, w):
        return image
    return ndimage.zoom(image, (out_h / h, out_w / w, 1.0), order=1, mode="nearest", grid_mode=True)


def _rotate(image: np.ndarray, degrees: float) -> np.ndarray:
    return ndimage.rotate(image, degrees, axes=(1, 0), reshape=False, order=0, mode="nearest")


def augment(image: np.ndarray, pol: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """Escala → recorte → rotação → flip → jitter de cor → tons de cinza, com clamp em [0, 1]."""
    image = np.asarray(image)
    h, w, c = image.shape
    crop_h, crop_w = (pol.crop, pol.crop) if pol.crop else (h, w)
    lo, hi = pol.scale
    if crop_h > math.floor(lo * h + 1e-9) or crop_w > math.floor(lo * w + 1e-9):
        raise ContractViolation(f"Recorte {crop_h}x{crop_w} maior que a imagem escalada ({lo}·{h}x{w})")

    factor = rng.uniform(lo, hi) if hi > lo else lo
    out = _resize(image, max(crop_h, int(round(factor * h))), max(crop_w, int(round(factor * w))))
    top = int(rng.integers(0, out.shape[0] - crop_h + 1))
    left = int(rng.integers(0, out.shape[1] - crop_w + 1))
    out = out[top : top + crop_h, left : left + crop_w]

    if pol.rotation > 0:
        out = _rotate(out, rng.uniform(-pol.rotation, pol.rotation))
    if rng.random() < pol.flip_prob:
        out = out[:, ::-1]
    if pol.jitter > 0:
        brightness = rng.uniform(1 - pol.jitter, 1 + pol.jitter)
        contrast = rng.uniform(1 - pol.jitter, 1 + pol.jitter)
        level = out.mean()
        out = (out - level) * contrast + level * brightness
    if c == 3 and rng.random() < pol.grayscale_prob:
        gray = out @ np.array([0.299, 0.587, 0.114])
        out = np.repeat(gray[:, :, None], 3, axis=2)
    return np.clip(out, 0.0, 1.0)
