"""Codebook k-means de patches: os tokens visuais alvo do pré-treino BEiT."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.cluster import KMeans

from .errors import ContractViolation


@dataclass(frozen=True)
class Codebook:
    centroids: np.ndarray
    iterations: int
    inertia: float
    seed: int

    def __post_init__(self):
        c = np.asarray(self.centroids, dtype=np.float64)
        object.__setattr__(self, "centroids", c)
        if c.ndim != 2 or c.shape[0] < 2:
            raise ContractViolation(f"Codebook precisa de >= 2 centróides, shape {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ContractViolation("Centróides não finitos")
        if np.unique(c, axis=0).shape[0] != c.shape[0]:
            raise ContractViolation("Codebook com centróides repetidos")

    @property
    def size(self) -> int:
        return self.centroids.shape[0]

    @property
    def patch_dim(self) -> int:
        return self.centroids.shape[1]


def _kmeans(k: int, iters: int, seed: int, restarts: int) -> KMeans:
    return KMeans(
        n_clusters=k,
        init="k-means++",
        n_init=restarts,
        max_iter=iters,
        tol=0.0,
        algorithm="lloyd",
        random_state=seed,
    )


def _check_corpus(patches: np.ndarray, k: int) -> np.ndarray:
    x = np.asarray(patches, dtype=np.float64)
    if x.ndim != 2:
        raise ContractViolation(f"Esperado (N, S²C), recebeu {x.shape}")
    if k < 2:
        raise ContractViolation(f"K_tok precisa ser >= 2: {k}")
    distinct = np.unique(x, axis=0).shape[0]
    if distinct < k:
        raise ValueError(f"Apenas {distinct} patches distintos para K_tok={k}")
    return x


def fit_codebook(
    patches: np.ndarray,
    k: int,
    iters: int = 50,
    seed: int = 0,
    restarts: int = 10,
) -> Codebook:
    """Lloyd com semeadura k-means++; clusters vazios são re-semeados pelo ponto mais distante.

    Entre `restarts` inicializações fica a de menor inércia.
    """
    x = _check_corpus(patches, k)
    km = _kmeans(k, iters, seed, restarts).fit(x)
    return Codebook(
        centroids=km.cluster_centers_,
        iterations=int(km.n_iter_),
        inertia=float(km.inertia_),
        seed=int(seed),
    )


def inertia_trace(patches: np.ndarray, k: int, iters: int, seed: int = 0) -> list[float]:
    """Inércia após cada iteração de Lloyd de uma única inicialização."""
    x = _check_corpus(patches, k)
    return [float(_kmeans(k, i, seed, 1).fit(x).inertia_) for i in range(1, iters + 1)]


def tokenize_batch(patches: np.ndarray, cb: Codebook) -> np.ndarray:
    """Índice do centróide mais próximo (distância euclidiana², empate → menor índice)."""
    x = np.asarray(patches, dtype=np.float64)
    if x.shape[-1] != cb.patch_dim:
        raise ContractViolation(f"Patch de tamanho {x.shape[-1]}, codebook espera {cb.patch_dim}")
    lead = x.shape[:-1]
    flat = x.reshape(-1, cb.patch_dim)
    dist = ((flat[:, None, :] - cb.centroids[None, :, :]) ** 2).sum(axis=-1)
    return np.argmin(dist, axis=1).reshape(lead).astype(np.int64)


def tokenize(patch: np.ndarray, cb: Codebook) -> int:
    patch = np.asarray(patch)
    if patch.ndim != 1:
        raise ContractViolation(f"tokenize espera um vetor, recebeu {patch.shape}")
    return int(tokenize_batch(patch[None], cb)[0])
