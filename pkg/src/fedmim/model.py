"""ViT encoder, decoders MAE/BEiT, cabeça de classificação e losses."""

from __future__ import annotations

import math
from collections.abc import Iterable, Iterator, Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .masking import MaskPlan
from .numerics import (
    Tensor,
    concat,
    cross_entropy,
    gelu,
    layer_norm,
    softmax,
    take,
    take_along,
)


@dataclass(frozen=True)
class ImageGeometry:
    height: int
    width: int
    channels: int
    patch: int

    def __post_init__(self):
        if min(self.height, self.width, self.channels, self.patch) < 1:
            raise ContractViolation(f"Geometria com extensões não positivas: {self}")
        if self.height % self.patch or self.width % self.patch:
            raise ContractViolation(
                f"Patch {self.patch} não divide a imagem {self.height}x{self.width}"
            )

    @property
    def grid(self) -> tuple[int, int]:
        return self.height // self.patch, self.width // self.patch

    @property
    def num_patches(self) -> int:
        rows, cols = self.grid
        return rows * cols

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.height, self.width, self.channels


@dataclass(frozen=True)
class ModelDims:
    dim: int
    depth: int
    heads: int
    decoder_dim: int = 0
    decoder_depth: int = 1
    decoder_heads: int = 0
    mlp_ratio: float = 4.0
    codebook_size: int = 64
    num_classes: int = 2

    def __post_init__(self):
        if self.decoder_dim == 0:
            object.__setattr__(self, "decoder_dim", self.dim)
        if self.decoder_heads == 0:
            object.__setattr__(self, "decoder_heads", self.heads)
        if self.depth < 1 or self.decoder_depth < 0:
            raise ContractViolation(f"Profundidades inválidas: depth={self.depth}, decoder_depth={self.decoder_depth}")
        if self.dim % self.heads:
            raise ContractViolation(f"dim={self.dim} não divisível por heads={self.heads}")
        if self.decoder_dim % self.decoder_heads:
            raise ContractViolation(
                f"decoder_dim={self.decoder_dim} não divisível por decoder_heads={self.decoder_heads}"
            )
        if self.codebook_size < 2 or self.num_classes < 2:
            raise ContractViolation("codebook_size e num_classes precisam ser >= 2")

    @property
    def hidden(self) -> int:
        return int(self.dim * self.mlp_ratio)

    @property
    def decoder_hidden(self) -> int:
        return int(self.decoder_dim * self.mlp_ratio)


class ModelParams(Mapping[str, Tensor]):
    """Coleção ordenada e nomeada de tensores treináveis."""

    def __init__(self, tensors: Mapping[str, Tensor] | Iterable[tuple[str, Tensor]] = ()):
        items = tensors.items() if isinstance(tensors, Mapping) else tensors
        self._tensors: dict[str, Tensor] = {}
        for name, t in items:
            t.requires_grad = True
            t.name = name
            self._tensors[name] = t

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._tensors[name]
        except KeyError:
            raise KeyError(f"Parâmetro inexistente: {name}") from None

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def __repr__(self) -> str:
        return f"ModelParams({len(self)} tensores, {self.num_parameters()} valores)"

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]]) -> ModelParams:
        items = arrays.items() if isinstance(arrays, Mapping) else arrays
        return cls((name, Tensor(np.array(a))) for name, a in items)

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self._tensors.items()}

    def copy(self) -> ModelParams:
        return ModelParams.from_arrays((n, t.data.copy()) for n, t in self._tensors.items())

    def astype(self, dtype) -> ModelParams:
        return ModelParams.from_arrays((n, t.data.astype(dtype)) for n, t in self._tensors.items())

    def subset(self, *prefixes: str) -> ModelParams:
        return ModelParams.from_arrays(
            (n, t.data.copy()) for n, t in self._tensors.items() if n.startswith(prefixes)
        )

    def merged(self, other: ModelParams) -> ModelParams:
        out = dict(self.copy().items())
        out.update(other.copy().items())
        return ModelParams(out)

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def num_parameters(self) -> int:
        return int(sum(t.data.size for t in self._tensors.values()))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(t.data)) for t in self._tensors.values())

    def check_compatible(self, other: ModelParams) -> None:
        if list(self) != list(other):
            missing = sorted(set(self) ^ set(other))
            raise ContractViolation(f"Conjuntos de parâmetros diferentes: {missing[:5]}")
        for name in self:
            if self[name].shape != other[name].shape:
                raise ContractViolation(
                    f"Shape divergente em {name}: {self[name].shape} vs {other[name].shape}"
                )


@dataclass
class Representations:
    h: Tensor
    positions: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.int64)
        if self.h.ndim != 3 or self.positions.shape != self.h.shape[:2]:
            raise ContractViolation(
                f"Representações {self.h.shape} não cobrem as posições {self.positions.shape}"
            )


# ----------------------------------------------------------------------
# Patches
# ----------------------------------------------------------------------
def patchify(images: np.ndarray, g: ImageGeometry) -> np.ndarray:
    """(H, W, C) -> (P, S²C) ou (B, H, W, C) -> (B, P, S²C), patches em ordem row-major."""
    arr = np.asarray(images)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1:] != g.image_shape:
        raise ContractViolation(f"Imagem {np.asarray(images).shape} incompatível com {g.image_shape}")
    b = arr.shape[0]
    rows, cols = g.grid
    s, c = g.patch, g.channels
    out = arr.reshape(b, rows, s, cols, s, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, rows * cols, s * s * c)
    return out[0] if single else out


def unpatchify(patches: np.ndarray, g: ImageGeometry) -> np.ndarray:
    arr = np.asarray(patches)
    single = arr.ndim == 2
    if single:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[1:] != (g.num_patches, g.patch_dim):
        raise ContractViolation(f"Patches {np.asarray(patches).shape} incompatíveis com {g}")
    b = arr.shape[0]
    rows, cols = g.grid
    s, c = g.patch, g.channels
    out = arr.reshape(b, rows, cols, s, s, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, g.height, g.width, c)
    return out[0] if single else out


# ----------------------------------------------------------------------
# Inicialização
# ----------------------------------------------------------------------
def _trunc_normal(rng: np.random.Generator, shape: tuple[int, ...], dtype, std: float = 0.02) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


class _Builder:
    def __init__(self, rng: np.random.Generator, dtype):
        self.rng = rng
        self.dtype = dtype
        self.arrays: dict[str, np.ndarray] = {}

    def normal(self, name: str, shape: tuple[int, ...]) -> None:
        self.arrays[name] = _trunc_normal(self.rng, shape, self.dtype)

    def const(self, name: str, shape: tuple[int, ...], value: float) -> None:
        self.arrays[name] = np.full(shape, value, dtype=self.dtype)

    def linear(self, prefix: str, fan_in: int, fan_out: int, zero: bool = False) -> None:
        if zero:
            self.const(f"{prefix}/w", (fan_in, fan_out), 0.0)
        else:
            self.normal(f"{prefix}/w", (fan_in, fan_out))
        self.const(f"{prefix}/b", (fan_out,), 0.0)

    def norm(self, prefix: str, dim: int) -> None:
        self.const(f"{prefix}/w", (dim,), 1.0)
        self.const(f"{prefix}/b", (dim,), 0.0)

    def blocks(self, prefix: str, depth: int, dim: int, hidden: int) -> None:
        for i in range(depth):
            p = f"{prefix}/blocks/{i}"
            self.norm(f"{p}/ln1", dim)
            for proj in ("q", "k", "v", "proj"):
                self.linear(f"{p}/attn/{proj}", dim, dim)
            self.norm(f"{p}/ln2", dim)
            self.linear(f"{p}/mlp/fc1", dim, hidden)
            self.linear(f"{p}/mlp/fc2", hidden, dim)
        self.norm(f"{prefix}/norm", dim)

    def build(self) -> ModelParams:
        return ModelParams.from_arrays(self.arrays)


def _init_rng(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, tag]))


def init_encoder(g: ImageGeometry, dims: ModelDims, seed: int, dtype=np.float32) -> ModelParams:
    b = _Builder(_init_rng(seed, 1), dtype)
    b.linear("enc/patch", g.patch_dim, dims.dim)
    b.normal("enc/pos", (g.num_patches, dims.dim))
    b.blocks("enc", dims.depth, dims.dim, dims.hidden)
    return b.build()


def init_mae_decoder(g: ImageGeometry, dims: ModelDims, seed: int, dtype=np.float32) -> ModelParams:
    b = _Builder(_init_rng(seed, 2), dtype)
    b.linear("mae/embed", dims.dim, dims.decoder_dim)
    b.normal("mae/mask_token", (dims.decoder_dim,))
    b.normal("mae/pos", (g.num_patches, dims.decoder_dim))
    b.blocks("mae", dims.decoder_depth, dims.decoder_dim, dims.decoder_hidden)
    b.linear("mae/head", dims.decoder_dim, g.patch_dim)
    return b.build()


def init_beit_head(dims: ModelDims, seed: int, dtype=np.float32) -> ModelParams:
    b = _Builder(_init_rng(seed, 3), dtype)
    b.normal("beit/mask_token", (dims.dim,))
    b.linear("beit/head", dims.dim, dims.codebook_size)
    return b.build()


def init_classifier(dims: ModelDims, dtype=np.float32) -> ModelParams:
    b = _Builder(_init_rng(0, 4), dtype)
    b.linear("cls", dims.dim, dims.num_classes, zero=True)
    return b.build()


def init_pretrain_params(method: str, g: ImageGeometry, dims: ModelDims, seed: int, dtype=np.float32) -> ModelParams:
    encoder = init_encoder(g, dims, seed, dtype)
    if method == "mae":
        return encoder.merged(init_mae_decoder(g, dims, seed, dtype))
    if method == "beit":
        return encoder.merged(init_beit_head(dims, seed, dtype))
    raise ContractViolation(f"Método de pré-treino desconhecido: {method}")


def init_finetune_params(
    g: ImageGeometry,
    dims: ModelDims,
    seed: int,
    dtype=np.float32,
    pretrained: ModelParams | None = None,
) -> ModelParams:
    """Encoder (pré-treinado ou aleatório) + classificador linear zerado."""
    if pretrained is not None:
        encoder = pretrained.subset("enc/").astype(dtype)
        encoder.check_compatible(init_encoder(g, dims, seed, dtype))
    else:
        encoder = init_encoder(g, dims, seed, dtype)
    return encoder.merged(init_classifier(dims, dtype))


# ----------------------------------------------------------------------
# Blocos
# ----------------------------------------------------------------------
def _linear(x: Tensor, p: Mapping[str, Tensor], prefix: str) -> Tensor:
    return x @ p[f"{prefix}/w"] + p[f"{prefix}/b"]


def _attention(x: Tensor, p: Mapping[str, Tensor], prefix: str, heads: int) -> Tensor:
    b, n, d = x.shape
    dh = d // heads

    def split(t: Tensor) -> Tensor:
        return t.reshape(b, n, heads, dh).transpose(0, 2, 1, 3)

    q = split(_linear(x, p, f"{prefix}/q"))
    k = split(_linear(x, p, f"{prefix}/k"))
    v = split(_linear(x, p, f"{prefix}/v"))
    weights = softmax((q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh)), axis=-1)
    out = (weights @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
    return _linear(out, p, f"{prefix}/proj")


def _norm(x: Tensor, p: Mapping[str, Tensor], prefix: str) -> Tensor:
    return layer_norm(x, p[f"{prefix}/w"], p[f"{prefix}/b"])


def _transformer(x: Tensor, p: Mapping[str, Tensor], prefix: str, depth: int, heads: int) -> Tensor:
    for i in range(depth):
        blk = f"{prefix}/blocks/{i}"
        x = x + _attention(_norm(x, p, f"{blk}/ln1"), p, f"{blk}/attn", heads)
        x = x + _linear(gelu(_linear(_norm(x, p, f"{blk}/ln2"), p, f"{blk}/mlp/fc1")), p, f"{blk}/mlp/fc2")
    return _norm(x, p, f"{prefix}/norm")


# ----------------------------------------------------------------------
# Planos por batch
# ----------------------------------------------------------------------
def _as_batch(patches: np.ndarray) -> np.ndarray:
    arr = np.asarray(patches)
    return arr[None] if arr.ndim == 2 else arr


def _plan_list(plan: MaskPlan | Sequence[MaskPlan], batch: int, num_patches: int) -> list[MaskPlan]:
    plans = [plan] * batch if isinstance(plan, MaskPlan) else list(plan)
    if len(plans) != batch:
        raise ContractViolation(f"{len(plans)} planos para {batch} imagens")
    for pl in plans:
        if pl.num_patches != num_patches:
            raise ContractViolation(f"Plano com P={pl.num_patches}, geometria com P={num_patches}")
    if len({pl.masked.size for pl in plans}) > 1:
        raise ContractViolation("Planos do mesmo batch precisam de |M| igual")
    return plans


def stack_indices(plans: Sequence[MaskPlan], which: str) -> np.ndarray:
    return np.stack([getattr(pl, which) for pl in plans]).astype(np.int64)


def masked_targets(patches: np.ndarray, plan: MaskPlan | Sequence[MaskPlan]) -> np.ndarray:
    """Patches verdadeiros nas posições mascaradas, (B, |M|, S²C)."""
    batch = _as_batch(patches)
    plans = _plan_list(plan, batch.shape[0], batch.shape[1])
    idx = stack_indices(plans, "masked")
    return batch[np.arange(batch.shape[0])[:, None], idx]


# ----------------------------------------------------------------------
# Encoders e decoders
# ----------------------------------------------------------------------
def encode_beit(
    patches: np.ndarray,
    plan: MaskPlan | Sequence[MaskPlan],
    params: Mapping[str, Tensor],
    dims: ModelDims,
) -> Representations:
    """Sequência completa; posições mascaradas recebem e^M + embedding de posição."""
    batch = _as_batch(patches)
    b, n, _ = batch.shape
    if n != params["enc/pos"].shape[0]:
        raise ContractViolation(f"{n} patches, embedding de posição para {params['enc/pos'].shape[0]}")
    plans = _plan_list(plan, b, n)
    dtype = params["enc/pos"].dtype

    indicator = np.zeros((b, n, 1), dtype=dtype)
    indicator[np.arange(b)[:, None], stack_indices(plans, "masked"), 0] = 1.0
    keep = 1.0 - indicator
    x = _linear(Tensor(batch.astype(dtype) * keep), params, "enc/patch")
    x = x * Tensor(keep) + params["beit/mask_token"] * Tensor(indicator)
    x = x + params["enc/pos"]
    h = _transformer(x, params, "enc", dims.depth, dims.heads)
    return Representations(h, np.tile(np.arange(n), (b, 1)))


def encode_mae(
    patches: np.ndarray,
    plan: MaskPlan | Sequence[MaskPlan],
    params: Mapping[str, Tensor],
    dims: ModelDims,
) -> Representations:
    """Só os patches visíveis entram no encoder; o conteúdo mascarado nunca é lido."""
    batch = _as_batch(patches)
    b, n, _ = batch.shape
    if n != params["enc/pos"].shape[0]:
        raise ContractViolation(f"{n} patches, embedding de posição para {params['enc/pos'].shape[0]}")
    plans = _plan_list(plan, b, n)
    visible = stack_indices(plans, "visible")
    if visible.shape[1] == 0:
        raise ContractViolation("Conjunto visível vazio")
    dtype = params["enc/pos"].dtype

    kept = batch[np.arange(b)[:, None], visible].astype(dtype)
    x = _linear(Tensor(kept), params, "enc/patch") + take(params["enc/pos"], visible)
    h = _transformer(x, params, "enc", dims.depth, dims.heads)
    return Representations(h, visible)


def encode(patches: np.ndarray, g: ImageGeometry, params: Mapping[str, Tensor], dims: ModelDims) -> Representations:
    """Encoder sem máscara (fine-tuning e avaliação)."""
    return encode_mae(patches, MaskPlan.unmasked(g.grid), params, dims)


def decode_beit(
    h: Representations,
    plan: MaskPlan | Sequence[MaskPlan],
    params: Mapping[str, Tensor],
) -> Tensor:
    """Logits de tokens visuais nas posições mascaradas, (B, |M|, K_tok)."""
    b, n, _ = h.h.shape
    total = params["enc/pos"].shape[0]
    if n != total:
        raise ContractViolation(f"decode_beit exige as {total} posições, recebeu {n}")
    plans = _plan_list(plan, b, total)
    rows = take_along(h.h, stack_indices(plans, "masked"))
    return _linear(rows, params, "beit/head")


def decode_mae(
    h: Representations,
    plan: MaskPlan | Sequence[MaskPlan],
    params: Mapping[str, Tensor],
    dims: ModelDims,
) -> Tensor:
    """Patches previstos nas posições mascaradas, em ordem crescente de índice."""
    b, n_visible, _ = h.h.shape
    total = params["mae/pos"].shape[0]
    plans = _plan_list(plan, b, total)
    visible = stack_indices(plans, "visible")
    masked = stack_indices(plans, "masked")
    if not np.array_equal(h.positions, visible):
        raise ContractViolation("Representações não cobrem exatamente V do plano")
    dtype = params["mae/pos"].dtype

    x = _linear(h.h, params, "mae/embed")
    tokens = params["mae/mask_token"] * Tensor(np.ones((b, masked.shape[1], 1), dtype=dtype))
    full = concat([x, tokens], axis=1)
    restore = np.argsort(np.concatenate([visible, masked], axis=1), axis=1, kind="stable")
    full = take_along(full, restore) + params["mae/pos"]
    out = _transformer(full, params, "mae", dims.decoder_depth, dims.decoder_heads)
    return take_along(_linear(out, params, "mae/head"), masked)


def classify(h: Representations, params: Mapping[str, Tensor]) -> Tensor:
    if h.h.shape[1] == 0:
        raise ContractViolation("classify sem representações")
    return _linear(h.h.mean(axis=1), params, "cls")


# ----------------------------------------------------------------------
# Losses
# ----------------------------------------------------------------------
def beit_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    return cross_entropy(logits, np.asarray(targets))


def mae_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Média por pixel dentro do patch, depois média sobre patches mascarados."""
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ContractViolation(f"Predição {pred.shape} e alvo {target.shape} diferem")
    return (pred - Tensor(target.astype(pred.dtype))).square().mean()


def ce_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    return cross_entropy(logits, np.asarray(labels))
