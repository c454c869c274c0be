"""Formatos em disco: checkpoint FMIM, contêiner de imagens FIMG e CSVs de rótulos/manifesto."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import pandas as pd

from .data import Dataset, Partition, partition_from_manifest
from .errors import ContractViolation
from .model import ModelParams
from .tokenizer import Codebook

CHECKPOINT_MAGIC = b"FMIM"
CHECKPOINT_VERSION = 1
IMAGE_MAGIC = b"FIMG"
IMAGE_VERSION = 1

TOKEN_PREFIX = "tok/"

_DTYPE_TAGS = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}
_TAG_OF = {np.dtype("float32"): 1, np.dtype("float64"): 2, np.dtype("int64"): 3}
_IMAGE_TAGS = {0: np.dtype("u1"), 1: np.dtype("<f4"), 2: np.dtype("<f8")}
_IMAGE_TAG_OF = {"u8": 0, "f32": 1, "f64": 2}


class _Reader:
    def __init__(self, raw: bytes, path: Path):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise ValueError(f"Arquivo truncado: {self.path} (offset {self.pos}, faltam {n} bytes)")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


# ----------------------------------------------------------------------
# Checkpoint
# ----------------------------------------------------------------------
def _codebook_arrays(cb: Codebook) -> dict[str, np.ndarray]:
    return {
        f"{TOKEN_PREFIX}centroids": cb.centroids.astype(np.float64),
        f"{TOKEN_PREFIX}meta": np.array([cb.iterations, cb.inertia, cb.seed], dtype=np.float64),
    }


def save_checkpoint(path: str | Path, params: ModelParams, codebook: Codebook | None = None) -> Path:
    path = Path(path)
    arrays = dict(params.arrays())
    if codebook is not None:
        arrays.update(_codebook_arrays(codebook))

    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(arrays))]
    for name, arr in arrays.items():
        tag = _TAG_OF.get(arr.dtype)
        if tag is None:
            raise ContractViolation(f"dtype sem tag de checkpoint: {name} ({arr.dtype})")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(struct.pack("<B", tag))
        chunks.append(np.ascontiguousarray(arr, dtype=_DTYPE_TAGS[tag]).tobytes())

    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(chunks))
    return path


def load_checkpoint(path: str | Path) -> tuple[ModelParams, Codebook | None]:
    path = Path(path)
    r = _Reader(path.read_bytes(), path)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise ValueError(f"Não é um checkpoint FMIM: {path}")
    version, count = r.unpack("<II")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"Versão de checkpoint não suportada: {version}")

    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}I") if rank else ()
        (tag,) = r.unpack("<B")
        dtype = _DTYPE_TAGS.get(tag)
        if dtype is None:
            raise ValueError(f"Tag de dtype desconhecida {tag} em {name}")
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(r.take(size), dtype=dtype).reshape(shape)
        arrays[name] = arr.astype(dtype.newbyteorder("="), copy=True)
    if r.pos != len(r.raw):
        raise ValueError(f"Bytes sobrando no checkpoint: {path}")

    codebook = None
    if f"{TOKEN_PREFIX}centroids" in arrays:
        meta = arrays.pop(f"{TOKEN_PREFIX}meta", np.array([0, np.nan, 0]))
        codebook = Codebook(
            centroids=arrays.pop(f"{TOKEN_PREFIX}centroids"),
            iterations=int(meta[0]),
            inertia=float(meta[1]),
            seed=int(meta[2]),
        )
    return ModelParams.from_arrays(arrays), codebook


# ----------------------------------------------------------------------
# Imagens + rótulos
# ----------------------------------------------------------------------
def write_images(path: str | Path, images: np.ndarray, dtype: str = "f32") -> Path:
    """Grava (N, H, W, C); em `u8` os pixels em [0, 1] são escalados por 255 e arredondados."""
    path = Path(path)
    images = np.asarray(images)
    if images.ndim != 4:
        raise ContractViolation(f"Imagens devem ser (N, H, W, C), recebeu {images.shape}")
    if dtype not in _IMAGE_TAG_OF:
        raise ContractViolation(f"dtype de imagem desconhecido: {dtype}")
    n, h, w, c = images.shape
    if h > 0xFFFF or w > 0xFFFF or c > 0xFF:
        raise ContractViolation(f"Extensões fora do cabeçalho FIMG: {images.shape}")
    tag = _IMAGE_TAG_OF[dtype]
    if tag == 0:
        payload = np.rint(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8)
    else:
        payload = images.astype(_IMAGE_TAGS[tag])
    header = IMAGE_MAGIC + struct.pack("<IIHHBB", IMAGE_VERSION, n, h, w, c, tag)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header + np.ascontiguousarray(payload).tobytes())
    return path


def read_images(path: str | Path) -> np.ndarray:
    path = Path(path)
    r = _Reader(path.read_bytes(), path)
    if r.take(4) != IMAGE_MAGIC:
        raise ValueError(f"Não é um contêiner FIMG: {path}")
    version, n, h, w, c, tag = r.unpack("<IIHHBB")
    if version != IMAGE_VERSION:
        raise ValueError(f"Versão FIMG não suportada: {version}")
    dtype = _IMAGE_TAGS.get(tag)
    if dtype is None:
        raise ValueError(f"Tag de dtype desconhecida em {path}: {tag}")
    raw = np.frombuffer(r.take(n * h * w * c * dtype.itemsize), dtype=dtype).reshape(n, h, w, c)
    if tag == 0:
        return raw.astype(np.float64) / 255.0
    return raw.astype(dtype.newbyteorder("="), copy=True)


def write_labels(path: str | Path, labels: np.ndarray, client_ids: np.ndarray | None = None) -> Path:
    path = Path(path)
    df = pd.DataFrame({"index": np.arange(len(labels)), "label": np.asarray(labels, dtype=np.int64)})
    if client_ids is not None:
        df["client_id"] = pd.array(client_ids, dtype="Int64")
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False)
    return path


def read_labels(path: str | Path) -> tuple[np.ndarray, np.ndarray | None]:
    df = pd.read_csv(path)
    missing = {"index", "label"} - set(df.columns)
    if missing:
        raise ValueError(f"Colunas ausentes em {path}: {sorted(missing)}")
    df = df.sort_values("index")
    if not np.array_equal(df["index"].to_numpy(), np.arange(len(df))):
        raise ValueError(f"Índices de {path} não cobrem 0..{len(df) - 1}")
    clients = None
    if "client_id" in df.columns and df["client_id"].notna().any():
        if df["client_id"].isna().any():
            raise ValueError(f"client_id parcialmente preenchido em {path}")
        clients = df["client_id"].to_numpy(dtype=np.int64)
    return df["label"].to_numpy(dtype=np.int64), clients


def read_image_dataset(
    images_path: str | Path,
    labels_path: str | Path,
    num_classes: int,
    split: str = "train",
) -> tuple[Dataset, np.ndarray | None]:
    images = read_images(images_path)
    labels, clients = read_labels(labels_path)
    if len(labels) != len(images):
        raise ValueError(f"{len(images)} imagens em {images_path}, {len(labels)} rótulos em {labels_path}")
    return Dataset(images, labels, num_classes, split), clients


# ----------------------------------------------------------------------
# Manifesto de partição
# ----------------------------------------------------------------------
def write_manifest(path: str | Path, part: Partition) -> Path:
    path = Path(path)
    rows = [(k, int(i)) for k, ix in enumerate(part.client_indices) for i in ix]
    df = pd.DataFrame(rows, columns=["client_id", "dataset_index"])
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False)
    return path


def read_manifest(path: str | Path, ds: Dataset, num_clients: int | None = None) -> Partition:
    df = pd.read_csv(path)
    missing = {"client_id", "dataset_index"} - set(df.columns)
    if missing:
        raise ValueError(f"Colunas ausentes em {path}: {sorted(missing)}")
    ids = df["client_id"].to_numpy(dtype=np.int64)
    if num_clients is None:
        num_clients = int(ids.max()) + 1 if ids.size else 1
    return partition_from_manifest(num_clients, ids, df["dataset_index"].to_numpy(dtype=np.int64), ds)
