"""Configuração de experimentos em YAML: seções tipadas, diagnósticos por campo e emissão normalizada."""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .data import AugmentPolicy
from .errors import ConfigError, ContractViolation, Diagnostic
from .fed import FedConfig
from .masking import round_half_up
from .model import ImageGeometry, ModelDims

STAGE_ORDER = ("partition", "pretrain", "finetune", "evaluate")


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    out: str = "runs/desk"
    precision: int = 32
    threads: int = 1
    stages: list[str] = field(default_factory=lambda: list(STAGE_ORDER))
    eval_interval: int = 0


@dataclass(frozen=True)
class GeometrySection:
    height: int
    width: int
    channels: int
    patch: int


@dataclass(frozen=True)
class ModelSection:
    dim: int = 32
    depth: int = 2
    heads: int = 4
    decoder_dim: int = 0
    decoder_depth: int = 1
    decoder_heads: int = 0
    mlp_ratio: float = 4.0
    codebook_size: int = 64


@dataclass(frozen=True)
class DataSection:
    classes: int
    source: str = "synthetic"
    n_per_class: int = 300
    n_test_per_class: int = 100
    n_public_per_class: int = 50
    noise: float = 0.1
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    public_images: str = ""
    manifest_path: str = ""
    label_fraction: float = 1.0
    train_fraction: float = 1.0


@dataclass(frozen=True)
class PartitionSection:
    num_clients: int
    alpha: float
    seed: int | None = None
    resample_empty: bool = False


@dataclass(frozen=True)
class FederationSection:
    clients_per_round: int = 0
    local_epochs: int = 1
    batch_size: int = 32
    mu: float = 0.0
    semifl: bool = False
    semifl_threshold: float | None = None
    centralized: bool = False


@dataclass(frozen=True)
class PretrainSection:
    method: str
    rounds: int = 10
    lr: float = 1.5e-3
    warmup_rounds: int = 1
    lr_floor: float = 0.0
    weight_decay: float = 0.05
    mask_ratio: float = 0.6
    mask_strategy: str = ""
    min_block: int = 4
    max_aspect: float = 3.0
    codebook_iters: int = 50
    codebook_restarts: int = 4
    checkpoint_every: int = 0


@dataclass(frozen=True)
class FinetuneSection:
    rounds: int = 10
    lr: float = 1e-3
    warmup_rounds: int = 1
    lr_floor: float = 0.0
    weight_decay: float = 0.05
    init: str = "pretrained"
    checkpoint: str = ""
    checkpoint_every: int = 0


@dataclass(frozen=True)
class AugmentSection:
    scale_lo: float = 1.0
    scale_hi: float = 1.0
    crop: int = 0
    flip_prob: float = 0.5
    rotation: float = 0.0
    jitter: float = 0.0
    grayscale_prob: float = 0.0

    def policy(self) -> AugmentPolicy:
        return AugmentPolicy(
            scale=(self.scale_lo, self.scale_hi),
            crop=self.crop or None,
            flip_prob=self.flip_prob,
            rotation=self.rotation,
            jitter=self.jitter,
            grayscale_prob=self.grayscale_prob,
        )


PRETRAIN_AUGMENT = AugmentSection(scale_lo=1.0, scale_hi=1.25, flip_prob=0.5, jitter=0.4)
FINETUNE_AUGMENT = AugmentSection(flip_prob=0.5, rotation=10.0)


@dataclass(frozen=True)
class ExperimentConfig:
    run: RunSection
    geometry: GeometrySection
    model: ModelSection
    data: DataSection
    partition: PartitionSection
    federation: FederationSection
    pretrain: PretrainSection
    finetune: FinetuneSection
    pretrain_augment: AugmentSection = PRETRAIN_AUGMENT
    finetune_augment: AugmentSection = FINETUNE_AUGMENT

    @property
    def dtype(self):
        return np.float64 if self.run.precision == 64 else np.float32

    def image_geometry(self) -> ImageGeometry:
        g = self.geometry
        return ImageGeometry(g.height, g.width, g.channels, g.patch)

    def model_dims(self) -> ModelDims:
        m = self.model
        return ModelDims(
            dim=m.dim,
            depth=m.depth,
            heads=m.heads,
            decoder_dim=m.decoder_dim,
            decoder_depth=m.decoder_depth,
            decoder_heads=m.decoder_heads,
            mlp_ratio=m.mlp_ratio,
            codebook_size=m.codebook_size,
            num_classes=self.data.classes,
        )

    def fed_config(self, stage: str) -> FedConfig:
        f = self.federation
        sec = self.pretrain if stage == "pretrain" else self.finetune
        return FedConfig(
            num_clients=self.partition.num_clients,
            rounds=sec.rounds,
            local_epochs=f.local_epochs,
            batch_size=f.batch_size,
            clients_per_round=f.clients_per_round or self.partition.num_clients,
            stage=stage,
            method=self.pretrain.method if stage == "pretrain" else "supervised",
            lr=sec.lr,
            warmup_rounds=sec.warmup_rounds,
            lr_floor=sec.lr_floor,
            weight_decay=sec.weight_decay,
            mu=f.mu,
            semifl=f.semifl and stage == "finetune",
            semifl_threshold=f.semifl_threshold,
            eval_interval=self.run.eval_interval,
            threads=self.run.threads,
            seed=self.run.seed,
        )

    def with_overrides(self, **run_overrides) -> ExperimentConfig:
        changes = {k: v for k, v in run_overrides.items() if v is not None}
        return dataclasses.replace(self, run=dataclasses.replace(self.run, **changes)) if changes else self

    def replace(self, section: str, **changes) -> ExperimentConfig:
        return dataclasses.replace(self, **{section: dataclasses.replace(getattr(self, section), **changes)})


SECTIONS: dict[str, type] = typing.get_type_hints(ExperimentConfig)
_SECTION_DEFAULTS = {"pretrain_augment": PRETRAIN_AUGMENT, "finetune_augment": FINETUNE_AUGMENT}

_CHOICES: dict[tuple[str, str], tuple] = {
    ("run", "precision"): (32, 64),
    ("data", "source"): ("synthetic", "files"),
    ("pretrain", "method"): ("mae", "beit"),
    ("pretrain", "mask_strategy"): ("", "random", "block"),
    ("finetune", "init"): ("pretrained", "scratch"),
}

# (mínimo, máximo, mínimo exclusivo?)
_RANGES: dict[tuple[str, str], tuple[float | None, float | None, bool]] = {
    ("run", "threads"): (1, None, False),
    ("run", "eval_interval"): (0, None, False),
    ("geometry", "height"): (1, None, False),
    ("geometry", "width"): (1, None, False),
    ("geometry", "channels"): (1, 255, False),
    ("geometry", "patch"): (1, None, False),
    ("model", "dim"): (1, None, False),
    ("model", "depth"): (1, None, False),
    ("model", "heads"): (1, None, False),
    ("model", "decoder_depth"): (0, None, False),
    ("model", "mlp_ratio"): (0, None, True),
    ("model", "codebook_size"): (2, None, False),
    ("data", "classes"): (2, None, False),
    ("data", "n_per_class"): (1, None, False),
    ("data", "n_test_per_class"): (1, None, False),
    ("data", "n_public_per_class"): (0, None, False),
    ("data", "noise"): (0, None, False),
    ("data", "label_fraction"): (0, 1, True),
    ("data", "train_fraction"): (0, 1, True),
    ("partition", "num_clients"): (1, None, False),
    ("partition", "alpha"): (0, None, True),
    ("federation", "clients_per_round"): (0, None, False),
    ("federation", "local_epochs"): (1, None, False),
    ("federation", "batch_size"): (1, None, False),
    ("federation", "mu"): (0, None, False),
    ("federation", "semifl_threshold"): (0, 1, False),
    ("pretrain", "rounds"): (0, None, False),
    ("pretrain", "lr"): (0, None, False),
    ("pretrain", "warmup_rounds"): (0, None, False),
    ("pretrain", "weight_decay"): (0, None, False),
    ("pretrain", "mask_ratio"): (0, 1, True),
    ("pretrain", "min_block"): (1, None, False),
    ("pretrain", "max_aspect"): (1, None, False),
    ("pretrain", "codebook_iters"): (1, None, False),
    ("pretrain", "codebook_restarts"): (1, None, False),
    ("pretrain", "checkpoint_every"): (0, None, False),
    ("finetune", "checkpoint_every"): (0, None, False),
    ("finetune", "rounds"): (0, None, False),
    ("finetune", "lr"): (0, None, False),
    ("finetune", "warmup_rounds"): (0, None, False),
    ("finetune", "weight_decay"): (0, None, False),
}

_AUGMENT_RANGES = {
    "scale_lo": (0, None, True),
    "scale_hi": (0, None, True),
    "crop": (0, None, False),
    "flip_prob": (0, 1, False),
    "rotation": (0, 180, False),
    "jitter": (0, 1, False),
    "grayscale_prob": (0, 1, False),
}
for _sec in ("pretrain_augment", "finetune_augment"):
    _RANGES.update({(_sec, k): v for k, v in _AUGMENT_RANGES.items()})


# ----------------------------------------------------------------------
# Leitura com números de linha
# ----------------------------------------------------------------------
def _key_lines(text: str) -> dict[tuple[str, ...], int]:
    node = yaml.compose(text)
    lines: dict[tuple[str, ...], int] = {}
    if not isinstance(node, yaml.MappingNode):
        return lines
    for key_node, value_node in node.value:
        section = str(key_node.value)
        lines[(section,)] = key_node.start_mark.line + 1
        if isinstance(value_node, yaml.MappingNode):
            for sub_key, _ in value_node.value:
                lines[(section, str(sub_key.value))] = sub_key.start_mark.line + 1
    return lines


def _type_name(tp) -> str:
    return getattr(tp, "__name__", str(tp))


def _coerce(value, tp):
    """Valor convertido para `tp`, ou TypeError com a descrição esperada."""
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(value, args[0])
    if origin is list:
        (item,) = typing.get_args(tp)
        if not isinstance(value, list):
            raise TypeError(f"esperado lista de {_type_name(item)}")
        return [_coerce(v, item) for v in value]
    if tp is bool:
        if not isinstance(value, bool):
            raise TypeError("esperado booleano")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeError("esperado inteiro")
        return value
    if tp is float:
        if isinstance(value, str):
            # YAML 1.1 lê "1e-3" (sem ponto) como texto
            try:
                return float(value)
            except ValueError:
                raise TypeError("esperado número") from None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise TypeError("esperado número")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise TypeError("esperado texto")
        return value
    raise TypeError(f"tipo não suportado: {tp}")


def _check_range(key: tuple[str, str], value) -> str | None:
    if value is None or key not in _RANGES:
        return None
    lo, hi, exclusive_lo = _RANGES[key]
    if lo is not None and (value <= lo if exclusive_lo else value < lo):
        return f"precisa ser {'>' if exclusive_lo else '>='} {lo}, recebeu {value}"
    if hi is not None and value > hi:
        return f"precisa ser <= {hi}, recebeu {value}"
    return None


def _build_section(name: str, cls: type, raw, lines, diags: list[Diagnostic]):
    line = lines.get((name,))
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        diags.append(Diagnostic(name, line, "seção precisa ser um mapeamento"))
        raw = {}
    hints = typing.get_type_hints(cls)
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in known:
            diags.append(Diagnostic(f"{name}.{key}", lines.get((name, str(key))), "chave desconhecida"))

    base = _SECTION_DEFAULTS.get(name)
    values = dataclasses.asdict(base) if base is not None else {}
    ok = True
    for fname, f in known.items():
        where = f"{name}.{fname}"
        key_line = lines.get((name, fname), line)
        required = f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING
        if fname not in raw:
            if required:
                diags.append(Diagnostic(where, line, "chave obrigatória ausente"))
                ok = False
            continue
        try:
            value = _coerce(raw[fname], hints[fname])
        except TypeError as exc:
            diags.append(Diagnostic(where, key_line, f"{exc}, recebeu {raw[fname]!r}"))
            ok = False
            continue
        choices = _CHOICES.get((name, fname))
        if choices is not None and value not in choices:
            diags.append(Diagnostic(where, key_line, f"valor {value!r} fora de {list(choices)}"))
            ok = False
            continue
        problem = _check_range((name, fname), value)
        if problem:
            diags.append(Diagnostic(where, key_line, problem))
            ok = False
            continue
        values[fname] = value
    return cls(**values) if ok else None


def _cross_checks(cfg: ExperimentConfig, lines) -> list[Diagnostic]:
    diags = []

    def add(section: str, key: str, message: str) -> None:
        diags.append(Diagnostic(f"{section}.{key}", lines.get((section, key), lines.get((section,))), message))

    for stage in cfg.run.stages:
        if stage not in STAGE_ORDER:
            add("run", "stages", f"estágio desconhecido {stage!r}; use {list(STAGE_ORDER)}")

    g = cfg.geometry
    if g.height % g.patch or g.width % g.patch:
        add("geometry", "patch", f"patch {g.patch} não divide {g.height}x{g.width}")
        return diags
    num_patches = (g.height // g.patch) * (g.width // g.patch)

    m = cfg.model
    if m.dim % m.heads:
        add("model", "heads", f"dim={m.dim} não divisível por heads={m.heads}")
    decoder_dim = m.decoder_dim or m.dim
    decoder_heads = m.decoder_heads or m.heads
    if decoder_dim % decoder_heads:
        add("model", "decoder_heads", f"decoder_dim={decoder_dim} não divisível por {decoder_heads}")

    k = cfg.federation.clients_per_round
    if k > cfg.partition.num_clients:
        add("federation", "clients_per_round", f"K={k} maior que N={cfg.partition.num_clients}")

    p = cfg.pretrain
    masked = round_half_up(p.mask_ratio, num_patches)
    if not 1 <= masked <= num_patches - 1:
        add("pretrain", "mask_ratio", f"γ={p.mask_ratio} mascara {masked} de {num_patches} patches (máscara degenerada)")
    strategy = p.mask_strategy or ("block" if p.method == "beit" else "random")
    if strategy == "block" and p.min_block > masked:
        add("pretrain", "min_block", f"min_block={p.min_block} maior que γP={masked}")
    if p.warmup_rounds > p.rounds:
        add("pretrain", "warmup_rounds", f"warmup {p.warmup_rounds} maior que rounds {p.rounds}")
    if p.lr_floor > p.lr:
        add("pretrain", "lr_floor", f"floor {p.lr_floor} maior que lr {p.lr}")
    f = cfg.finetune
    if f.warmup_rounds > f.rounds:
        add("finetune", "warmup_rounds", f"warmup {f.warmup_rounds} maior que rounds {f.rounds}")
    if f.lr_floor > f.lr:
        add("finetune", "lr_floor", f"floor {f.lr_floor} maior que lr {f.lr}")

    for section in ("pretrain_augment", "finetune_augment"):
        a: AugmentSection = getattr(cfg, section)
        if a.scale_lo > a.scale_hi:
            add(section, "scale_lo", f"scale_lo={a.scale_lo} maior que scale_hi={a.scale_hi}")
        crop_h, crop_w = (a.crop, a.crop) if a.crop else (g.height, g.width)
        if (crop_h, crop_w) != (g.height, g.width):
            add(section, "crop", f"recorte {a.crop} difere da geometria {g.height}x{g.width}")
        elif crop_h > int(a.scale_lo * g.height + 1e-9) or crop_w > int(a.scale_lo * g.width + 1e-9):
            add(section, "scale_lo", f"recorte {crop_h}x{crop_w} maior que a imagem escalada por {a.scale_lo}")

    d = cfg.data
    if d.source == "files":
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            if not getattr(d, key):
                add("data", key, "obrigatório quando source=files")
        if p.method == "beit" and not d.public_images and d.n_public_per_class == 0:
            add("data", "public_images", "BEiT precisa de um pool público para o codebook")
    if cfg.federation.semifl and cfg.federation.mu > 0:
        add("federation", "semifl", "Semi-FL e FedProx não são combinados")
    return diags


def parse_config(text: str) -> tuple[ExperimentConfig | None, list[Diagnostic]]:
    try:
        doc = yaml.safe_load(text)
        lines = _key_lines(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        return None, [Diagnostic("<yaml>", mark.line + 1 if mark else None, str(exc).splitlines()[0])]
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        return None, [Diagnostic("<raiz>", 1, "o documento precisa ser um mapeamento de seções")]

    diags: list[Diagnostic] = []
    for key in doc:
        if key not in SECTIONS:
            diags.append(Diagnostic(str(key), lines.get((str(key),)), "seção desconhecida"))

    built = {name: _build_section(name, cls, doc.get(name), lines, diags) for name, cls in SECTIONS.items()}
    if diags:
        return None, diags

    cfg = ExperimentConfig(**built)
    if cfg.partition.seed is None:
        cfg = cfg.replace("partition", seed=cfg.run.seed)
    if not cfg.pretrain.mask_strategy:
        cfg = cfg.replace("pretrain", mask_strategy="block" if cfg.pretrain.method == "beit" else "random")
    if cfg.federation.clients_per_round == 0:
        cfg = cfg.replace("federation", clients_per_round=cfg.partition.num_clients)
    cross = _cross_checks(cfg, lines)
    if cross:
        return None, cross
    try:
        cfg.image_geometry()
        cfg.model_dims()
        cfg.fed_config("pretrain")
        cfg.fed_config("finetune")
    except ContractViolation as exc:
        return None, [Diagnostic("<config>", None, str(exc))]
    return cfg, []


def validate_config(path: str | Path) -> tuple[ExperimentConfig | None, list[Diagnostic]]:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def load_config(path: str | Path) -> ExperimentConfig:
    cfg, diags = validate_config(path)
    if cfg is None:
        raise ConfigError(diags)
    return cfg


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def emit_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False, allow_unicode=True)


def write_config(cfg: ExperimentConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(emit_config(cfg), encoding="utf-8")
    return path
