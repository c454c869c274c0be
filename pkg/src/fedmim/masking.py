"""Planos de máscara: aleatório (MAE) e por blocos (BEiT)."""

from __future__ import annotations

import math
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from .errors import ContractViolation

MAX_BLOCK_ATTEMPTS = 10_000


def round_half_up(ratio: float, count: int) -> int:
    """round-half-up(ratio * count) sobre a representação decimal de `ratio`."""
    value = Decimal(repr(float(ratio))) * count
    return int(value.to_integral_value(rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class MaskPlan:
    ratio: float
    masked: np.ndarray
    visible: np.ndarray
    grid: tuple[int, int]

    def __post_init__(self):
        total = self.grid[0] * self.grid[1]
        masked = np.asarray(self.masked, dtype=np.int64)
        visible = np.asarray(self.visible, dtype=np.int64)
        object.__setattr__(self, "masked", masked)
        object.__setattr__(self, "visible", visible)
        if np.any(np.diff(masked) <= 0) or np.any(np.diff(visible) <= 0):
            raise ContractViolation("Índices de máscara devem ser estritamente crescentes")
        both = np.concatenate([masked, visible])
        if both.size != total or not np.array_equal(np.sort(both), np.arange(total)):
            raise ContractViolation(
                f"M e V não particionam {{0..{total - 1}}}: |M|={masked.size}, |V|={visible.size}"
            )

    @property
    def num_patches(self) -> int:
        return self.grid[0] * self.grid[1]

    @classmethod
    def from_masked(cls, masked, grid: tuple[int, int], ratio: float) -> MaskPlan:
        total = grid[0] * grid[1]
        masked = np.unique(np.asarray(masked, dtype=np.int64))
        visible = np.setdiff1d(np.arange(total), masked)
        return cls(ratio=ratio, masked=masked, visible=visible, grid=grid)

    @classmethod
    def unmasked(cls, grid: tuple[int, int]) -> MaskPlan:
        return cls.from_masked(np.empty(0, dtype=np.int64), grid, 0.0)

    def mask_grid(self) -> np.ndarray:
        out = np.zeros(self.num_patches, dtype=bool)
        out[self.masked] = True
        return out.reshape(self.grid)


def _square_grid(num_patches: int) -> tuple[int, int]:
    side = math.isqrt(num_patches)
    return (side, side) if side * side == num_patches else (1, num_patches)


def _target_count(num_patches: int, ratio: float) -> int:
    if not 0.0 < ratio < 1.0:
        raise ContractViolation(f"Razão de máscara fora de (0, 1): {ratio}")
    n = round_half_up(ratio, num_patches)
    if not 1 <= n <= num_patches - 1:
        raise ContractViolation(
            f"Razão de máscara degenerada: round({ratio}·{num_patches}) = {n} (precisa 1..{num_patches - 1})"
        )
    return n


def random_mask(
    num_patches: int,
    ratio: float,
    rng: np.random.Generator,
    grid: tuple[int, int] | None = None,
) -> MaskPlan:
    grid = grid or _square_grid(num_patches)
    if grid[0] * grid[1] != num_patches:
        raise ContractViolation(f"Grade {grid} incompatível com P={num_patches}")
    n = _target_count(num_patches, ratio)
    masked = np.sort(rng.choice(num_patches, size=n, replace=False))
    return MaskPlan.from_masked(masked, grid, ratio)


@dataclass(frozen=True)
class Block:
    top: int
    left: int
    height: int
    width: int

    def cells(self, cols: int) -> np.ndarray:
        rr, cc = np.meshgrid(
            np.arange(self.top, self.top + self.height),
            np.arange(self.left, self.left + self.width),
            indexing="ij",
        )
        return (rr * cols + cc).reshape(-1)


def sample_mask_blocks(
    grid: tuple[int, int],
    target: int,
    rng: np.random.Generator,
    min_block: int = 4,
    max_aspect: float = 3.0,
) -> tuple[list[Block], np.ndarray]:
    """Une retângulos aleatórios até cobrir `target` patches.

    Retorna os blocos e a ordem em que cada patch entrou na máscara; o último bloco
    pode ultrapassar o alvo.
    """
    rows, cols = grid
    log_aspect = (math.log(1.0 / max_aspect), math.log(max_aspect))
    covered = np.zeros(rows * cols, dtype=bool)
    order: list[int] = []
    blocks: list[Block] = []
    attempts = 0
    while len(order) < target:
        attempts += 1
        if attempts > MAX_BLOCK_ATTEMPTS:
            raise RuntimeError(f"Amostrador de blocos não convergiu para {target} patches em {grid}")
        remaining = target - len(order)
        area = rng.uniform(min_block, max(min_block, remaining))
        aspect = math.exp(rng.uniform(*log_aspect))
        h = max(1, int(round(math.sqrt(area * aspect))))
        w = max(1, int(round(math.sqrt(area / aspect))))
        if h > rows or w > cols or h * w < min_block or max(h / w, w / h) > max_aspect:
            continue
        top = int(rng.integers(0, rows - h + 1))
        left = int(rng.integers(0, cols - w + 1))
        block = Block(top, left, h, w)
        fresh = [int(c) for c in block.cells(cols) if not covered[c]]
        if not fresh:
            continue
        covered[fresh] = True
        order.extend(fresh)
        blocks.append(block)
    return blocks, np.asarray(order, dtype=np.int64)


def blockwise_mask(
    grid: tuple[int, int],
    ratio: float,
    rng: np.random.Generator,
    min_block: int = 4,
    max_aspect: float = 3.0,
) -> MaskPlan:
    """Máscara por blocos com |M| = round-half-up(γP) exato.

    O excesso do último bloco é removido a partir dos patches mais recentes (ordem row-major).
    """
    rows, cols = grid
    if rows < 1 or cols < 1:
        raise ContractViolation(f"Grade inválida: {grid}")
    if max_aspect < 1.0:
        raise ContractViolation(f"max_aspect deve ser >= 1: {max_aspect}")
    num_patches = rows * cols
    target = _target_count(num_patches, ratio)
    if min_block > target:
        raise ContractViolation(f"min_block={min_block} maior que γP={target}")
    _, order = sample_mask_blocks(grid, target, rng, min_block, max_aspect)
    return MaskPlan.from_masked(order[:target], grid, ratio)


def make_mask(
    strategy: str,
    grid: tuple[int, int],
    ratio: float,
    rng: np.random.Generator,
    min_block: int = 4,
    max_aspect: float = 3.0,
) -> MaskPlan:
    if strategy == "random":
        return random_mask(grid[0] * grid[1], ratio, rng, grid=grid)
    if strategy == "block":
        return blockwise_mask(grid, ratio, rng, min_block=min_block, max_aspect=max_aspect)
    raise ContractViolation(f"Estratégia de máscara desconhecida: {strategy}")
