"""Autodiferenciação reversa mínima sobre arrays numpy, AdamW e agenda de learning rate."""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import ContractViolation

_grad_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Suspende a construção do grafo na thread corrente."""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: str | None = None,
        dtype=None,
    ):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._op = ""

    # ------------------------------------------------------------------
    # Propriedades
    # ------------------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    # ------------------------------------------------------------------
    # Operadores
    # ------------------------------------------------------------------
    def __add__(self, other) -> Tensor:
        return add(self, other)

    def __radd__(self, other) -> Tensor:
        return add(_lift(other, self), self)

    def __sub__(self, other) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other) -> Tensor:
        return sub(_lift(other, self), self)

    def __mul__(self, other) -> Tensor:
        return mul(self, other)

    def __rmul__(self, other) -> Tensor:
        return mul(_lift(other, self), self)

    def __truediv__(self, other) -> Tensor:
        return div(self, other)

    def __neg__(self) -> Tensor:
        return neg(self)

    def __matmul__(self, other) -> Tensor:
        return matmul(self, other)

    def transpose(self, *axes: int) -> Tensor:
        return transpose(self, axes or None)

    def reshape(self, *shape: int) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis=axis, keepdims=keepdims)

    def square(self) -> Tensor:
        return square(self)

    def log(self) -> Tensor:
        return log(self)

    def exp(self) -> Tensor:
        return exp(self)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward: BackwardFn, op: str) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _swap_last(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


# ----------------------------------------------------------------------
# Primitivas
# ----------------------------------------------------------------------
def add(a: Tensor, b) -> Tensor:
    b = _lift(b, a)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a: Tensor, b) -> Tensor:
    b = _lift(b, a)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward, "sub")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a: Tensor, b) -> Tensor:
    b = _lift(b, a)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a: Tensor, b) -> Tensor:
    b = _lift(b, a)

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _result(a.data / b.data, (a, b), backward, "div")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ContractViolation(f"matmul exige rank >= 2: {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ContractViolation(f"matmul com dimensões incompatíveis: {a.shape} @ {b.shape}")

    def backward(g):
        return (
            _unbroadcast(g @ _swap_last(b.data), a.shape),
            _unbroadcast(_swap_last(a.data) @ g, b.shape),
        )

    return _result(a.data @ b.data, (a, b), backward, "matmul")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    perm = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(perm))
    return _result(np.transpose(a.data, perm), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    original = a.shape
    return _result(a.data.reshape(tuple(shape)), (a,), lambda g: (g.reshape(original),), "reshape")


def take(a: Tensor, index: np.ndarray) -> Tensor:
    """Seleciona linhas do eixo 0: `out = a[index]` (index de qualquer shape)."""
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= a.shape[0]):
        raise ContractViolation(f"índice fora da faixa [0, {a.shape[0]}) em take")

    def backward(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, index, g)
        return (grad,)

    return _result(a.data[index], (a,), backward, "take")


def take_along(a: Tensor, index: np.ndarray) -> Tensor:
    """Gather por amostra no eixo 1: `out[b, k] = a[b, index[b, k]]`."""
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 2 or index.shape[0] != a.shape[0]:
        raise ContractViolation(f"take_along espera índice (B, K) com B={a.shape[0]}, recebeu {index.shape}")
    if index.size and (index.min() < 0 or index.max() >= a.shape[1]):
        raise ContractViolation(f"índice fora da faixa [0, {a.shape[1]}) em take_along")
    rows = np.arange(a.shape[0])[:, None]

    def backward(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, (rows, index), g)
        return (grad,)

    return _result(a.data[rows, index], (a,), backward, "take_along")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ContractViolation("concat de lista vazia")
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _result(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tensor_sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def square(a: Tensor) -> Tensor:
    return _result(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (out * g,), "exp")


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (a,), backward, "softmax")


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """LayerNorm no último eixo com afim aprendível."""
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    n = x.shape[-1]

    def backward(g):
        dxhat = g * weight.data
        dx = (inv / n) * (
            n * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        return dx, _unbroadcast(g * xhat, weight.shape), _unbroadcast(g, bias.shape)

    return _result(xhat * weight.data + bias.data, (x, weight, bias), backward, "layer_norm")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    # forma tanh
    u = _GELU_C * (x.data + 0.044715 * x.data**3)
    t = np.tanh(u)
    out = 0.5 * x.data * (1.0 + t)

    def backward(g):
        du = _GELU_C * (1.0 + 3.0 * 0.044715 * x.data**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du),)

    return _result(out, (x,), backward, "gelu")


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Média de -log softmax(logits)[target] sobre todas as posições."""
    targets = np.asarray(targets)
    k = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ContractViolation(f"targets {targets.shape} incompatível com logits {logits.shape}")
    if not np.issubdtype(targets.dtype, np.integer):
        raise ContractViolation(f"targets devem ser inteiros, recebeu {targets.dtype}")
    if targets.size and (targets.min() < 0 or targets.max() >= k):
        raise ContractViolation(f"target fora da faixa [0, {k})")
    if targets.size == 0:
        raise ContractViolation("cross_entropy sem posições")

    flat = logits.data.reshape(-1, k)
    flat_t = targets.reshape(-1)
    n = flat.shape[0]
    shifted = flat - flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(lse - shifted[rows, flat_t])

    def backward(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, flat_t] -= 1.0
        return ((g / n) * p.reshape(logits.shape),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")


# ----------------------------------------------------------------------
# Reverse mode
# ----------------------------------------------------------------------
def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = em expansão, 2 = concluído
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = 2
            order.append(node)
            continue
        status = state.get(key, 0)
        if status == 2:
            continue
        if status == 1:
            raise RuntimeError(f"Ciclo detectado no grafo de computação (op={node._op!r})")
        state[key] = 1
        stack.append((node, True))
        for parent in reversed(node._parents):
            parent_status = state.get(id(parent), 0)
            if parent_status == 1:
                raise RuntimeError(f"Ciclo detectado no grafo de computação (op={parent._op!r})")
            if parent_status == 0:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Acumula d(loss)/d(param) em `.grad` de todo tensor folha com requires_grad."""
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        shape = getattr(loss, "shape", None)
        raise ContractViolation(f"backward exige um escalar, recebeu shape {shape}")
    if not loss.requires_grad:
        return

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.array(g, dtype=node.data.dtype).reshape(node.shape)
                else:
                    node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ----------------------------------------------------------------------
# Otimizador e agenda
# ----------------------------------------------------------------------
@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: Mapping[str, Tensor], state: OptimizerState, lr: float) -> None:
    """Um passo AdamW com weight decay desacoplado (aplicado antes do passo adaptativo).

    Os gradientes não são alterados; zere-os explicitamente entre batches.
    """
    if lr < 0:
        raise ContractViolation(f"learning rate negativo: {lr}")
    items = list(params.items())
    for name, p in items:
        if p.grad is None:
            raise ContractViolation(f"Parâmetro sem gradiente: {name}")

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1**t
    bias2 = 1.0 - b2**t

    for name, p in items:
        g = p.grad
        m = state.exp_avg.get(name)
        v = state.exp_avg_sq.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        elif m.shape != p.shape:
            raise ContractViolation(f"Acumulador de {name} com shape {m.shape}, parâmetro {p.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.exp_avg[name] = m
        state.exp_avg_sq[name] = v

        if state.weight_decay:
            p.data *= 1.0 - lr * state.weight_decay
        p.data -= lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)


@dataclass(frozen=True)
class Schedule:
    base_lr: float
    warmup: int
    total: int
    floor: float = 0.0

    def __post_init__(self):
        if not 0 <= self.warmup <= self.total:
            raise ContractViolation(f"Agenda inválida: warmup={self.warmup}, total={self.total}")
        if self.floor > self.base_lr:
            raise ContractViolation(f"floor ({self.floor}) maior que base_lr ({self.base_lr})")


def schedule_at(s: Schedule, t: int) -> float:
    """Rampa linear 0→η no warmup e cosseno de η até floor em t=total."""
    if t < 0 or t > s.total:
        raise ContractViolation(f"Passo {t} fora da agenda [0, {s.total}]")
    if t < s.warmup:
        return s.base_lr * t / s.warmup
    span = s.total - s.warmup
    if span == 0:
        return s.base_lr
    progress = (t - s.warmup) / span
    return s.floor + (s.base_lr - s.floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


# ----------------------------------------------------------------------
# Verificação por diferenças finitas
# ----------------------------------------------------------------------
def _evaluate(closure: Callable[[], Tensor]) -> float:
    with no_grad():
        value = float(closure().data)
    if not math.isfinite(value):
        raise FloatingPointError(f"Loss não finita durante grad_check: {value}")
    return value


def grad_check(
    closure: Callable[[], Tensor],
    params: Mapping[str, Tensor] | Iterable[tuple[str, Tensor]],
    eps: float = 1e-5,
    samples_per_param: int | None = 4,
    floor: float = 1e-12,
    seed: int = 0,
) -> float:
    """Maior erro relativo entre gradiente analítico e diferença central.

    erro = |analítico - fd| / max(|analítico|, |fd|, floor), sobre coordenadas amostradas
    (todas quando samples_per_param=None).
    """
    items = list(params.items()) if isinstance(params, Mapping) else list(params)
    for name, p in items:
        if p.data.dtype != np.float64:
            raise ContractViolation(f"grad_check exige float64; {name} é {p.data.dtype}")
        p.grad = None

    loss = closure()
    if not math.isfinite(float(loss.data)):
        raise FloatingPointError(f"Loss não finita: {float(loss.data)}")
    backward(loss)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for _, p in items:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        n = p.data.size
        k = n if samples_per_param is None else min(samples_per_param, n)
        coords = np.sort(rng.choice(n, size=k, replace=False))
        for flat in coords:
            idx = np.unravel_index(int(flat), p.shape)
            original = p.data[idx]
            p.data[idx] = original + eps
            plus = _evaluate(closure)
            p.data[idx] = original - eps
            minus = _evaluate(closure)
            p.data[idx] = original
            fd = (plus - minus) / (2.0 * eps)
            a = float(analytic[idx])
            worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), floor))
    return worst
