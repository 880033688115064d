"""Dense float64 kernel: tensors, parameter store, SGD, seeded RNG, finite differences.

Tensors are plain 2-D ``numpy.ndarray`` objects of dtype float64. Everything
here is deterministic: the same inputs and seeds give the same bytes.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Iterator, Sequence
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError

MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


# --------------------------------------------------------------------------
# Random numbers
# --------------------------------------------------------------------------

def splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step. Returns ``(new_state, output)``."""
    state = (state + _GOLDEN) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def derive_seed(seed: int, *keys: int | str) -> int:
    """Mix ``seed`` with a path of integer/string keys into a new 64-bit seed.

    Used to give every client, tensor and schedule its own independent stream
    while keeping everything a function of one experiment seed.
    """
    state = seed & MASK64
    state, out = splitmix64(state)
    for key in keys:
        if isinstance(key, str):
            for byte in key.encode("utf-8"):
                state, out = splitmix64(state ^ out ^ byte)
            state, out = splitmix64(state ^ out ^ 0xFF)
        else:
            state, out = splitmix64(state ^ out ^ (int(key) & MASK64))
    return out


class SeededRng:
    """64-bit xorshift generator whose state is seeded through splitmix64."""

    def __init__(self, seed: int):
        _, state = splitmix64(seed & MASK64)
        self.state = state or _GOLDEN

    def next_u64(self) -> int:
        x = self.state
        x ^= (x << 13) & MASK64
        x ^= x >> 7
        x ^= (x << 17) & MASK64
        self.state = x
        return x

    def random(self) -> float:
        """Uniform double in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (1.0 / 9007199254740992.0)

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def randrange(self, n: int) -> int:
        if n <= 0:
            raise ValueError("randrange bound must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randrange(i + 1)
            items[i], items[j] = items[j], items[i]

    def permutation(self, n: int) -> list[int]:
        order = list(range(n))
        self.shuffle(order)
        return order


# --------------------------------------------------------------------------
# Tensor kernels
# --------------------------------------------------------------------------

def tensor(values, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Build a 2-D float64 tensor from nested sequences or a flat row-major list."""
    arr = np.array(values, dtype=np.float64)
    if rows is not None and cols is not None:
        if arr.size != rows * cols:
            raise ShapeError(f"{arr.size} values cannot fill a ({rows}, {cols}) tensor")
        arr = arr.reshape(rows, cols)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"tensors are 2-D, got {arr.ndim}-D input")
    return arr


def zeros(rows: int, cols: int) -> np.ndarray:
    return np.zeros((rows, cols), dtype=np.float64)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Logistic function, evaluated without overflow for large |x|."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tanh_act(x: np.ndarray) -> np.ndarray:
    return np.tanh(np.asarray(x, dtype=np.float64))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


# --------------------------------------------------------------------------
# Parameters
# --------------------------------------------------------------------------

@dataclass
class ParamEntry:
    name: str
    value: np.ndarray
    grad: np.ndarray


class ParamStore:
    """Ordered, uniquely named tensors with paired gradient buffers.

    Values are updated in place so references handed out by :meth:`value`
    stay valid across SGD steps and :meth:`load`.
    """

    def __init__(self) -> None:
        self._entries: dict[str, ParamEntry] = {}

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self._entries:
            raise ConfigError(f"duplicate parameter name {name!r}")
        value = np.array(value, dtype=np.float64)
        if value.ndim != 2:
            raise ShapeError(f"parameter {name!r} must be 2-D, got shape {value.shape}")
        self._entries[name] = ParamEntry(name, value, np.zeros_like(value))
        return value

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[ParamEntry]:
        return iter(self._entries.values())

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    @property
    def names(self) -> list[str]:
        return list(self._entries)

    def value(self, name: str) -> np.ndarray:
        return self._entries[name].value

    def grad(self, name: str) -> np.ndarray:
        return self._entries[name].grad

    def manifest(self) -> list[tuple[str, int, int]]:
        return [(e.name, e.value.shape[0], e.value.shape[1]) for e in self]

    def values(self) -> list[np.ndarray]:
        """Copies of all values in canonical order."""
        return [e.value.copy() for e in self]

    def grads(self) -> list[np.ndarray]:
        return [e.grad.copy() for e in self]

    def load(self, values: Sequence[np.ndarray]) -> None:
        if len(values) != len(self._entries):
            raise ShapeError(f"expected {len(self._entries)} tensors, got {len(values)}")
        for entry, new in zip(self, values):
            new = np.asarray(new, dtype=np.float64)
            if new.shape != entry.value.shape:
                raise ShapeError(
                    f"parameter {entry.name!r}: shape {new.shape} does not match {entry.value.shape}"
                )
            entry.value[...] = new

    def zero_grad(self) -> None:
        for entry in self:
            entry.grad.fill(0.0)

    def num_values(self) -> int:
        return sum(e.value.size for e in self)


def sgd_step(params: ParamStore, lr: float) -> ParamStore:
    """Apply ``w <- w - lr * g`` to every parameter, then zero the gradients.

    ``lr == 0`` is accepted and leaves the values untouched.
    """
    if not math.isfinite(lr) or lr < 0:
        raise ConfigError(f"learning rate must be a non-negative finite number, got {lr!r}")
    for entry in params:
        if lr != 0.0:
            entry.value -= lr * entry.grad
        entry.grad.fill(0.0)
    return params


def numeric_gradient(
    f: Callable[[ParamStore], float], params: ParamStore, eps: float = 1e-5
) -> dict[str, np.ndarray]:
    """Central finite-difference gradient of scalar ``f`` w.r.t. every component.

    Test oracle only; costs two evaluations of ``f`` per component.
    """
    if eps <= 0:
        raise ConfigError("eps must be positive")
    out: dict[str, np.ndarray] = {}
    for entry in params:
        w = entry.value
        g = np.zeros_like(w)
        flat = w.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = f(params)
            flat[i] = orig - eps
            f_minus = f(params)
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * eps)
        out[entry.name] = g
    return out


def seeded_init(shape: tuple[int, int], seed: int, scheme: str = "uniform-scaled",
                fan_in: int | None = None) -> np.ndarray:
    """Deterministic initial tensor.

    ``uniform-scaled`` draws each value from U(-1/sqrt(fan_in), 1/sqrt(fan_in)),
    with ``fan_in`` defaulting to the number of columns; ``zeros`` is all zeros.
    """
    rows, cols = shape
    if scheme == "zeros":
        return zeros(rows, cols)
    if scheme != "uniform-scaled":
        raise ConfigError(f"unknown init scheme {scheme!r}")
    bound = 1.0 / math.sqrt(fan_in if fan_in is not None else cols)
    rng = SeededRng(seed)
    flat = [rng.uniform(-bound, bound) for _ in range(rows * cols)]
    return np.array(flat, dtype=np.float64).reshape(rows, cols)
