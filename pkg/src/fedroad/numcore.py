"""Deterministic numeric kernel: tensors, seeded random streams, core math.

Everything downstream builds on the two types defined here. ``Tensor`` is a
shape plus a flat float64 buffer (row-major); ``RngStream`` is a counter-mode
splitmix64 generator that produces bit-identical sequences for identical
``(seed, stream_id)`` on every platform. All arithmetic is float64; narrower
widths exist only in wire formats (see :mod:`fedroad.compress`).
"""

from __future__ import annotations

from typing import Callable, Iterable, Iterator

import numpy as np

from .errors import DomainError, ShapeError

__all__ = [
    "Tensor",
    "ModelParams",
    "RngStream",
    "matmul",
    "cosine_similarity",
    "softmax_cross_entropy",
    "laplace_sample",
    "finite_difference_grad",
]

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15  # 2^64 / golden ratio, the splitmix64 increment


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------


class Tensor:
    """Immutable-by-convention dense tensor: row-major float64 buffer + shape.

    Invariants enforced on construction: dimensions non-negative (a zero
    dimension gives the empty tensor, which serializes header-only), product
    of dims equals the buffer length, and every entry is finite.
    """

    __slots__ = ("shape", "data")

    def __init__(self, shape: tuple[int, ...], data: np.ndarray, *, _check: bool = True):
        shape = tuple(int(d) for d in shape)
        data = np.asarray(data, dtype=np.float64).reshape(-1)
        if _check:
            if any(d < 0 for d in shape):
                raise ShapeError(f"negative dimension in shape {shape}")
            expect = int(np.prod(shape, dtype=np.int64)) if shape else 1
            if expect != data.size:
                raise ShapeError(f"shape {shape} needs {expect} values, got {data.size}")
            if not np.all(np.isfinite(data)):
                raise DomainError("tensor contains non-finite entries")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "data", data)

    def __setattr__(self, name, value):  # pragma: no cover - guard rail
        raise AttributeError("Tensor is immutable")

    # -- constructors -------------------------------------------------------

    @classmethod
    def from_array(cls, arr) -> "Tensor":
        a = np.asarray(arr, dtype=np.float64)
        return cls(a.shape, a.reshape(-1))

    @classmethod
    def zeros(cls, shape: Iterable[int]) -> "Tensor":
        shape = tuple(int(d) for d in shape)
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        return cls(shape, np.zeros(n), _check=False)

    # -- views --------------------------------------------------------------

    @property
    def nd(self) -> np.ndarray:
        """Row-major view of the buffer with this tensor's shape."""
        return self.data.reshape(self.shape)

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def rank(self) -> int:
        return len(self.shape)

    def copy(self) -> "Tensor":
        return Tensor(self.shape, self.data.copy(), _check=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    def allclose(self, other: "Tensor", *, rtol: float = 1e-12, atol: float = 1e-12) -> bool:
        return self.shape == other.shape and bool(
            np.allclose(self.data, other.data, rtol=rtol, atol=atol)
        )


class ModelParams:
    """Ordered named collection of tensors (the omega of a whole model)."""

    __slots__ = ("_items",)

    def __init__(self, items: dict[str, Tensor] | Iterable[tuple[str, Tensor]]):
        self._items: dict[str, Tensor] = dict(items)

    def names(self) -> list[str]:
        return list(self._items)

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __len__(self) -> int:
        return len(self._items)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._items.items())

    @property
    def total_elements(self) -> int:
        return sum(t.size for t in self._items.values())

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self._items.items()})

    def _zip(self, other: "ModelParams") -> Iterator[tuple[str, Tensor, Tensor]]:
        if self.names() != other.names():
            raise ShapeError("parameter collections have different names")
        for name, t in self._items.items():
            o = other._items[name]
            if o.shape != t.shape:
                raise ShapeError(f"shape mismatch for '{name}': {t.shape} vs {o.shape}")
            yield name, t, o

    def add(self, other: "ModelParams") -> "ModelParams":
        return ModelParams(
            {n: Tensor(a.shape, a.data + b.data, _check=False) for n, a, b in self._zip(other)}
        )

    def sub(self, other: "ModelParams") -> "ModelParams":
        return ModelParams(
            {n: Tensor(a.shape, a.data - b.data, _check=False) for n, a, b in self._zip(other)}
        )

    def scale(self, c: float) -> "ModelParams":
        return ModelParams(
            {n: Tensor(t.shape, t.data * c, _check=False) for n, t in self._items.items()}
        )

    def zeros_like(self) -> "ModelParams":
        return ModelParams({n: Tensor.zeros(t.shape) for n, t in self._items.items()})

    def allclose(self, other: "ModelParams", *, rtol: float = 1e-12, atol: float = 1e-12) -> bool:
        return self.names() == other.names() and all(
            a.allclose(b, rtol=rtol, atol=atol) for _, a, b in self._zip(other)
        )


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------


def _mix64(z: int) -> int:
    """splitmix64 finalizer (xorshift-multiply avalanche) on a 64-bit word."""
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _mix64_np(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


class RngStream:
    """Counter-mode splitmix64 stream.

    The i-th raw draw is ``mix64(key + i * GOLDEN)`` where ``key`` is derived
    from ``(seed, stream_id)`` by the same finalizer and ``mix64`` is the
    splitmix64 xorshift-multiply avalanche. The only mutable state is the
    draw counter, so a stream is reproducible from ``(seed, stream_id)``
    alone and distinct stream ids give statistically independent streams.

    A stream must not be shared between logical actors; derive children with
    :meth:`spawn` instead.
    """

    __slots__ = ("seed", "stream_id", "_key", "_counter")

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = seed & _MASK64
        self.stream_id = stream_id & _MASK64
        self._key = _mix64(self.seed ^ _mix64(self.stream_id + _GOLDEN))
        self._counter = 0

    def spawn(self, *tags: int) -> "RngStream":
        """Child stream with an id derived by hashing `tags` into this id."""
        sid = self.stream_id
        for t in tags:
            sid = _mix64(sid ^ _mix64((t & _MASK64) + _GOLDEN))
        return RngStream(self.seed, sid)

    # -- raw draws ----------------------------------------------------------

    def u64(self) -> int:
        self._counter += 1
        return _mix64(self._key + self._counter * _GOLDEN)

    def u64_array(self, n: int) -> np.ndarray:
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        return _mix64_np(np.uint64(self._key) + idx * np.uint64(_GOLDEN))

    # -- uniform variates ---------------------------------------------------

    def uniform01(self) -> float:
        """Uniform draw in the half-open interval [0, 1), 53-bit resolution."""
        return (self.u64() >> 11) * 2.0**-53

    def uniform01_array(self, n: int) -> np.ndarray:
        return (self.u64_array(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def open01(self) -> float:
        """Uniform draw in the open interval (0, 1)."""
        return ((self.u64() >> 12) + 0.5) * 2.0**-52

    def open01_array(self, n: int) -> np.ndarray:
        return ((self.u64_array(n) >> np.uint64(12)).astype(np.float64) + 0.5) * 2.0**-52

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n). Bias from the float path is < 2^-53."""
        return min(int(self.uniform01() * n), n - 1)

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic permutation of range(n) (one uniform per slot)."""
        return np.argsort(self.uniform01_array(n), kind="stable")

    # -- shaped variates ----------------------------------------------------

    def laplace(self, scale: float) -> float:
        return laplace_sample(scale, self)

    def laplace_array(self, scale: float, n: int) -> np.ndarray:
        if scale <= 0:
            raise DomainError(f"laplace scale must be positive, got {scale}")
        u = self.open01_array(n) - 0.5
        return -scale * np.sign(u) * np.log1p(-2.0 * np.abs(u))

    def normal_array(self, n: int) -> np.ndarray:
        """Standard normals via Box-Muller (two uniforms per variate)."""
        u1 = self.open01_array(n)
        u2 = self.uniform01_array(n)
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


# ---------------------------------------------------------------------------
# Math primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a 2-D [m x k] tensor with a 2-D [k x n] tensor."""
    if a.rank != 2 or b.rank != 2:
        raise ShapeError(f"matmul needs rank-2 tensors, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    return Tensor.from_array(a.nd @ b.nd)


def cosine_similarity(u: Tensor, v: Tensor) -> float:
    """dot(u, v) / (||u|| * ||v||) for 1-D tensors of equal length."""
    if u.rank != 1 or v.rank != 1 or u.shape != v.shape:
        raise ShapeError(f"cosine_similarity needs equal 1-D shapes, got {u.shape}, {v.shape}")
    nu = float(np.linalg.norm(u.data))
    nv = float(np.linalg.norm(v.data))
    if nu == 0.0 or nv == 0.0:
        raise DomainError("cosine_similarity is undefined for zero-norm input")
    return float(np.dot(u.data, v.data) / (nu * nv))


def softmax_cross_entropy(logits: Tensor, label: int) -> tuple[float, Tensor]:
    """Stabilized cross-entropy loss and its gradient w.r.t. the logits.

    Returns ``(-log softmax(logits)[label], softmax(logits) - onehot(label))``.
    """
    if logits.rank != 1:
        raise ShapeError(f"logits must be 1-D, got shape {logits.shape}")
    c = logits.size
    if not 0 <= label < c:
        raise IndexError(f"label {label} out of range for {c} classes")
    z = logits.data - np.max(logits.data)
    ez = np.exp(z)
    denom = float(np.sum(ez))
    probs = ez / denom
    loss = float(np.log(denom) - z[label])
    grad = probs.copy()
    grad[label] -= 1.0
    return loss, Tensor((c,), grad, _check=False)


def laplace_sample(scale: float, rng: RngStream) -> float:
    """One Laplace(0, scale) draw via the inverse CDF.

    x = -scale * sign(u) * ln(1 - 2|u|) with u uniform in (-0.5, 0.5); exactly
    one stream draw per sample, so sequences are reproducible draw-for-draw.
    """
    if scale <= 0:
        raise DomainError(f"laplace scale must be positive, got {scale}")
    u = rng.open01() - 0.5
    # np.log1p/np.sign rather than math.*: the array path must agree bitwise.
    return float(-scale * np.sign(u) * np.log1p(-2.0 * np.abs(u)))


def finite_difference_grad(f: Callable[[Tensor], float], x: Tensor, h: float) -> Tensor:
    """Central-difference gradient of a scalar function, coordinate by coordinate."""
    if h <= 0:
        raise DomainError(f"step size must be positive, got {h}")
    flat = x.data
    out = np.empty_like(flat)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + h
        fp = f(Tensor(x.shape, bumped, _check=False))
        bumped[i] = flat[i] - h
        fm = f(Tensor(x.shape, bumped, _check=False))
        out[i] = (fp - fm) / (2.0 * h)
    return Tensor(x.shape, out, _check=False)
