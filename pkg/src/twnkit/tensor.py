"""Dense float32 tensors, shape checks, and a counter-based deterministic RNG.

Everything downstream (quantizer, kernels, nn, trainer) stores values as flat
row-major float32 arrays attached to an explicit Shape. The RNG is a
splitmix64 stream indexed by a counter, so the uint64 word at position k
depends only on (seed, stream, k): identical seeds reproduce identical
tensors regardless of platform for the integer and uniform paths.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatch

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


@dataclass(frozen=True)
class Shape:
    """Integer dimensions; element count is their product.

    Stored tensors always have dims >= 1; a zero dim is allowed only so
    degenerate runtime cases (an empty batch) stay representable.
    """

    dims: tuple[int, ...]

    def __init__(self, dims):
        dims = tuple(int(d) for d in dims)
        if not dims or any(d < 0 for d in dims):
            raise ValueError(f"shape dims must be non-negative, got {dims}")
        object.__setattr__(self, "dims", dims)

    @property
    def size(self) -> int:
        n = 1
        for d in self.dims:
            n *= d
        return n

    def __iter__(self):
        return iter(self.dims)

    def __len__(self):
        return len(self.dims)

    def __str__(self):
        return "x".join(str(d) for d in self.dims)


@dataclass
class DenseTensor:
    """Flat row-major float32 values with an attached Shape."""

    shape: Shape
    values: np.ndarray

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32).ravel()
        if self.values.size != self.shape.size:
            raise ShapeMismatch(
                f"{self.values.size} values for shape {self.shape} "
                f"({self.shape.size} expected)"
            )

    @classmethod
    def from_array(cls, arr) -> "DenseTensor":
        arr = np.asarray(arr, dtype=np.float32)
        return cls(Shape(arr.shape if arr.ndim else (1,)), arr)

    @classmethod
    def vector(cls, values) -> "DenseTensor":
        arr = np.asarray(values, dtype=np.float32).ravel()
        return cls(Shape((arr.size,)), arr)

    def nd(self) -> np.ndarray:
        """View of the values in the tensor's logical n-d shape."""
        return self.values.reshape(self.shape.dims)

    @property
    def size(self) -> int:
        return self.shape.size


def as_flat_f32(weights) -> np.ndarray:
    """Accept a DenseTensor or any array-like; return a flat float32 array."""
    if isinstance(weights, DenseTensor):
        return weights.values
    return np.asarray(weights, dtype=np.float32).ravel()


def _mix64(z: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer (Steele, Lea & Flood); uint64 wraparound throughout
    z = z.astype(np.uint64, copy=True)
    z ^= z >> np.uint64(30)
    z *= _MIX1
    z ^= z >> np.uint64(27)
    z *= _MIX2
    z ^= z >> np.uint64(31)
    return z


@dataclass
class Rng:
    """Counter-based splitmix64 stream.

    Word k of stream s under seed q is mix64(base(q, s) + GOLDEN * (k + 1)),
    where base diffuses seed and stream through the same finalizer. Drawing n
    words advances the counter by n; independent streams never collide.
    """

    seed: int
    stream: int = 0
    counter: int = field(default=0)

    def __post_init__(self):
        base = _mix64(np.array([self.seed], dtype=np.uint64))
        base ^= np.uint64(self.stream & 0xFFFFFFFFFFFFFFFF)
        self._base = _mix64(base)[0]

    def spawn(self, stream: int) -> "Rng":
        """Fresh stream under the same seed (counter starts at 0)."""
        return Rng(self.seed, stream)

    def next_u64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        return _mix64(self._base + _GOLDEN * idx)

    def next_unit(self, n: int) -> np.ndarray:
        """n float64 values in [0, 1): top 53 bits of each word, exactly scaled."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def uniform(self, n: int, a: float) -> np.ndarray:
        """n float32 values uniform on [-a, a]."""
        u = self.next_unit(n)
        return ((2.0 * u - 1.0) * a).astype(np.float32)

    def normal(self, n: int, sigma: float = 1.0) -> np.ndarray:
        """n float32 values from N(0, sigma^2) via Box-Muller pairs."""
        pairs = (n + 1) // 2
        w = self.next_u64(2 * pairs)
        u1 = ((w[:pairs] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53  # (0, 1]
        u2 = (w[pairs:] >> np.uint64(11)).astype(np.float64) * 2.0**-53  # [0, 1)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = (2.0 * np.pi) * u2
        z = np.empty(2 * pairs, dtype=np.float64)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return (sigma * z[:n]).astype(np.float32)

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic permutation of range(n) by sorting u64 keys."""
        return np.argsort(self.next_u64(n), kind="stable").astype(np.int64)


def zeros(shape: Shape) -> DenseTensor:
    return DenseTensor(shape, np.zeros(shape.size, dtype=np.float32))


def sample_uniform(rng: Rng, shape: Shape, a: float) -> DenseTensor:
    """Values uniform on [-a, a], a > 0."""
    if not a > 0:
        raise ValueError(f"uniform half-width must be > 0, got {a}")
    return DenseTensor(shape, rng.uniform(shape.size, a))


def sample_normal(rng: Rng, shape: Shape, sigma: float) -> DenseTensor:
    """Values from N(0, sigma^2), sigma > 0."""
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    return DenseTensor(shape, rng.normal(shape.size, sigma))


def _check_same_shape(x: DenseTensor, y: DenseTensor):
    if x.shape.dims != y.shape.dims:
        raise ShapeMismatch(f"{x.shape} vs {y.shape}")


def _finite(values: np.ndarray) -> np.ndarray:
    if not np.isfinite(values).all():
        raise ValueError("elementwise result contains NaN/Inf")
    return values


def add(x: DenseTensor, y: DenseTensor) -> DenseTensor:
    _check_same_shape(x, y)
    return DenseTensor(x.shape, _finite(x.values + y.values))


def sub(x: DenseTensor, y: DenseTensor) -> DenseTensor:
    _check_same_shape(x, y)
    return DenseTensor(x.shape, _finite(x.values - y.values))


def mul(x: DenseTensor, y: DenseTensor) -> DenseTensor:
    _check_same_shape(x, y)
    return DenseTensor(x.shape, _finite(x.values * y.values))


def axpy(alpha: float, x: DenseTensor, y: DenseTensor) -> DenseTensor:
    """alpha*x + y, single-precision per element."""
    _check_same_shape(x, y)
    return DenseTensor(x.shape, _finite(np.float32(alpha) * x.values + y.values))


def map_values(fn, x: DenseTensor) -> DenseTensor:
    return DenseTensor(x.shape, _finite(np.asarray(fn(x.values), dtype=np.float32)))
