"""Ternary linear algebra without multiplications, plus dense reference kernels.

The ternary kernels accumulate activations by add/subtract/skip according to
the codes and apply each group's scale exactly once per output element; an
optional OpCounter records the adds actually performed and the scale
multiplies. The reference kernels compute the same contraction densely
(matmul / im2col) and double as the full-precision baseline path and the
correctness oracle for the ternary kernels.

All kernels take float32 operands, accumulate in float64 with a fixed
deterministic order, and return float32. Shared accumulation precision keeps
the two routes within 1e-5 of each other even at cancellation points.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch
from .packfmt import PackedTernaryTensor, unpack
from .tensor import DenseTensor, Rng, Shape


@dataclass
class TernaryOperandView:
    """Unpacked codes with their scale grouping and logical shape."""

    codes: np.ndarray  # int8, logical n-d shape
    alphas: np.ndarray  # float32, length 1 (per tensor) or leading dim (per row/channel)

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int8)
        self.alphas = np.asarray(self.alphas, dtype=np.float32).ravel()
        lead = self.codes.shape[0] if self.codes.ndim else 1
        if self.alphas.size not in (1, lead):
            raise ShapeMismatch(
                f"{self.alphas.size} scales for leading dim {lead}; need 1 or {lead}"
            )

    @classmethod
    def from_packed(cls, packed: PackedTernaryTensor) -> "TernaryOperandView":
        codes, alphas = unpack(packed)
        return cls(codes.reshape(packed.shape.dims), alphas)

    def row_alphas(self, rows: int) -> np.ndarray:
        if self.alphas.size == 1:
            return np.broadcast_to(self.alphas, (rows,))
        return self.alphas

    def effective_weights(self) -> np.ndarray:
        """Dense float32 alpha * codes (the reference operand)."""
        a = self.row_alphas(self.codes.shape[0] if self.codes.ndim else 1)
        a = a.reshape((-1,) + (1,) * (self.codes.ndim - 1))
        return self.codes.astype(np.float32) * a

    def zero_fraction(self) -> float:
        return float((self.codes == 0).mean()) if self.codes.size else 0.0


@dataclass
class OpCounter:
    """Adds/subtracts of activations and scale multiplies performed."""

    accumulate_ops: int = 0
    multiply_ops: int = 0

    def merge(self, other: "OpCounter"):
        self.accumulate_ops += other.accumulate_ops
        self.multiply_ops += other.multiply_ops


def _as_nd(x, rank: int, what: str) -> np.ndarray:
    arr = x.nd() if isinstance(x, DenseTensor) else np.asarray(x, dtype=np.float32)
    if arr.ndim != rank:
        raise ShapeMismatch(f"{what} must be rank {rank}, got rank {arr.ndim}")
    return np.ascontiguousarray(arr, dtype=np.float32)


def ternary_dot(x, view: TernaryOperandView, counter: OpCounter | None = None) -> float:
    """alpha * (sum of x where code=+1  -  sum of x where code=-1)."""
    xv = x.values if isinstance(x, DenseTensor) else np.asarray(x, dtype=np.float32).ravel()
    codes = view.codes.ravel()
    if codes.size != xv.size:
        raise ShapeMismatch(f"x length {xv.size} vs codes length {codes.size}")
    if view.alphas.size != 1:
        raise ShapeMismatch("ternary_dot takes a single whole-vector scale group")
    pos = codes == 1
    neg = codes == -1
    acc = xv[pos].sum(dtype=np.float64) - xv[neg].sum(dtype=np.float64)
    if counter is not None:
        counter.accumulate_ops += int(pos.sum()) + int(neg.sum())
        counter.multiply_ops += 1
    return float(np.float32(float(view.alphas[0]) * acc))


def ternary_matmul(
    X, view: TernaryOperandView, bias=None, counter: OpCounter | None = None
) -> DenseTensor:
    """[batch, in] x codes [out, in] -> [batch, out]; one scale per output row."""
    Xn = _as_nd(X, 2, "X")
    codes = view.codes
    if codes.ndim != 2 or codes.shape[1] != Xn.shape[1]:
        raise ShapeMismatch(f"X {Xn.shape} vs codes {codes.shape}")
    batch, out = Xn.shape[0], codes.shape[0]
    alphas = view.row_alphas(out)
    Z = np.zeros((batch, out), dtype=np.float64)
    n_acc = 0
    for r in range(out):
        pos = codes[r] == 1
        neg = codes[r] == -1
        n_pos, n_neg = int(pos.sum()), int(neg.sum())
        acc = np.zeros(batch, dtype=np.float64)
        if n_pos:
            acc += Xn[:, pos].sum(axis=1, dtype=np.float64)
        if n_neg:
            acc -= Xn[:, neg].sum(axis=1, dtype=np.float64)
        Z[:, r] = float(alphas[r]) * acc  # the only multiply: one per output element
        n_acc += (n_pos + n_neg) * batch
    if counter is not None:
        counter.accumulate_ops += n_acc
        counter.multiply_ops += batch * out
    if bias is not None:
        Z += np.asarray(bias, dtype=np.float32)[None, :]
    return DenseTensor(Shape((batch, out)), Z.astype(np.float32))


def _conv_geometry(h, w, kh, kw, stride, pad):
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if stride < 1 or pad < 0 or oh < 1 or ow < 1 or h + 2 * pad < kh or w + 2 * pad < kw:
        raise ShapeMismatch(
            f"kernel {kh}x{kw} stride {stride} pad {pad} does not fit input {h}x{w}"
        )
    return oh, ow


def _pad_input(Xn, pad):
    if pad == 0:
        return Xn
    return np.pad(Xn, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def ternary_conv2d(
    X,
    view: TernaryOperandView,
    bias=None,
    stride: int = 1,
    pad: int = 0,
    counter: OpCounter | None = None,
) -> DenseTensor:
    """Direct zero-padded convolution; add/subtract/skip inner loops, one
    scale multiply per output element."""
    Xn = _as_nd(X, 4, "X")
    codes = view.codes
    if codes.ndim != 4 or codes.shape[1] != Xn.shape[1]:
        raise ShapeMismatch(f"X {Xn.shape} vs codes {codes.shape}")
    batch, cin, h, w = Xn.shape
    cout, _, kh, kw = codes.shape
    oh, ow = _conv_geometry(h, w, kh, kw, stride, pad)
    Xp = _pad_input(Xn, pad)
    alphas = view.row_alphas(cout)
    Z = np.empty((batch, cout, oh, ow), dtype=np.float32)
    n_acc = 0
    for co in range(cout):
        acc = np.zeros((batch, oh, ow), dtype=np.float64)
        nz = np.argwhere(codes[co] != 0)
        for ci, ky, kx in nz:
            patch = Xp[:, ci, ky : ky + oh * stride : stride, kx : kx + ow * stride : stride]
            if codes[co, ci, ky, kx] == 1:
                acc += patch
            else:
                acc -= patch
        n_acc += len(nz) * batch * oh * ow
        Z[:, co] = float(alphas[co]) * acc  # one multiply per output element
    if counter is not None:
        counter.accumulate_ops += n_acc
        counter.multiply_ops += batch * cout * oh * ow
    if bias is not None:
        Z += np.asarray(bias, dtype=np.float32)[None, :, None, None]
    return DenseTensor(Shape(Z.shape), Z)


def matmul_f64(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Float64-accumulated product of float32 operands, float32 result."""
    return np.matmul(np.asarray(A, np.float64), np.asarray(B, np.float64)).astype(np.float32)


def reference_matmul(X, W, bias=None, counter: OpCounter | None = None) -> DenseTensor:
    """Dense [batch, in] x [out, in] -> [batch, out]."""
    Xn = _as_nd(X, 2, "X")
    Wn = _as_nd(W, 2, "W")
    if Xn.shape[1] != Wn.shape[1]:
        raise ShapeMismatch(f"X {Xn.shape} vs W {Wn.shape}")
    Z = matmul_f64(Xn, Wn.T)
    if counter is not None:
        counter.accumulate_ops += Xn.shape[0] * Wn.shape[0] * Wn.shape[1]
        counter.multiply_ops += Xn.shape[0] * Wn.shape[0] * Wn.shape[1]
    if bias is not None:
        Z = Z + np.asarray(bias, dtype=np.float32)[None, :]
    return DenseTensor(Shape(Z.shape), Z)


def im2col(Xn: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """[batch, cin, h, w] -> float32 [cin*kh*kw, batch*oh*ow] patch matrix.

    Pure gather (no arithmetic), laid out so the convolution is one GEMM.
    """
    batch, cin, h, w = Xn.shape
    oh, ow = _conv_geometry(h, w, kh, kw, stride, pad)
    Xp = _pad_input(Xn, pad)
    cols = np.empty((cin, kh, kw, batch, oh, ow), dtype=np.float32)
    for ky in range(kh):
        for kx in range(kw):
            patch = Xp[:, :, ky : ky + oh * stride : stride, kx : kx + ow * stride : stride]
            cols[:, ky, kx] = patch.transpose(1, 0, 2, 3)
    return cols.reshape(cin * kh * kw, batch * oh * ow)


def col2im(dcols: np.ndarray, x_shape, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Scatter-add the patch-matrix gradient back to input layout (float32)."""
    batch, cin, h, w = x_shape
    oh, ow = _conv_geometry(h, w, kh, kw, stride, pad)
    dXp = np.zeros((batch, cin, h + 2 * pad, w + 2 * pad), dtype=np.float32)
    d6 = np.asarray(dcols, dtype=np.float32).reshape(cin, kh, kw, batch, oh, ow)
    for ky in range(kh):
        for kx in range(kw):
            dXp[:, :, ky : ky + oh * stride : stride, kx : kx + ow * stride : stride] += d6[
                :, ky, kx
            ].transpose(1, 0, 2, 3)
    if pad:
        return dXp[:, :, pad : pad + h, pad : pad + w]
    return dXp


def conv2d_from_cols(
    cols: np.ndarray, W2d: np.ndarray, bias, batch: int, oh: int, ow: int
) -> np.ndarray:
    """[K, batch*oh*ow] patches with [cout, K] weights -> [batch, cout, oh, ow].

    Float64-accumulated like every dense contraction in this module.
    """
    Z = np.matmul(np.asarray(W2d, np.float64), np.asarray(cols, np.float64)).astype(np.float32)
    Z = Z.reshape(W2d.shape[0], batch, oh, ow).transpose(1, 0, 2, 3)
    if bias is not None:
        Z = Z + np.asarray(bias, dtype=np.float32)[None, :, None, None]
    return np.ascontiguousarray(Z)


def reference_conv2d(
    X, W, bias=None, stride: int = 1, pad: int = 0, counter: OpCounter | None = None
) -> DenseTensor:
    """Dense zero-padded convolution (im2col + matmul)."""
    Xn = _as_nd(X, 4, "X")
    Wn = _as_nd(W, 4, "W")
    if Xn.shape[1] != Wn.shape[1]:
        raise ShapeMismatch(f"X {Xn.shape} vs W {Wn.shape}")
    batch, cin, h, w = Xn.shape
    cout, _, kh, kw = Wn.shape
    oh, ow = _conv_geometry(h, w, kh, kw, stride, pad)
    cols = im2col(Xn, kh, kw, stride, pad)
    Z = conv2d_from_cols(cols, Wn.reshape(cout, -1), bias, batch, oh, ow)
    if counter is not None:
        macs = batch * cout * oh * ow * cin * kh * kw
        counter.accumulate_ops += macs
        counter.multiply_ops += macs
    return DenseTensor(Shape(Z.shape), Z)


@dataclass
class BenchRow:
    kernel: str
    shape: str
    ns_per_call: float
    accumulate_ops: int
    multiply_ops: int


BENCH_CSV_HEADER = "kernel,shape,ns_per_call,accumulate_ops,multiply_ops"


def bench_rows_to_csv(rows) -> str:
    lines = [BENCH_CSV_HEADER]
    for r in rows:
        lines.append(
            f"{r.kernel},{r.shape},{r.ns_per_call:.1f},{r.accumulate_ops},{r.multiply_ops}"
        )
    return "\n".join(lines) + "\n"


def random_view(rng: Rng, codes_shape, per_row: bool, zero_fraction: float = 0.0) -> TernaryOperandView:
    """Random codes with roughly the requested zero fraction; positive scales."""
    n = int(np.prod(codes_shape))
    u = rng.next_unit(n)
    codes = np.where(u < zero_fraction, 0, np.where(u < zero_fraction + (1 - zero_fraction) / 2, 1, -1))
    codes = codes.astype(np.int8).reshape(codes_shape)
    alphas = np.abs(rng.normal(codes_shape[0] if per_row else 1)) + np.float32(0.1)
    return TernaryOperandView(codes, alphas)


def bench(
    kernel: str, sizes: dict, repetitions: int, rng: Rng, zero_fraction: float = 0.0
) -> BenchRow:
    """Time one kernel at the given sizes; op counts are for a single call."""
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    if kernel == "ternary_dot":
        n = sizes["n"]
        x = rng.normal(n)
        view = random_view(rng, (1, n), False, zero_fraction)
        view = TernaryOperandView(view.codes.ravel(), view.alphas)
        run = lambda c: ternary_dot(x, view, c)
        shape = f"n={n}"
    elif kernel == "ternary_matmul":
        b, out, inn = sizes["batch"], sizes["out"], sizes["in"]
        X = rng.normal(b * inn).reshape(b, inn)
        view = random_view(rng, (out, inn), True, zero_fraction)
        run = lambda c: ternary_matmul(X, view, counter=c)
        shape = f"batch={b} out={out} in={inn}"
    elif kernel == "reference_matmul":
        b, out, inn = sizes["batch"], sizes["out"], sizes["in"]
        X = rng.normal(b * inn).reshape(b, inn)
        W = rng.normal(out * inn).reshape(out, inn)
        run = lambda c: reference_matmul(X, W, counter=c)
        shape = f"batch={b} out={out} in={inn}"
    elif kernel == "ternary_conv2d":
        b, cin, cout, hw, k = sizes["batch"], sizes["cin"], sizes["cout"], sizes["hw"], sizes["k"]
        X = rng.normal(b * cin * hw * hw).reshape(b, cin, hw, hw)
        view = random_view(rng, (cout, cin, k, k), True, zero_fraction)
        run = lambda c: ternary_conv2d(X, view, stride=1, pad=k // 2, counter=c)
        shape = f"batch={b} cin={cin} cout={cout} hw={hw} k={k}"
    elif kernel == "reference_conv2d":
        b, cin, cout, hw, k = sizes["batch"], sizes["cin"], sizes["cout"], sizes["hw"], sizes["k"]
        X = rng.normal(b * cin * hw * hw).reshape(b, cin, hw, hw)
        W = rng.normal(cout * cin * k * k).reshape(cout, cin, k, k)
        run = lambda c: reference_conv2d(X, W, stride=1, pad=k // 2, counter=c)
        shape = f"batch={b} cin={cin} cout={cout} hw={hw} k={k}"
    else:
        raise ValueError(f"unknown kernel {kernel!r}")
    counter = OpCounter()
    run(counter)  # warm-up; counts for exactly one call
    t0 = time.perf_counter_ns()
    for _ in range(repetitions):
        run(None)
    dt = (time.perf_counter_ns() - t0) / repetitions
    return BenchRow(kernel, shape, dt, counter.accumulate_ops, counter.multiply_ops)
