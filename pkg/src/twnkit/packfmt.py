"""2-bit packed ternary storage and the .twn model container.

Code assignment: 00 -> 0, 01 -> +1, 10 -> -1; 11 is reserved and rejected on
read. Weight j of a group occupies bits (2j mod 8) of byte (j // 4), i.e.
little-endian within each byte; each group is padded to a byte boundary with
zero bits. The .twn container stores a version, a layer list, and per layer a
kind tag, integer params, an optional packed tensor, and named float32
tensors (biases, batch-norm state, or full-precision weights). All container
integers are little-endian.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, InvalidCode, TruncatedData
from .tensor import Shape

MAGIC = b"TWN1"
FORMAT_VERSION = 1

CODE_ZERO, CODE_PLUS, CODE_MINUS = 0b00, 0b01, 0b10

# int code -> 2-bit field; index with code+1
_ENCODE = np.array([CODE_MINUS, CODE_ZERO, CODE_PLUS], dtype=np.uint8)
# 2-bit field -> int code; 11 handled separately
_DECODE = np.array([0, 1, -1, 0], dtype=np.int8)

LAYER_KIND_TAGS = {
    "conv2d": 1,
    "fully_connected": 2,
    "batch_norm": 3,
    "relu": 4,
    "max_pool2d": 5,
    "hinge_loss": 6,
    "softmax_cross_entropy": 7,
}
_TAG_TO_KIND = {v: k for k, v in LAYER_KIND_TAGS.items()}

WEIGHT_MODE_TAGS = {"full": 0, "ternary": 1, "binary": 2}
TAG_TO_WEIGHT_MODE = {v: k for k, v in WEIGHT_MODE_TAGS.items()}


@dataclass
class PackedTernaryTensor:
    shape: Shape
    groups: int
    group_size: int
    alphas: np.ndarray  # float32 [groups]
    bits: bytes  # groups * ceil(group_size * 2 / 8)

    @property
    def group_bytes(self) -> int:
        return (self.group_size * 2 + 7) // 8

    def payload_bytes(self) -> int:
        """Deployment payload: packed codes plus the stored scale factors."""
        return len(self.bits) + 4 * self.groups


def pack(codes, alphas, group_size: int, shape: Shape | None = None) -> PackedTernaryTensor:
    """Encode ternary codes (2 bits each) grouped with one scale per group."""
    codes = np.asarray(codes, dtype=np.int8).ravel()
    alphas = np.asarray(alphas, dtype=np.float32).ravel()
    if group_size < 1:
        raise ValueError(f"group_size must be >= 1, got {group_size}")
    groups = alphas.size
    if codes.size != groups * group_size:
        raise ValueError(
            f"{codes.size} codes cannot split into {groups} groups of {group_size}"
        )
    bad = np.abs(codes) > 1
    if bad.any():
        raise ValueError(f"codes must lie in {{-1,0,+1}}; offender at index {int(np.argmax(bad))}")
    padded = group_size + (-group_size) % 4
    fields = np.zeros((max(groups, 1), padded), dtype=np.uint8)
    if codes.size:
        fields[:, :group_size] = _ENCODE[codes.reshape(groups, group_size) + 1]
    packed = (
        fields[:, 0::4]
        | (fields[:, 1::4] << 2)
        | (fields[:, 2::4] << 4)
        | (fields[:, 3::4] << 6)
    )
    if shape is None:
        shape = Shape((max(codes.size, 1),)) if codes.size else Shape((1,))
    elif shape.size != codes.size:
        raise ValueError(f"shape {shape} holds {shape.size} weights, got {codes.size} codes")
    return PackedTernaryTensor(shape, groups, group_size, alphas, packed.tobytes() if codes.size else b"")


def unpack(packed: PackedTernaryTensor) -> tuple[np.ndarray, np.ndarray]:
    """Exact inverse of pack: (codes int8, alphas float32)."""
    groups, group_size = packed.groups, packed.group_size
    expected = groups * packed.group_bytes
    if len(packed.bits) != expected:
        raise TruncatedData(
            f"packed buffer holds {len(packed.bits)} bytes, {expected} expected "
            f"(truncated at byte offset {len(packed.bits)})"
        )
    if group_size == 0 or groups == 0:
        return np.zeros(0, dtype=np.int8), packed.alphas.copy()
    raw = np.frombuffer(packed.bits, dtype=np.uint8).reshape(groups, packed.group_bytes)
    fields = np.empty((groups, packed.group_bytes * 4), dtype=np.uint8)
    fields[:, 0::4] = raw & 0b11
    fields[:, 1::4] = (raw >> 2) & 0b11
    fields[:, 2::4] = (raw >> 4) & 0b11
    fields[:, 3::4] = (raw >> 6) & 0b11
    fields = fields[:, :group_size]  # padding fields ignored
    bad = fields == 0b11
    if bad.any():
        g, j = np.unravel_index(int(np.argmax(bad)), bad.shape)
        raise InvalidCode(f"reserved 11 pattern at group {g}, weight {j}")
    codes = _DECODE[fields].ravel()
    return codes, packed.alphas.copy()


@dataclass
class LayerRecord:
    """Serialized form of one layer: kind, integer params, tensors."""

    kind: str
    params: dict = field(default_factory=dict)  # str -> int
    packed: PackedTernaryTensor | None = None
    floats: dict = field(default_factory=dict)  # str -> float32 ndarray


@dataclass
class ModelFile:
    layers: list
    version: int = FORMAT_VERSION


@dataclass
class CompressionReport:
    fp32_bytes: int
    packed_bytes: int
    ratio: float
    fp64_ratio: float
    float_param_bytes: int
    header_bytes: int


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedData(
                f"need {n} bytes at byte offset {self.pos}, file ends at {len(self.data)}"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _write_shape(out: io.BytesIO, shape: Shape):
    out.write(struct.pack("<B", len(shape.dims)))
    for d in shape.dims:
        out.write(struct.pack("<I", d))


def _read_shape(r: _Reader) -> Shape:
    (ndim,) = r.unpack("<B")
    return Shape(r.unpack(f"<{ndim}I"))


def _write_f32(out: io.BytesIO, arr: np.ndarray):
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    _write_shape(out, Shape(arr.shape if arr.ndim else (1,)))
    out.write(arr.astype("<f4").tobytes())


def _read_f32(r: _Reader) -> np.ndarray:
    shape = _read_shape(r)
    flat = np.frombuffer(r.take(4 * shape.size), dtype="<f4").astype(np.float32)
    return flat.reshape(shape.dims)


def _write_packed(out: io.BytesIO, p: PackedTernaryTensor):
    _write_shape(out, p.shape)
    out.write(struct.pack("<II", p.groups, p.group_size))
    out.write(np.ascontiguousarray(p.alphas, dtype="<f4").tobytes())
    out.write(struct.pack("<I", len(p.bits)))
    out.write(p.bits)


def _read_packed(r: _Reader) -> PackedTernaryTensor:
    shape = _read_shape(r)
    groups, group_size = r.unpack("<II")
    alphas = np.frombuffer(r.take(4 * groups), dtype="<f4").astype(np.float32)
    (nbits,) = r.unpack("<I")
    bits = r.take(nbits)
    p = PackedTernaryTensor(shape, groups, group_size, alphas, bits)
    if len(bits) != groups * p.group_bytes:
        raise TruncatedData(
            f"packed payload holds {len(bits)} bytes, {groups * p.group_bytes} expected"
        )
    if not np.isfinite(alphas).all() or (alphas < 0).any():
        raise FormatError("scale factors must be finite and >= 0")
    return p


def write_model_bytes(mf: ModelFile) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<HH", mf.version, len(mf.layers)))
    for rec in mf.layers:
        out.write(struct.pack("<B", LAYER_KIND_TAGS[rec.kind]))
        out.write(struct.pack("<B", len(rec.params)))
        for key in sorted(rec.params):
            kb = key.encode()
            out.write(struct.pack("<B", len(kb)))
            out.write(kb)
            out.write(struct.pack("<i", int(rec.params[key])))
        out.write(struct.pack("<B", 1 if rec.packed is not None else 0))
        if rec.packed is not None:
            _write_packed(out, rec.packed)
        out.write(struct.pack("<B", len(rec.floats)))
        for name in sorted(rec.floats):
            nb = name.encode()
            out.write(struct.pack("<B", len(nb)))
            out.write(nb)
            _write_f32(out, rec.floats[name])
    return out.getvalue()


def read_model_bytes(data: bytes) -> ModelFile:
    r = _Reader(data)
    magic = r.take(4)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version, layer_count = r.unpack("<HH")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}")
    layers = []
    for _ in range(layer_count):
        (tag,) = r.unpack("<B")
        if tag not in _TAG_TO_KIND:
            raise FormatError(f"unknown layer kind tag {tag}")
        (n_params,) = r.unpack("<B")
        params = {}
        for _ in range(n_params):
            (klen,) = r.unpack("<B")
            key = r.take(klen).decode()
            (params[key],) = r.unpack("<i")
        (has_packed,) = r.unpack("<B")
        packed = _read_packed(r) if has_packed else None
        (n_floats,) = r.unpack("<B")
        floats = {}
        for _ in range(n_floats):
            (nlen,) = r.unpack("<B")
            name = r.take(nlen).decode()
            floats[name] = _read_f32(r)
        layers.append(LayerRecord(_TAG_TO_KIND[tag], params, packed, floats))
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes after layer {layer_count}")
    return ModelFile(layers, version)


def write_model_file(path, mf: ModelFile):
    with open(path, "wb") as f:
        f.write(write_model_bytes(mf))


def read_model_file(path) -> ModelFile:
    with open(path, "rb") as f:
        return read_model_bytes(f.read())


def compression_report(mf: ModelFile) -> CompressionReport:
    """Weight-payload compression vs dense float storage.

    ratio counts weights only: full-precision bytes of every weighted layer's
    weight tensor over its stored payload (packed bits + scales, or raw f32
    for full-mode layers). Bias/BN floats and container framing are reported
    separately.
    """
    fp32 = 0
    stored = 0
    other_floats = 0
    for rec in mf.layers:
        if rec.packed is not None:
            fp32 += 4 * rec.packed.shape.size
            stored += rec.packed.payload_bytes()
        for name, arr in rec.floats.items():
            nbytes = 4 * int(np.asarray(arr).size)
            if name == "weight":
                fp32 += nbytes
                stored += nbytes
            else:
                other_floats += nbytes
    if stored == 0:
        raise ValueError("model holds no weighted layers")
    total = len(write_model_bytes(mf))
    return CompressionReport(
        fp32_bytes=fp32,
        packed_bytes=stored,
        ratio=fp32 / stored,
        fp64_ratio=2 * fp32 / stored,
        float_param_bytes=other_floats,
        header_bytes=total - stored - other_floats,
    )
