"""Small teacher/student architectures and the binary checkpoint format.

Checkpoint layout (all integers little-endian)::

    b"CMKD"                      magic
    u32                          format version
    u32 + bytes                  model spec, JSON
    u32 + bytes                  training metadata, JSON
    u32                          tensor count
    per tensor: u16 + name, u8 ndim, u32 * ndim dims
    per tensor, in table order:  raw float64 values, row-major
"""

from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import FormatError, SpecError
from .tensor import Tensor, conv2d, matmul, maxpool2x2

MAGIC = b"CMKD"
FORMAT_VERSION = 1
KINDS = ("mlp", "smallcnn")


@dataclass
class ModelSpec:
    """``mlp`` uses ``layer_dims`` (input width first, ``num_classes`` last).

    ``smallcnn`` stacks one conv3x3 -> relu -> maxpool2x2 block per entry of
    ``conv_channels`` over inputs of shape ``in_shape`` and ends with a
    linear layer to ``num_classes``.
    """

    kind: str = "mlp"
    layer_dims: List[int] = field(default_factory=lambda: [784, 32, 10])
    num_classes: int = 10
    init_seed: int = 0
    conv_channels: List[int] = field(default_factory=list)
    in_shape: List[int] = field(default_factory=lambda: [1, 28, 28])

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise SpecError(f"model kind must be one of {KINDS}, got {self.kind!r}")
        if self.num_classes < 1:
            raise SpecError(f"num_classes must be positive, got {self.num_classes}")
        if len(self.in_shape) != 3 or any(d <= 0 for d in self.in_shape):
            raise SpecError(f"in_shape must be three positive dims, got {self.in_shape}")
        if self.kind == "mlp":
            if len(self.layer_dims) < 2 or any(d <= 0 for d in self.layer_dims):
                raise SpecError(f"mlp layer_dims must be >= 2 positive widths, got {self.layer_dims}")
            if self.layer_dims[-1] != self.num_classes:
                raise SpecError(f"last layer width {self.layer_dims[-1]} != num_classes {self.num_classes}")
            if self.layer_dims[0] != int(np.prod(self.in_shape)):
                raise SpecError(f"mlp input width {self.layer_dims[0]} != prod(in_shape) {int(np.prod(self.in_shape))}")
        else:
            if not self.conv_channels or any(c <= 0 for c in self.conv_channels):
                raise SpecError(f"smallcnn needs positive conv_channels, got {self.conv_channels}")
            h, w = self.in_shape[1:]
            for _ in self.conv_channels:
                h, w = h // 2, w // 2
            if h == 0 or w == 0:
                raise SpecError(f"too many pooling blocks for input {self.in_shape}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


class Model:
    def __init__(self, spec: ModelSpec, params: "OrderedDict[str, Tensor]", metadata: Optional[dict] = None):
        self.spec = spec
        self.params = params
        self.metadata = dict(metadata or {})

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(p.data.tobytes())
        return h.hexdigest()

    def __call__(self, x):
        return self.forward(x)

    def forward(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if self.spec.kind == "mlp":
            h = x.reshape(x.shape[0], -1)
            n = len(self.spec.layer_dims) - 1
            for i in range(n):
                h = matmul(h, self.params[f"fc{i}.weight"]) + self.params[f"fc{i}.bias"]
                if i < n - 1:
                    h = h.relu()
            return h
        h = x
        for i in range(len(self.spec.conv_channels)):
            h = conv2d(h, self.params[f"conv{i}.weight"], stride=1, padding=1)
            h = (h + self.params[f"conv{i}.bias"]).relu()
            h = maxpool2x2(h)
        h = h.reshape(h.shape[0], -1)
        return matmul(h, self.params["fc.weight"]) + self.params["fc.bias"]

    def logits(self, x, batch_size: int = 1000) -> np.ndarray:
        """Inference-mode logits for an array of inputs, in chunks."""
        out = [self.forward(x[i : i + batch_size]).data for i in range(0, len(x), batch_size)]
        return np.concatenate(out)


def _param_shapes(spec: ModelSpec) -> List[Tuple[str, Tuple[int, ...], int]]:
    """(name, shape, fan_in) in initialization order."""
    shapes = []
    if spec.kind == "mlp":
        dims = spec.layer_dims
        for i in range(len(dims) - 1):
            shapes.append((f"fc{i}.weight", (dims[i], dims[i + 1]), dims[i]))
            shapes.append((f"fc{i}.bias", (dims[i + 1],), dims[i]))
        return shapes
    c, h, w = spec.in_shape
    for i, out_c in enumerate(spec.conv_channels):
        shapes.append((f"conv{i}.weight", (out_c, c, 3, 3), c * 9))
        shapes.append((f"conv{i}.bias", (1, out_c, 1, 1), c * 9))
        c, h, w = out_c, h // 2, w // 2
    flat = c * h * w
    shapes.append(("fc.weight", (flat, spec.num_classes), flat))
    shapes.append(("fc.bias", (spec.num_classes,), flat))
    return shapes


def build(spec: ModelSpec) -> Model:
    """He-uniform weights from ``spec.init_seed``; zero biases."""
    spec.validate()
    rng = np.random.default_rng(spec.init_seed)
    params = OrderedDict()
    for name, shape, fan_in in _param_shapes(spec):
        if name.endswith(".bias"):
            data = np.zeros(shape)
        else:
            bound = np.sqrt(6.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(data, requires_grad=True)
    return Model(spec, params)


def save(model: Model, path) -> None:
    spec_blob = json.dumps(model.spec.to_dict(), sort_keys=True).encode()
    meta_blob = json.dumps(model.metadata, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION),
             struct.pack("<I", len(spec_blob)), spec_blob,
             struct.pack("<I", len(meta_blob)), meta_blob,
             struct.pack("<I", len(model.params))]
    for name, p in model.params.items():
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", p.ndim))
        parts.append(struct.pack(f"<{p.ndim}I", *p.shape))
    for p in model.params.values():
        parts.append(p.data.astype("<f8").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.path}: truncated while reading {what}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load(path) -> Model:
    with open(path, "rb") as f:
        head = f.read(8)
        if len(head) < 8:
            raise FormatError(f"{path}: file too short for a checkpoint header")
        if head[:4] != MAGIC:
            raise FormatError(f"{path}: bad magic {head[:4]!r}, expected {MAGIC!r}")
        (version,) = struct.unpack("<I", head[4:])
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}, expected {FORMAT_VERSION}")
        buf = head + f.read()
    r = _Reader(buf, path)
    r.pos = 8
    try:
        (n,) = r.unpack("<I", "spec length")
        spec = ModelSpec.from_dict(json.loads(r.take(n, "spec block")))
        (n,) = r.unpack("<I", "metadata length")
        metadata = json.loads(r.take(n, "metadata block"))
    except (ValueError, TypeError) as e:
        if isinstance(e, FormatError):
            raise
        raise FormatError(f"{path}: corrupt spec/metadata block ({e})") from None
    (count,) = r.unpack("<I", "tensor count")
    table = []
    for i in range(count):
        (ln,) = r.unpack("<H", f"name of tensor #{i}")
        name = r.take(ln, f"name of tensor #{i}").decode()
        (ndim,) = r.unpack("<B", f"rank of tensor {name!r}")
        shape = r.unpack(f"<{ndim}I", f"shape of tensor {name!r}")
        table.append((name, shape))
    # size check over the whole table before touching tensor data
    offset = r.pos
    for name, shape in table:
        nbytes = 8 * int(np.prod(shape))
        if offset + nbytes > len(buf):
            raise FormatError(f"{path}: truncated; tensor {name!r} {tuple(shape)} is missing data")
        offset += nbytes
    if offset != len(buf):
        raise FormatError(f"{path}: {len(buf) - offset} unexpected trailing bytes")
    try:
        spec.validate()
    except SpecError as e:
        raise FormatError(f"{path}: invalid model spec ({e})") from None
    expected = [(name, shape) for name, shape, _ in _param_shapes(spec)]
    if [(n, tuple(s)) for n, s in table] != expected:
        raise FormatError(f"{path}: tensor table {table} does not match spec layout {expected}")
    params = OrderedDict()
    for name, shape in table:
        data = np.frombuffer(r.take(8 * int(np.prod(shape)), name), dtype="<f8").reshape(shape)
        params[name] = Tensor(data.astype(np.float64), requires_grad=True)
    return Model(spec, params, metadata)


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
