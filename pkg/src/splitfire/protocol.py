"""Bit-exact binary encoding of tensors and split-learning messages.

Frame layout: magic b"SASL" | version 0x01 | variant tag (1 byte) |
payload length (u32 LE) | payload. Payload integers are u32 LE, reals are
f64 LE, tensors use encode_tensor. Tensor layout: ndims (1 byte) | each dim
(u32 LE) | data (f32 LE, row-major).
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DecodeError, ValidationError
from .tensor import Tensor

MAGIC = b"SASL"
VERSION = 1
MAX_TENSOR_RANK = 8

TAG_HELLO = 1
TAG_ROUND_START = 2
TAG_ACTIVATIONS = 3
TAG_GRADIENTS = 4
TAG_WEIGHT_SYNC = 5
TAG_METRICS = 6
TAG_BYE = 7

BYE_OK = 0
BYE_DUPLICATE_CLIENT = 1
BYE_PROTOCOL_ERROR = 2


@dataclass(frozen=True)
class Hello:
    client_id: int
    partition_size: int


@dataclass(frozen=True)
class RoundStart:
    round: int
    quotas: tuple  # per-client batch quota, indexed by client id


@dataclass(frozen=True)
class Activations:
    round: int
    client_id: int
    feature_map: Tensor
    labels: Tensor


@dataclass(frozen=True)
class Gradients:
    round: int
    client_id: int
    grad: Tensor  # server->client: cut-layer grad; client->server: flat front grads


@dataclass(frozen=True)
class WeightSync:
    round: int
    tensors: tuple  # front parameter tensors, in layer order


@dataclass(frozen=True)
class Metrics:
    round: int
    loss: float
    accuracy: float


@dataclass(frozen=True)
class Bye:
    reason: int


MESSAGE_TYPES = (Hello, RoundStart, Activations, Gradients, WeightSync, Metrics, Bye)

_TAGS = {
    Hello: TAG_HELLO,
    RoundStart: TAG_ROUND_START,
    Activations: TAG_ACTIVATIONS,
    Gradients: TAG_GRADIENTS,
    WeightSync: TAG_WEIGHT_SYNC,
    Metrics: TAG_METRICS,
    Bye: TAG_BYE,
}


def encode_tensor(t):
    """Serialize a float32 tensor; float64 is runtime-only and rejected."""
    if t.dtype != np.float32:
        raise ValidationError("only float32 tensors travel the wire")
    if len(t.shape) > MAX_TENSOR_RANK:
        raise ValidationError(f"tensor rank {len(t.shape)} exceeds {MAX_TENSOR_RANK}")
    head = struct.pack("<B", len(t.shape))
    dims = struct.pack(f"<{len(t.shape)}I", *t.shape)
    data = t.data if t.data.dtype == np.dtype("<f4") else t.data.astype("<f4")
    return head + dims + data.tobytes()


class _Reader:
    """Cursor over a byte buffer; every read is bounds-checked."""

    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise DecodeError(f"truncated stream while reading {what}", self.pos)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self, what):
        return self.take(1, what)[0]

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def f64(self, what):
        return struct.unpack("<d", self.take(8, what))[0]

    def tensor(self):
        start = self.pos
        ndims = self.u8("tensor rank")
        if ndims == 0 or ndims > MAX_TENSOR_RANK:
            raise DecodeError(f"tensor rank {ndims} outside 1..{MAX_TENSOR_RANK}", start)
        dims = [self.u32("tensor dim") for _ in range(ndims)]
        if any(d == 0 for d in dims):
            raise DecodeError(f"tensor has a zero dimension {dims}", start)
        count = 1
        for d in dims:
            count *= d
        if count * 4 > len(self.buf) - self.pos:
            raise DecodeError(
                f"declared tensor size {count} exceeds remaining bytes", self.pos
            )
        raw = self.take(count * 4, "tensor data")
        arr = np.frombuffer(raw, dtype="<f4").reshape(dims)
        try:
            return Tensor(arr.copy())
        except Exception as e:
            raise DecodeError(f"invalid tensor payload: {e}", start) from e

    def done(self, what):
        if self.pos != len(self.buf):
            raise DecodeError(
                f"{len(self.buf) - self.pos} trailing bytes after {what}", self.pos
            )


def decode_tensor(buf):
    r = _Reader(buf)
    t = r.tensor()
    r.done("tensor")
    return t


def decode_tensor_stream(buf, count):
    """Decode exactly count back-to-back tensors from buf."""
    r = _Reader(buf)
    out = [r.tensor() for _ in range(count)]
    r.done("tensor stream")
    return out


def _encode_payload(m):
    u32 = lambda v: struct.pack("<I", v)
    f64 = lambda v: struct.pack("<d", v)
    if isinstance(m, Hello):
        return u32(m.client_id) + u32(m.partition_size)
    if isinstance(m, RoundStart):
        return u32(m.round) + u32(len(m.quotas)) + b"".join(u32(q) for q in m.quotas)
    if isinstance(m, Activations):
        return (
            u32(m.round) + u32(m.client_id)
            + encode_tensor(m.feature_map) + encode_tensor(m.labels)
        )
    if isinstance(m, Gradients):
        return u32(m.round) + u32(m.client_id) + encode_tensor(m.grad)
    if isinstance(m, WeightSync):
        return u32(m.round) + u32(len(m.tensors)) + b"".join(
            encode_tensor(t) for t in m.tensors
        )
    if isinstance(m, Metrics):
        return u32(m.round) + f64(m.loss) + f64(m.accuracy)
    if isinstance(m, Bye):
        return u32(m.reason)
    raise ValidationError(f"not a protocol message: {m!r}")


def encode_message(m):
    payload = _encode_payload(m)
    return MAGIC + struct.pack("<BBI", VERSION, _TAGS[type(m)], len(payload)) + payload


def _decode_payload(tag, payload):
    r = _Reader(payload)
    if tag == TAG_HELLO:
        m = Hello(r.u32("client_id"), r.u32("partition_size"))
    elif tag == TAG_ROUND_START:
        rnd = r.u32("round")
        n = r.u32("quota count")
        if n > 1_000_000:
            raise DecodeError(f"implausible quota count {n}", r.pos)
        m = RoundStart(rnd, tuple(r.u32("quota") for _ in range(n)))
    elif tag == TAG_ACTIVATIONS:
        m = Activations(r.u32("round"), r.u32("client_id"), r.tensor(), r.tensor())
    elif tag == TAG_GRADIENTS:
        m = Gradients(r.u32("round"), r.u32("client_id"), r.tensor())
    elif tag == TAG_WEIGHT_SYNC:
        rnd = r.u32("round")
        n = r.u32("tensor count")
        if n > 1_000_000:
            raise DecodeError(f"implausible tensor count {n}", r.pos)
        m = WeightSync(rnd, tuple(r.tensor() for _ in range(n)))
    elif tag == TAG_METRICS:
        m = Metrics(r.u32("round"), r.f64("loss"), r.f64("accuracy"))
    elif tag == TAG_BYE:
        m = Bye(r.u32("reason"))
    else:
        raise DecodeError(f"unknown message tag {tag}", 5)
    r.done("message payload")
    return m


def decode_message(frame):
    r = _Reader(frame)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise DecodeError(f"bad magic {magic!r}", 0)
    version = r.u8("version")
    if version != VERSION:
        raise DecodeError(f"unsupported version {version}", 4)
    tag = r.u8("tag")
    length = r.u32("payload length")
    payload = r.take(length, "payload")
    r.done("frame")
    return _decode_payload(tag, payload)
