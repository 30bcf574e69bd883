"""Binary checkpoints ("VNCK") and dataset containers ("VNDS").

All integers and floats are little-endian; arrays are row-major float64.
The byte layout is documented in docs/checkpoint_format.md.
"""
from __future__ import annotations

import csv
import io
import json
import struct
import zlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .core import Activation, LayerParams
from .inference import NetworkParams
from .learning import OptimizerState

MAGIC = b"VNCK"
VERSION = 1
DATASET_MAGIC = b"VNDS"
DATASET_VERSION = 1

_ACT_TAGS = {Activation.IDENTITY: 0, Activation.RELU: 1}
_TAG_ACTS = {v: k for k, v in _ACT_TAGS.items()}
# d, m, K, lam, beta_td, eta, eta_bottom_only, k_top, activation, tied, has_U
_LAYER = struct.Struct("<IIIddddiBBB")
_DICT_NAMES = ("S", "U", "U_down")


class CheckpointError(ValueError):
    """Unreadable or corrupted file; ``offset`` is the byte where reading failed."""

    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


class VersionError(CheckpointError):
    def __init__(self, found: int, expected: int, offset: int):
        self.found = found
        self.expected = expected
        super().__init__(f"unsupported format version {found}, expected {expected}", offset)


class _Writer:
    def __init__(self):
        self.buf = io.BytesIO()

    def pack(self, fmt: str, *vals):
        self.buf.write(struct.pack("<" + fmt, *vals))

    def array(self, A: np.ndarray):
        self.buf.write(np.ascontiguousarray(A, dtype="<f8").tobytes())

    def blob(self, b: bytes):
        self.pack("Q", len(b))
        self.buf.write(b)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated file while reading {what}", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        s = struct.Struct("<" + fmt)
        return s.unpack(self.take(s.size, what))

    def array(self, shape: Tuple[int, ...], what: str) -> np.ndarray:
        n = int(np.prod(shape))
        return np.frombuffer(self.take(8 * n, what), dtype="<f8").reshape(shape).astype(np.float64)

    def blob(self, what: str) -> bytes:
        (n,) = self.unpack("Q", what + " length")
        return self.take(n, what)


def _opt(v: Optional[float]) -> float:
    return float("nan") if v is None else float(v)


def _unopt(v: float) -> Optional[float]:
    return None if np.isnan(v) else v


@dataclass
class Checkpoint:
    net: NetworkParams
    states: Optional[List[OptimizerState]] = None
    extras: Dict = field(default_factory=dict)


def dumps(ck: Checkpoint) -> bytes:
    w = _Writer()
    w.buf.write(MAGIC)
    w.pack("II", VERSION, ck.net.L)
    for p in ck.net.layers:
        w.buf.write(_LAYER.pack(p.d, p.m, p.K, p.lam, p.beta_td, _opt(p.eta), _opt(p.eta_bottom_only),
                                -1 if p.k_top is None else p.k_top, _ACT_TAGS[p.activation],
                                int(p.tied), int(p.U is not None)))
    for p in ck.net.layers:
        for name in _DICT_NAMES:
            A = getattr(p, name)
            if A is not None:
                w.array(A)
    w.pack("B", int(ck.states is not None))
    if ck.states is not None:
        for p, st in zip(ck.net.layers, ck.states):
            w.pack("QQIB", st.step, st.usage_samples, st.usage_epochs, int(st.usage is not None))
            if st.usage is not None:
                w.array(st.usage)
            for name in _DICT_NAMES:
                if getattr(p, name) is not None:
                    w.array(st.first[name])
                    w.array(st.second[name])
    w.blob(json.dumps(ck.extras, sort_keys=True).encode())
    body = w.buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def loads(data: bytes) -> Checkpoint:
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    (version,) = r.unpack("I", "version")
    if version != VERSION:
        raise VersionError(version, VERSION, 4)
    (n_layers,) = r.unpack("I", "layer count")
    if n_layers < 1:
        raise CheckpointError("checkpoint holds no layers", r.pos - 4)
    heads = []
    for i in range(n_layers):
        start = r.pos
        h = _LAYER.unpack(r.take(_LAYER.size, f"layer {i} header"))
        if h[8] not in _TAG_ACTS:
            raise CheckpointError(f"layer {i}: unknown activation tag {h[8]}", start)
        heads.append(h)
    layers = []
    for i, (d, m, K, lam, beta, eta, eta_b, k_top, act, tied, has_u) in enumerate(heads):
        S = r.array((d, K), f"layer {i} S")
        U = r.array((m, K), f"layer {i} U") if has_u else None
        U_down = None if tied or not has_u else r.array((m, K), f"layer {i} U_down")
        layers.append(LayerParams(S, U, lam=lam, beta_td=beta, k_top=None if k_top < 0 else k_top,
                                  activation=_TAG_ACTS[act], eta=_unopt(eta),
                                  eta_bottom_only=_unopt(eta_b), U_down=U_down, index=i))
    net = NetworkParams(layers)
    (has_states,) = r.unpack("B", "optimizer flag")
    states = None
    if has_states:
        states = []
        for p in layers:
            step, samples, epochs, has_usage = r.unpack("QQIB", f"layer {p.index} optimizer header")
            st = OptimizerState(step=step, usage_samples=samples, usage_epochs=epochs)
            if has_usage:
                st.usage = r.array((p.K,), f"layer {p.index} usage")
            for name in _DICT_NAMES:
                A = getattr(p, name)
                if A is not None:
                    st.first[name] = r.array(A.shape, f"layer {p.index} {name} first moment")
                    st.second[name] = r.array(A.shape, f"layer {p.index} {name} second moment")
            states.append(st)
    extras_at = r.pos
    try:
        extras = json.loads(r.blob("extras").decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable extras: {exc}", extras_at) from None
    body_end = r.pos
    (crc,) = r.unpack("I", "checksum")
    if crc != zlib.crc32(data[:body_end]):
        raise CheckpointError("checksum mismatch", body_end)
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after checksum", r.pos)
    return Checkpoint(net, states, extras)


def save(path: str, ck: Checkpoint) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(ck))


def load(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        return loads(fh.read())


# -- datasets ---------------------------------------------------------------------


@dataclass
class Dataset:
    """Named float64 columns plus a JSON header echoing how they were made."""

    columns: List[str]
    rows: np.ndarray
    header: Dict = field(default_factory=dict)

    def __post_init__(self):
        self.rows = np.atleast_2d(np.asarray(self.rows, dtype=np.float64))
        if self.rows.shape[1] != len(self.columns):
            raise ValueError(f"{len(self.columns)} column names for {self.rows.shape[1]} columns")


def dumps_dataset(ds: Dataset) -> bytes:
    w = _Writer()
    w.buf.write(DATASET_MAGIC)
    w.pack("I", DATASET_VERSION)
    w.blob(json.dumps({"header": ds.header, "columns": ds.columns}, sort_keys=True).encode())
    w.pack("QQ", *ds.rows.shape)
    w.array(ds.rows)
    return w.buf.getvalue()


def loads_dataset(data: bytes) -> Dataset:
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != DATASET_MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {DATASET_MAGIC!r}", 0)
    (version,) = r.unpack("I", "version")
    if version != DATASET_VERSION:
        raise VersionError(version, DATASET_VERSION, 4)
    meta = json.loads(r.blob("header").decode())
    n, c = r.unpack("QQ", "shape")
    rows = r.array((n, c), "rows")
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after rows", r.pos)
    return Dataset(meta["columns"], rows, meta["header"])


def dataset_csv(ds: Dataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ds.columns)
    for row in ds.rows:
        w.writerow([repr(float(x)) for x in row])
    return buf.getvalue()
