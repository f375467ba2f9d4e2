"""Binary checkpoint format.

Layout of one network record (all integers little-endian)::

    b"HFNN"  u32 version  u32 n  <n bytes UTF-8 spec text>
    u64 count  <count float64>  [u32 rows u32 cols <rows*cols float64>]  (Fourier B, if any)

Training checkpoints append optional tagged sections after the record:
``b"ADAM"`` (u64 t, then m and v, each ``count`` float64) and ``b"LMBD"``
(u32 n, n float64 loss weights) and ``b"SCAL"`` (u32 n, UTF-8 scaling text). Floats are stored raw, so a round trip is
bit-exact.
"""

import io
import struct

import numpy as np

from .errors import ConfigurationError
from .nn import NetworkSpec, ParamStore

MAGIC = b"HFNN"
VERSION = 1


def _read_exact(f, n):
    data = f.read(n)
    if len(data) != n:
        raise ConfigurationError("truncated checkpoint")
    return data


def _floats(f, n):
    return np.frombuffer(_read_exact(f, 8 * n), dtype="<f8").astype(np.float64)


def write_network(f, store: ParamStore):
    text = store.spec.to_text().encode("utf-8")
    f.write(MAGIC)
    f.write(struct.pack("<II", VERSION, len(text)))
    f.write(text)
    f.write(struct.pack("<Q", store.theta.size))
    f.write(store.theta.astype("<f8").tobytes())
    if store.spec.embedding == "fourier":
        rows, cols = store.B.shape
        f.write(struct.pack("<II", rows, cols))
        f.write(np.ascontiguousarray(store.B, dtype="<f8").tobytes())


def read_network(f) -> ParamStore:
    if _read_exact(f, 4) != MAGIC:
        raise ConfigurationError("not an HFNN checkpoint (bad magic)")
    version, n = struct.unpack("<II", _read_exact(f, 8))
    if version != VERSION:
        raise ConfigurationError(f"unsupported checkpoint version {version}")
    spec = NetworkSpec.from_text(_read_exact(f, n).decode("utf-8"))
    (count,) = struct.unpack("<Q", _read_exact(f, 8))
    theta = _floats(f, count)
    B = None
    if spec.embedding == "fourier":
        rows, cols = struct.unpack("<II", _read_exact(f, 8))
        B = _floats(f, rows * cols).reshape(rows, cols)
    return ParamStore(spec, theta, B=B)


def write_adam(f, t, m, v):
    f.write(b"ADAM")
    f.write(struct.pack("<Q", t))
    f.write(np.asarray(m, dtype="<f8").tobytes())
    f.write(np.asarray(v, dtype="<f8").tobytes())


def write_lambdas(f, lambdas):
    lam = np.asarray(lambdas, dtype="<f8")
    f.write(b"LMBD")
    f.write(struct.pack("<I", lam.size))
    f.write(lam.tobytes())


def write_scaling(f, text):
    data = text.encode("utf-8")
    f.write(b"SCAL")
    f.write(struct.pack("<I", len(data)))
    f.write(data)


def read_extras(f, count):
    """Parse trailing tagged sections; returns a dict (possibly empty)."""
    out = {}
    while True:
        tag = f.read(4)
        if not tag:
            return out
        if tag == b"ADAM":
            (t,) = struct.unpack("<Q", _read_exact(f, 8))
            out["adam"] = (t, _floats(f, count), _floats(f, count))
        elif tag == b"LMBD":
            (n,) = struct.unpack("<I", _read_exact(f, 4))
            out["lambdas"] = _floats(f, n)
        elif tag == b"SCAL":
            (n,) = struct.unpack("<I", _read_exact(f, 4))
            out["scaling"] = _read_exact(f, n).decode("utf-8")
        else:
            # unknown tag: caller's own section, leave the stream positioned on it
            f.seek(-4, io.SEEK_CUR)
            return out


def save(path, store: ParamStore, adam=None, lambdas=None, scaling=None):
    with open(path, "wb") as f:
        write_network(f, store)
        if scaling is not None:
            write_scaling(f, scaling)
        if adam is not None:
            write_adam(f, *adam)
        if lambdas is not None:
            write_lambdas(f, lambdas)


def load(path, with_extras=False):
    with open(path, "rb") as f:
        store = read_network(f)
        extras = read_extras(f, store.size)
    return (store, extras) if with_extras else store


def dumps(store: ParamStore) -> bytes:
    buf = io.BytesIO()
    write_network(buf, store)
    return buf.getvalue()


def loads(data: bytes) -> ParamStore:
    return read_network(io.BytesIO(data))
