"""
Parameter checkpoint file.

Layout (all integers little-endian u32)::

    b"MIFO" | version | records...
    record = name_len | name (utf-8) | ndim | dims[ndim] | float64 LE payload

Records run to end of file. Encoder configuration and phase flags travel
as ``meta.*`` records so a checkpoint is self-describing.
"""

import struct

import numpy as np

from .encoder import EncoderConfig, EncoderParams
from .errors import FormatError
from .tensor import Tensor

MAGIC = b"MIFO"
VERSION = 1


def write_tensors(path, arrays):
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<I", VERSION))
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def read_tensors(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise FormatError("bad magic, expected b'MIFO'", 0)
    if len(buf) < 8:
        raise FormatError("truncated header", len(buf))
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    pos = 8
    out = {}

    def need(n, what):
        if pos + n > len(buf):
            raise FormatError(f"truncated {what}", pos)

    while pos < len(buf):
        need(4, "record name length")
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        need(n, "record name")
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        need(4, "ndim")
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        need(4 * ndim, "dims")
        dims = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        count = int(np.prod(dims)) if ndim else 1
        need(8 * count, f"payload of {name!r}")
        out[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos) \
            .reshape(dims).astype(np.float64)
        pos += 8 * count
    return out


def save_checkpoint(path, params, extra=None):
    arrays = {"meta.encoder_config": np.array(params.config.as_vector()),
              "meta.backbone_frozen": np.array([1.0 if params.backbone_frozen else 0.0])}
    arrays.update(params.arrays())
    for k, v in (extra or {}).items():
        arrays["meta." + k] = np.asarray(v, dtype=np.float64)
    write_tensors(path, arrays)


def load_checkpoint(path):
    """Return ``(params, extra)`` where ``extra`` holds the other ``meta.*`` records."""
    arrays = read_tensors(path)
    try:
        cfg = EncoderConfig.from_vector(arrays.pop("meta.encoder_config"))
        frozen = bool(arrays.pop("meta.backbone_frozen")[0])
    except KeyError as e:
        raise FormatError(f"missing record {e.args[0]}", 8) from None
    extra = {k[5:]: arrays.pop(k) for k in list(arrays) if k.startswith("meta.")}
    params = EncoderParams(cfg, {n: Tensor(a) for n, a in arrays.items()}, frozen)
    return params, extra
