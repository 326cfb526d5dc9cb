"""On-disk formats: WAV audio, SSTN tensors, SSMD checkpoints and JSON helpers.

SSTN layout (little-endian)::

    b"SSTN"  u32 version (1)  u32 ndim  ndim x u32 dims  float32 payload

SSMD layout::

    b"SSMD"  u32 version (1)  u32 metadata length  metadata JSON (utf-8)
    u32 n_tensors, then per tensor: u32 name length, name (utf-8), SSTN blob
"""

from __future__ import annotations

import io
import json
import os
import struct
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .fmcw import ChirpConfig, TemplateProfile, Waveform
from .model import ModelParams, default_buffers, parameter_shapes

TENSOR_MAGIC = b"SSTN"
MODEL_MAGIC = b"SSMD"
FORMAT_VERSION = 1


class FormatError(ValueError):
    """A file does not follow the expected binary layout."""


# ---------------------------------------------------------------- audio

def write_wav(path, w: Waveform) -> None:
    """32-bit float mono WAV."""
    rate = int(round(w.sample_rate))
    if rate != w.sample_rate:
        raise ValueError(f"WAV needs an integer sample rate, got {w.sample_rate}")
    wavfile.write(path, rate, np.asarray(w.samples, dtype="<f4"))


def read_wav(path) -> Waveform:
    """Mono WAV as float samples; integer PCM is scaled to [-1, 1)."""
    rate, data = wavfile.read(path)
    if data.ndim > 1:
        data = data[:, 0]
    if np.issubdtype(data.dtype, np.integer):
        info = np.iinfo(data.dtype)
        if info.min == 0:  # 8-bit PCM is unsigned
            data = (data.astype(np.float64) - 128.0) / 128.0
        else:
            data = data.astype(np.float64) / -float(info.min)
    return Waveform(data.astype(np.float64), float(rate))


# ---------------------------------------------------------------- tensors

def encode_tensor(a) -> bytes:
    a = np.ascontiguousarray(a, dtype="<f4")
    head = TENSOR_MAGIC + struct.pack("<II", FORMAT_VERSION, a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.tobytes()


def decode_tensor(buf, offset: int = 0):
    """Parse one SSTN blob; returns (array, offset just past it)."""
    mv = memoryview(buf)
    if bytes(mv[offset:offset + 4]) != TENSOR_MAGIC:
        raise FormatError("bad tensor magic")
    if len(mv) < offset + 12:
        raise FormatError("truncated tensor header")
    version, ndim = struct.unpack_from("<II", mv, offset + 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported tensor version {version}")
    pos = offset + 12
    if len(mv) < pos + 4 * ndim:
        raise FormatError("truncated tensor dims")
    dims = struct.unpack_from(f"<{ndim}I", mv, pos)
    pos += 4 * ndim
    count = int(np.prod(dims, dtype=np.int64))
    end = pos + 4 * count
    if len(mv) < end:
        raise FormatError("truncated tensor payload")
    a = np.frombuffer(mv[pos:end], dtype="<f4").reshape(dims).astype(np.float32)
    return a, end


def _atomic_write(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def save_tensor(path, a) -> None:
    _atomic_write(path, encode_tensor(a))


def load_tensor(path) -> np.ndarray:
    data = Path(path).read_bytes()
    a, end = decode_tensor(data)
    if end != len(data):
        raise FormatError(f"{path}: {len(data) - end} trailing bytes")
    return a


# ---------------------------------------------------------------- checkpoints

def encode_model(m: ModelParams, metadata: dict | None = None, extra: dict | None = None) -> bytes:
    """Serialize parameters, buffers and optional extra tensors.

    Tensor names are prefixed ``param/``, ``buffer/`` or ``extra/``.
    """
    meta = json.dumps(metadata or {}, sort_keys=True).encode()
    named = [(f"param/{k}", v) for k, v in sorted(m.params.items())]
    named += [(f"buffer/{k}", v) for k, v in sorted(m.buffers.items())]
    named += [(f"extra/{k}", v) for k, v in sorted((extra or {}).items())]
    out = io.BytesIO()
    out.write(MODEL_MAGIC + struct.pack("<II", FORMAT_VERSION, len(meta)))
    out.write(meta)
    out.write(struct.pack("<I", len(named)))
    for name, v in named:
        raw = name.encode()
        out.write(struct.pack("<I", len(raw)) + raw)
        out.write(encode_tensor(v))
    return out.getvalue()


def decode_model(buf):
    """Inverse of :func:`encode_model`; returns (ModelParams, metadata, extra)."""
    mv = memoryview(buf)
    if bytes(mv[:4]) != MODEL_MAGIC:
        raise FormatError("bad checkpoint magic")
    version, meta_len = struct.unpack_from("<II", mv, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    pos = 12
    metadata = json.loads(bytes(mv[pos:pos + meta_len]).decode())
    pos += meta_len
    (count,) = struct.unpack_from("<I", mv, pos)
    pos += 4
    groups: dict[str, dict] = {"param": {}, "buffer": {}, "extra": {}}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", mv, pos)
        name = bytes(mv[pos + 4:pos + 4 + n]).decode()
        a, pos = decode_tensor(mv, pos + 4 + n)
        kind, _, key = name.partition("/")
        if kind not in groups:
            raise FormatError(f"unknown tensor kind in {name!r}")
        groups[kind][key] = a
    if pos != len(mv):
        raise FormatError("trailing bytes after checkpoint")
    shapes = parameter_shapes()
    if set(groups["param"]) != set(shapes):
        raise FormatError("checkpoint parameter names do not match the network")
    for k, shape in shapes.items():
        if groups["param"][k].shape != shape:
            raise FormatError(f"{k}: shape {groups['param'][k].shape}, expected {shape}")
    buffers = default_buffers()
    buffers.update(groups["buffer"])
    return ModelParams(groups["param"], buffers), metadata, groups["extra"]


def save_model(path, m: ModelParams, metadata=None, template: TemplateProfile | None = None,
               chirp_cfg: ChirpConfig | None = None) -> None:
    """Write a checkpoint; the template and chirp config ride along for inference."""
    meta = dict(metadata or {})
    extra = {}
    if template is not None:
        extra["template"] = template.magnitudes
        meta["template_n_averaged"] = template.n_averaged
    if chirp_cfg is not None:
        meta["chirp"] = chirp_cfg.to_dict()
    _atomic_write(path, encode_model(m.astype(np.float32), meta, extra))


def load_model(path):
    """Returns (ModelParams, metadata, template or None, ChirpConfig)."""
    m, meta, extra = decode_model(Path(path).read_bytes())
    template = None
    if "template" in extra:
        template = TemplateProfile(extra["template"].astype(np.float64),
                                   n_averaged=int(meta.get("template_n_averaged", 1)))
    return m, meta, template, ChirpConfig.from_dict(meta.get("chirp"))


# ---------------------------------------------------------------- json

def write_json(path, doc) -> None:
    _atomic_write(path, (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode())


def read_json(path):
    with open(path) as fh:
        return json.load(fh)
