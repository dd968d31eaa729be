"""Binary files for dataset encodings and model checkpoints.

Encoding file layout (little endian)::

    magic    8s   b"SPINENC\\0"
    version  u16
    h, f, e  3 x u32
    dtype    u8   (1 = float32, 2 = float64)
    schema   u64  schema fingerprint
    params   u64  parameter fingerprint
    checksum u64  blake2b-64 of the payload
    payload       h*f*e elements, row-major

Checkpoint files share the framing (magic b"SPINCKPT"): after the fixed
header comes a JSON metadata block and a sequence of named tensors.
"""
from __future__ import annotations

import hashlib
import json
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

ENC_MAGIC = b"SPINENC\0"
CKPT_MAGIC = b"SPINCKPT"
VERSION = 1
_ENC_HEADER = struct.Struct("<8sHIIIBQQQ")
_CKPT_HEADER = struct.Struct("<8sHBQQQQ")
_DTYPE_CODES = {torch.float32: 1, torch.float64: 2}
_CODE_DTYPES = {1: np.float32, 2: np.float64}


class EncodingError(ValueError):
    pass


def _digest(blob: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(blob, digest_size=8).digest(), "little")


def params_fingerprint(model) -> int:
    """Digest of the architecture plus every parameter value (as float64 bytes)."""
    h = hashlib.blake2b(digest_size=8)
    h.update(json.dumps(vars(model.cfg), sort_keys=True).encode())
    h.update(model.schema.fingerprint().to_bytes(8, "little"))
    for name, p in model.named_parameters():
        h.update(name.encode())
        h.update(p.detach().to(torch.float64).contiguous().numpy().tobytes())
    return int.from_bytes(h.digest(), "little")


@dataclass
class EncodedDataset:
    h_d: np.ndarray
    schema_fingerprint: int
    params_fingerprint: int
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model, h_d: torch.Tensor, n_rows: int | None = None) -> "EncodedDataset":
        meta = {"created": time.strftime("%Y-%m-%dT%H:%M:%S"), "n_rows": n_rows}
        return cls(
            h_d.detach().cpu().numpy().copy(),
            model.schema.fingerprint(),
            params_fingerprint(model),
            meta,
        )

    def check_compatible(self, model) -> None:
        if self.schema_fingerprint != model.schema.fingerprint():
            raise EncodingError("encoding was built for a different schema")
        if self.params_fingerprint != params_fingerprint(model):
            raise EncodingError("encoding was built with different model parameters")

    def tensor(self, dtype: torch.dtype) -> torch.Tensor:
        return torch.from_numpy(self.h_d).to(dtype)


def export_encoding(enc: EncodedDataset, path: str | Path, dtype=np.float32) -> int:
    """Write the encoding; returns the file size in bytes."""
    arr = np.ascontiguousarray(enc.h_d, dtype=dtype)
    code = _DTYPE_CODES[torch.float64 if arr.dtype == np.float64 else torch.float32]
    payload = arr.astype("<" + arr.dtype.str[1:]).tobytes()
    h, f, e = arr.shape
    header = _ENC_HEADER.pack(
        ENC_MAGIC, VERSION, h, f, e, code,
        enc.schema_fingerprint, enc.params_fingerprint, _digest(payload),
    )
    Path(path).write_bytes(header + payload)
    return len(header) + len(payload)


def import_encoding(path: str | Path, model=None) -> EncodedDataset:
    blob = Path(path).read_bytes()
    if len(blob) < _ENC_HEADER.size:
        raise EncodingError("file too short for an encoding header")
    magic, version, h, f, e, code, schema_fp, params_fp, checksum = _ENC_HEADER.unpack_from(blob)
    if magic != ENC_MAGIC:
        raise EncodingError("not an encoding file (bad magic)")
    if version != VERSION:
        raise EncodingError(f"unsupported encoding version {version}")
    if code not in _CODE_DTYPES:
        raise EncodingError(f"unknown dtype code {code}")
    payload = blob[_ENC_HEADER.size:]
    dt = np.dtype(_CODE_DTYPES[code]).newbyteorder("<")
    if len(payload) != h * f * e * dt.itemsize:
        raise EncodingError("payload length does not match header extents")
    if _digest(payload) != checksum:
        raise EncodingError("checksum mismatch: file is corrupt")
    arr = np.frombuffer(payload, dtype=dt).reshape(h, f, e).astype(_CODE_DTYPES[code])
    enc = EncodedDataset(arr, schema_fp, params_fp)
    if model is not None:
        enc.check_compatible(model)
    return enc


def save_checkpoint(path: str | Path, model, meta: dict, extra: dict[str, torch.Tensor] | None = None) -> None:
    """Write every model parameter (and optional extra tensors) with names."""
    tensors = {f"param/{k}": v for k, v in model.state_dict().items()}
    tensors.update(extra or {})
    meta_blob = json.dumps(meta, sort_keys=True).encode()
    body = [struct.pack("<I", len(meta_blob)), meta_blob, struct.pack("<I", len(tensors))]
    for name, t in tensors.items():
        arr = t.detach().cpu().contiguous().numpy()
        name_b = name.encode()
        body.append(struct.pack("<H", len(name_b)) + name_b)
        body.append(struct.pack("<2sB", arr.dtype.str[1:].encode()[:2].ljust(2), arr.ndim))
        body.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        body.append(arr.astype(arr.dtype.newbyteorder("<")).tobytes())
    payload = b"".join(body)
    dtype_code = _DTYPE_CODES.get(model.dtype, 0)
    header = _CKPT_HEADER.pack(
        CKPT_MAGIC, VERSION, dtype_code, model.schema.fingerprint(),
        params_fingerprint(model), len(tensors), _digest(payload),
    )
    Path(path).write_bytes(header + payload)


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, torch.Tensor], int]:
    """Returns (metadata, named tensors, params fingerprint)."""
    blob = Path(path).read_bytes()
    if len(blob) < _CKPT_HEADER.size:
        raise EncodingError("file too short for a checkpoint header")
    magic, version, _, _, params_fp, count, checksum = _CKPT_HEADER.unpack_from(blob)
    if magic != CKPT_MAGIC or version != VERSION:
        raise EncodingError("not a checkpoint file")
    payload = memoryview(blob)[_CKPT_HEADER.size:]
    if _digest(bytes(payload)) != checksum:
        raise EncodingError("checksum mismatch: checkpoint is corrupt")
    pos = 0

    def take(n):
        nonlocal pos
        chunk = payload[pos:pos + n]
        pos += n
        return chunk

    (meta_len,) = struct.unpack("<I", take(4))
    meta = json.loads(bytes(take(meta_len)))
    (n_tensors,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode()
        code, ndim = struct.unpack("<2sB", take(3))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim)) if ndim else ()
        dt = np.dtype("<" + code.decode())
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(take(n * dt.itemsize), dtype=dt).reshape(shape)
        tensors[name] = torch.from_numpy(arr.copy())
    return meta, tensors, params_fp
