"""Self-describing checkpoint files.

Layout: a UTF-8 text header of ``key = value`` lines (values JSON-encoded)
terminated by ``end_header``, followed by a little-endian binary section of
blobs.  Each blob is::

    u16 name length | name | u8 ndim | u32 dims... | u64 byte count | f8 data | u32 crc32

The header records the section length and SHA-256 so truncation or corruption
is detected before anything is decoded.
"""
from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .data import Vocabulary
from .model import Model, ModelConfig
from .tensor import DTYPE

MAGIC = "DENSEMSA-CHECKPOINT"
FORMAT_VERSION = 1
END = "end_header"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model_config: ModelConfig
    vocab: Vocabulary
    arrays: dict
    meta: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def build_model(self) -> Model:
        model = Model(self.model_config, self.vocab, seed=int(self.meta.get("seed", 0)))
        model.load_state_arrays(self.arrays)
        return model

    @classmethod
    def from_model(cls, model: Model, meta: Optional[dict] = None, extra: Optional[dict] = None):
        arrays = model.state_arrays()
        if extra:
            arrays.update({k: v for k, v in extra.items() if k.startswith("slot/")})
        return cls(model.cfg, model.vocab, arrays, dict(meta or {}))


def encode_blobs(arrays: dict) -> bytes:
    out = bytearray()
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
        data = a.tobytes()
        out += struct.pack("<Q", len(data)) + data
        out += struct.pack("<I", zlib.crc32(data))
    return bytes(out)


def decode_blobs(buf: bytes) -> dict:
    arrays = {}
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"parameter section truncated at byte {pos} (needs {n} more)")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    while pos < len(buf):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        (nbytes,) = struct.unpack("<Q", take(8))
        data = take(nbytes)
        (crc,) = struct.unpack("<I", take(4))
        if zlib.crc32(data) != crc:
            raise CheckpointError(f"checksum mismatch in blob {name!r}")
        arrays[name] = np.frombuffer(data, dtype="<f8").astype(DTYPE).reshape(shape)
    return arrays


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    body = encode_blobs(ckpt.arrays)
    header = {"format_version": ckpt.version}
    header.update({f"model.{k}": v for k, v in ckpt.model_config.to_dict().items()})
    header["vocab"] = ckpt.vocab.symbols
    header.update({f"meta.{k}": v for k, v in ckpt.meta.items()})
    header["param_section_bytes"] = len(body)
    header["param_section_sha256"] = hashlib.sha256(body).hexdigest()
    text = MAGIC + "\n" + "".join(f"{k} = {json.dumps(v)}\n" for k, v in header.items()) + END + "\n"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(text.encode("utf-8") + body)
    return path


def split_file(raw: bytes) -> tuple[str, bytes]:
    marker = ("\n" + END + "\n").encode()
    at = raw.find(marker)
    if at < 0:
        raise CheckpointError("checkpoint header is truncated (no end marker)")
    return raw[:at].decode("utf-8"), raw[at + len(marker):]


def parameter_section(path) -> bytes:
    return split_file(Path(path).read_bytes())[1]


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    header_text, body = split_file(path.read_bytes())
    lines = header_text.split("\n")
    if lines[0] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic line)")
    header = {}
    for ln in lines[1:]:
        key, sep, value = ln.partition(" = ")
        if not sep:
            raise CheckpointError(f"malformed header line {ln!r}")
        try:
            header[key] = json.loads(value)
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"malformed header value for {key!r}") from exc
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version!r} (expected {FORMAT_VERSION})")
    expected = header.get("param_section_bytes")
    if len(body) != expected:
        raise CheckpointError(f"parameter section is {len(body)} bytes, header says {expected}: file truncated")
    if hashlib.sha256(body).hexdigest() != header.get("param_section_sha256"):
        raise CheckpointError("parameter section checksum mismatch")
    cfg = ModelConfig.from_dict({k[6:]: v for k, v in header.items() if k.startswith("model.")})
    vocab = Vocabulary(header["vocab"])
    meta = {k[5:]: v for k, v in header.items() if k.startswith("meta.")}
    return Checkpoint(cfg, vocab, decode_blobs(body), meta, version)
