"""Binary checkpoints: magic header, JSON config record, named float32
tensors, and a trailing CRC32 integrity checksum.

Parameters travel as little-endian 32-bit floats; loading widens them back
to float64. A load of a save is therefore a fixpoint: saving the loaded
model reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from .align import AlignedModel, CrossModalFuse, TextEmbedder
from .autodiff import Tensor
from .model import Encoder, ModelConfig

MAGIC = b"TRCE"
VERSION = 1


class CheckpointError(ValueError):
    """Raised for malformed, corrupted, or incompatible checkpoint files."""


def _collect(model: Encoder | AlignedModel) -> tuple[dict, dict[str, np.ndarray]]:
    if isinstance(model, Encoder):
        config = {"kind": "encoder", "model": model.cfg.to_dict()}
        tensors = {name: p.data for name, p in model.params.items()}
    elif isinstance(model, AlignedModel):
        config = {
            "kind": "aligned",
            "model": model.encoder.cfg.to_dict(),
            "textenc": {
                "seed": model.textenc.seed,
                "bag_width": model.textenc.bag_width,
                "d_text": model.textenc.d_text,
            },
        }
        tensors = {name: p.data for name, p in model.encoder.params.items()}
        tensors.update({name: p.data for name, p in model.textenc.params.items()})
        tensors.update({name: p.data for name, p in model.fuse.params.items()})
        tensors["textenc.frozen"] = model.textenc.frozen_matrix
    else:
        raise CheckpointError(f"cannot checkpoint object of type {type(model).__name__}")
    return config, tensors


def save_checkpoint(model: Encoder | AlignedModel, path: str) -> None:
    config, tensors = _collect(model)
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    config_bytes = json.dumps(config, sort_keys=True).encode("utf-8")
    blob += struct.pack("<I", len(config_bytes))
    blob += config_bytes
    blob += struct.pack("<I", len(tensors))
    for name in sorted(tensors):
        data = np.ascontiguousarray(tensors[name], dtype="<f4")
        encoded = name.encode("utf-8")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += struct.pack("<B", data.ndim)
        blob += struct.pack(f"<{data.ndim}I", *data.shape)
        blob += data.tobytes()
    blob += struct.pack("<I", zlib.crc32(bytes(blob)))
    with open(path, "wb") as fh:
        fh.write(blob)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.offset = 0

    def read(self, n: int) -> bytes:
        if self.offset + n > len(self.blob):
            raise CheckpointError("truncated checkpoint file")
        out = self.blob[self.offset : self.offset + n]
        self.offset += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.read(struct.calcsize(fmt)))


def load_checkpoint(path: str) -> Encoder | AlignedModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12:
        raise CheckpointError("truncated checkpoint file")
    stored_crc = struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(blob[:-4]) != stored_crc:
        raise CheckpointError("checksum mismatch: checkpoint is corrupted")
    reader = _Reader(blob[:-4])
    if reader.read(4) != MAGIC:
        raise CheckpointError("bad magic bytes: not a checkpoint file")
    (version,) = reader.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (config_len,) = reader.unpack("<I")
    config = json.loads(reader.read(config_len).decode("utf-8"))
    (n_tensors,) = reader.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        (name_len,) = reader.unpack("<H")
        name = reader.read(name_len).decode("utf-8")
        (ndim,) = reader.unpack("<B")
        shape = reader.unpack(f"<{ndim}I") if ndim else ()
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(reader.read(4 * count), dtype="<f4").reshape(shape)
        tensors[name] = data.astype(np.float64)

    cfg = ModelConfig(**config["model"])
    if config["kind"] == "encoder":
        params = {n: Tensor(t, requires_grad=True) for n, t in tensors.items()}
        return Encoder(cfg, params=params)
    if config["kind"] == "aligned":
        enc_params = {
            n: Tensor(t, requires_grad=True) for n, t in tensors.items()
            if not n.startswith(("textenc.", "fuse."))
        }
        te_meta = config["textenc"]
        textenc = TextEmbedder(
            d=cfg.d,
            seed=te_meta["seed"],
            bag_width=te_meta["bag_width"],
            d_text=te_meta["d_text"],
            params={
                n: Tensor(tensors[n], requires_grad=True)
                for n in ("textenc.proj.w", "textenc.proj.b")
            },
        )
        stored_frozen = tensors["textenc.frozen"]
        if not np.array_equal(
            stored_frozen.astype(np.float32), textenc.frozen_matrix.astype(np.float32)
        ):
            raise CheckpointError("frozen text table does not match its seed derivation")
        fuse = CrossModalFuse(
            d=cfg.d,
            params={
                n: Tensor(tensors[n], requires_grad=True)
                for n in ("fuse.wq", "fuse.wk", "fuse.wv", "fuse.wo")
            },
        )
        return AlignedModel(encoder=Encoder(cfg, params=enc_params), textenc=textenc, fuse=fuse)
    raise CheckpointError(f"unknown checkpoint kind {config['kind']!r}")


def parameter_count(model: Encoder | AlignedModel) -> int:
    _, tensors = _collect(model)
    return int(sum(t.size for t in tensors.values()))
