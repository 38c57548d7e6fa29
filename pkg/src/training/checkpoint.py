"""
Binary checkpoint format

Layout (all integers little-endian):
    8 bytes   magic b"BIKOPCK\\x00"
    uint32    format version (1)
    uint32 n, n bytes   stage tag, utf-8
    uint32 n, n bytes   config blob, JSON with sorted keys
    uint32    record count
    per record:
        uint16 n, n bytes   parameter name, utf-8
        uint8               dtype code (see DTYPES)
        uint8               ndim
        ndim x uint32       shape
        uint64              payload byte count
        payload             raw little-endian C-order data
    4 bytes   end marker b"END\\x00"

The torch RNG state is stored as the uint8 record "__rng__.torch".
"""
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
import torch
import torch.nn as nn

from src.config import RunConfig, build_config
from src.errors import CheckpointVersionError, CorruptCheckpointError, MissingArtifactError
from src.models.meta_head import build_model

MAGIC = b"BIKOPCK\x00"
END_MARKER = b"END\x00"
VERSION = 1
RNG_RECORD = "__rng__.torch"

DTYPES: Dict[int, str] = {0: "<f4", 1: "<f8", 2: "<i8", 3: "|u1"}
TORCH_TO_CODE = {torch.float32: 0, torch.float64: 1, torch.int64: 2, torch.uint8: 3}
CODE_TO_TORCH = {code: dtype for dtype, code in TORCH_TO_CODE.items()}


@dataclass
class Checkpoint:
    """Named parameter arrays plus the config echo, RNG state and stage tag"""

    tensors: Dict[str, torch.Tensor]
    config: Dict[str, Any]
    stage: str
    rng_state: Optional[torch.Tensor] = None
    extra: Dict[str, Any] = field(default_factory=dict)


def parameter_digest(model: nn.Module) -> str:
    """sha256 over every state-dict entry, in state-dict order"""
    digest = hashlib.sha256()
    for name, tensor in model.state_dict().items():
        digest.update(name.encode("utf-8"))
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def _blob(data: bytes) -> bytes:
    return struct.pack("<I", len(data)) + data


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    records = dict(checkpoint.tensors)
    if checkpoint.rng_state is not None:
        records[RNG_RECORD] = checkpoint.rng_state
    config_blob = json.dumps(
        {"config": checkpoint.config, "extra": checkpoint.extra}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")

    chunks = [MAGIC, struct.pack("<I", VERSION), _blob(checkpoint.stage.encode("utf-8")), _blob(config_blob)]
    chunks.append(struct.pack("<I", len(records)))
    for name, tensor in records.items():
        tensor = tensor.detach().cpu().contiguous()
        if tensor.dtype not in TORCH_TO_CODE:
            raise TypeError(f"unsupported checkpoint dtype {tensor.dtype} for '{name}'")
        code = TORCH_TO_CODE[tensor.dtype]
        payload = tensor.numpy().astype(DTYPES[code], copy=False).tobytes()
        encoded_name = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded_name)) + encoded_name)
        chunks.append(struct.pack("<BB", code, tensor.dim()))
        chunks.append(struct.pack(f"<{tensor.dim()}I", *tensor.shape))
        chunks.append(struct.pack("<Q", len(payload)) + payload)
    chunks.append(END_MARKER)
    return b"".join(chunks)


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data = data
        self.offset = 0
        self.source = source

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise CorruptCheckpointError(f"{self.source}: truncated at byte {self.offset}")
        chunk = self.data[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(data: bytes, source: str = "<bytes>") -> Checkpoint:
    reader = _Reader(data, source)
    if reader.take(len(MAGIC)) != MAGIC:
        raise CorruptCheckpointError(f"{source}: bad magic bytes")
    (version,) = reader.unpack("<I")
    if version != VERSION:
        raise CheckpointVersionError(f"{source}: format version {version}, expected {VERSION}")
    try:
        stage = reader.take(reader.unpack("<I")[0]).decode("utf-8")
        blob = json.loads(reader.take(reader.unpack("<I")[0]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptCheckpointError(f"{source}: unreadable header ({e})") from e

    tensors: Dict[str, torch.Tensor] = {}
    (count,) = reader.unpack("<I")
    for _ in range(count):
        name = reader.take(reader.unpack("<H")[0]).decode("utf-8")
        code, ndim = reader.unpack("<BB")
        if code not in DTYPES:
            raise CorruptCheckpointError(f"{source}: unknown dtype code {code} for '{name}'")
        shape = reader.unpack(f"<{ndim}I")
        (size,) = reader.unpack("<Q")
        expected = int(np.prod(shape, dtype=np.int64)) * np.dtype(DTYPES[code]).itemsize
        if size != expected:
            raise CorruptCheckpointError(f"{source}: '{name}' declares {size} bytes, shape needs {expected}")
        array = np.frombuffer(reader.take(size), dtype=DTYPES[code]).reshape(shape)
        tensors[name] = torch.from_numpy(array.copy()).to(CODE_TO_TORCH[code])
    if reader.take(len(END_MARKER)) != END_MARKER:
        raise CorruptCheckpointError(f"{source}: missing end marker")
    if reader.offset != len(data):
        raise CorruptCheckpointError(f"{source}: {len(data) - reader.offset} trailing bytes")

    rng_state = tensors.pop(RNG_RECORD, None)
    return Checkpoint(
        tensors=tensors, config=blob["config"], stage=stage, rng_state=rng_state, extra=blob.get("extra", {})
    )


def save_checkpoint(
    model: nn.Module,
    path: Union[str, Path],
    config: Dict[str, Any],
    stage: str,
    rng_state: Optional[torch.Tensor] = None,
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    """Write every state-dict entry of `model` with the config echo and RNG state"""
    checkpoint = Checkpoint(
        tensors=dict(model.state_dict()),
        config=config,
        stage=stage,
        rng_state=torch.get_rng_state() if rng_state is None else rng_state,
        extra=extra or {},
    )
    return write_checkpoint(checkpoint, path)


def write_checkpoint(checkpoint: Checkpoint, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(checkpoint))
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(str(path), "no checkpoint at this path")
    return decode_checkpoint(path.read_bytes(), str(path))


def restore_model(
    checkpoint: Checkpoint, restore_rng: bool = False, config: Optional[RunConfig] = None
) -> nn.Module:
    """Rebuild the model described by the checkpoint's config echo (or `config`) and load its weights"""
    model = build_model(config if config is not None else build_config(checkpoint.config))
    model.load_state_dict(checkpoint.tensors)
    if restore_rng and checkpoint.rng_state is not None:
        torch.set_rng_state(checkpoint.rng_state)
    return model
