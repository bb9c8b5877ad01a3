# vslan/services/checkpoint.py
"""
Checkpoint file.

    "VSLN" | u32 version | u32 meta length | meta JSON (UTF-8)
    u32 entry count, then per entry:
        u32 name length | name (UTF-8) | u32 rank | rank x u32 dims | little-endian float64 data

Entries are the model parameters in creation order followed by the Adam
moments, named "adam.m.<param>" and "adam.v.<param>".
"""
import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Dict, Tuple, Union

import numpy as np
from pydantic import ValidationError

from vslan.core.diffcore import AdamState
from vslan.core.exceptions import CheckpointError
from vslan.models.data import CheckpointMeta
from vslan.services.network import VslanModel, build_model

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"VSLN"
CHECKPOINT_VERSION = 1
_U32 = struct.Struct("<I")
_ADAM_M = "adam.m."
_ADAM_V = "adam.v."


@dataclass
class Checkpoint:
    meta: CheckpointMeta
    params: Dict[str, np.ndarray]
    adam: AdamState


def _write_entry(fh: BinaryIO, name: str, values: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    fh.write(_U32.pack(len(encoded)))
    fh.write(encoded)
    fh.write(_U32.pack(values.ndim))
    for d in values.shape:
        fh.write(_U32.pack(d))
    fh.write(np.ascontiguousarray(values, dtype="<f8").tobytes())


def save_checkpoint(
    path: Union[str, Path],
    model: VslanModel,
    adam: AdamState,
    epoch: int,
    config: dict,
) -> Path:
    path = Path(path)
    meta = CheckpointMeta(config=config, model=model.spec, epoch=epoch, adam_step=adam.step)
    entries = [(p.name, p.data) for p in model.store]
    entries += [(_ADAM_M + name, m) for name, m in adam.m.items()]
    entries += [(_ADAM_V + name, v) for name, v in adam.v.items()]
    meta_bytes = json.dumps(meta.model_dump(mode="json"), sort_keys=True).encode("utf-8")

    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(_U32.pack(CHECKPOINT_VERSION))
        fh.write(_U32.pack(len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(_U32.pack(len(entries)))
        for name, values in entries:
            _write_entry(fh, name, values)
    tmp.replace(path)
    logger.debug(f"wrote checkpoint {path} ({len(entries)} entries)")
    return path


class _Reader:
    def __init__(self, raw: bytes, path: Path):
        self.raw = raw
        self.path = path
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated at byte {self.offset}")
        chunk = self.raw[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    try:
        reader = _Reader(path.read_bytes(), path)
    except FileNotFoundError as e:
        raise CheckpointError(f"checkpoint not found: {path}") from e
    if reader.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version = reader.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    try:
        meta = CheckpointMeta.model_validate_json(reader.take(reader.u32()))
    except ValidationError as e:
        raise CheckpointError(f"{path}: invalid metadata: {e}") from e

    params: Dict[str, np.ndarray] = {}
    adam = AdamState(step=meta.adam_step)
    for _ in range(reader.u32()):
        name = reader.take(reader.u32()).decode("utf-8")
        shape = tuple(reader.u32() for _ in range(reader.u32()))
        count = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(reader.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
        if name.startswith(_ADAM_M):
            adam.m[name[len(_ADAM_M):]] = values
        elif name.startswith(_ADAM_V):
            adam.v[name[len(_ADAM_V):]] = values
        else:
            params[name] = values
    if reader.offset != len(reader.raw):
        raise CheckpointError(f"{path}: {len(reader.raw) - reader.offset} trailing bytes")
    return Checkpoint(meta=meta, params=params, adam=adam)


def restore_model(path: Union[str, Path]) -> Tuple[VslanModel, Checkpoint]:
    """Rebuild the network described by a checkpoint and load its weights."""
    ckpt = load_checkpoint(path)
    model = build_model(ckpt.meta.model)
    try:
        model.store.load_state_dict(ckpt.params)
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"{path}: parameters do not match the stored model spec: {e}") from e
    return model, ckpt
