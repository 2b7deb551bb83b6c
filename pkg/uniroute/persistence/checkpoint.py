"""Self-describing binary parameter store.

    header     "OMMX" | version u32 | blob length u32 | config blob (JSON)
    directory  count u32, then per tensor:
               name length u32 | name | dtype u8 | rank u8 | dims u64 * rank
               | byte offset u64
    payload    raw little-endian f32 tensors
    trailer    64-bit blake2b of every preceding byte

All integers are little-endian; offsets are absolute file positions.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import struct
from dataclasses import dataclass
from typing import ClassVar, Dict, List, Optional, Tuple

import numpy as np
import torch
from torch import Tensor

from uniroute.domain.exception import UniRouteError
from uniroute.domain.model_config import ModelConfig
from uniroute.model.network import UniRouteModel
from uniroute.training.freeze import FreezeGroup, group_of
from uniroute.utils.serializer import json_dumps

logger = logging.getLogger(__name__)

MAGIC = b"OMMX"
FORMAT_VERSION = 1
DTYPE_F32 = 0
CHECKSUM_SIZE = 8


def checksum(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=CHECKSUM_SIZE).digest()


@dataclass(frozen=True, eq=False)
class CheckpointStore:
    """Parameters of one model plus what produced them.

    `groups` maps every tensor name to its freeze group.
    """

    config: ModelConfig
    tensors: Dict[str, Tensor]
    groups: Dict[str, FreezeGroup]
    stage: Optional[str] = None
    step: int = 0

    def __post_init__(self) -> None:
        if set(self.groups) != set(self.tensors):
            raise CheckpointFormatError(
                "freeze groups don't cover exactly the stored tensors"
            )

    @classmethod
    def from_model(
        cls, model: UniRouteModel, stage: Optional[str] = None, step: int = 0
    ) -> CheckpointStore:
        tensors = {
            name: p.detach().to(torch.float32).clone()
            for name, p in model.named_parameters()
        }
        return cls(
            config=model.config,
            tensors=tensors,
            groups={name: group_of(name) for name in tensors},
            stage=stage,
            step=step,
        )

    def to_model(self) -> UniRouteModel:
        model = UniRouteModel(self.config)
        self.load_into(model)
        return model

    def load_into(self, model: UniRouteModel) -> None:
        expected = dict(model.named_parameters())
        missing = sorted(set(expected) - set(self.tensors))
        unexpected = sorted(set(self.tensors) - set(expected))
        if missing or unexpected:
            raise CheckpointFormatError(
                f"checkpoint doesn't fit the model: missing {missing[:3]}, "
                f"unexpected {unexpected[:3]}"
            )
        with torch.no_grad():
            for name, parameter in expected.items():
                parameter.copy_(self.tensors[name])

    def metadata(self) -> dict:
        return {
            "config": dataclasses.asdict(self.config),
            "groups": {name: g.value for name, g in self.groups.items()},
            "stage": self.stage,
            "step": self.step,
        }


class _Layout:
    header: ClassVar[struct.Struct] = struct.Struct("<4sII")
    count: ClassVar[struct.Struct] = struct.Struct("<I")
    name_len: ClassVar[struct.Struct] = struct.Struct("<I")
    dtype_rank: ClassVar[struct.Struct] = struct.Struct("<BB")
    dim: ClassVar[struct.Struct] = struct.Struct("<Q")
    offset: ClassVar[struct.Struct] = struct.Struct("<Q")

    @classmethod
    def entry_size(cls, name: bytes, rank: int) -> int:
        return (
            cls.name_len.size
            + len(name)
            + cls.dtype_rank.size
            + cls.dim.size * rank
            + cls.offset.size
        )


def encode_checkpoint(store: CheckpointStore) -> bytes:
    blob = json_dumps(store.metadata(), sort_keys=True).encode("utf-8")
    names = sorted(store.tensors)
    arrays = [
        store.tensors[n].detach().cpu().contiguous().numpy().astype("<f4")
        for n in names
    ]
    encoded = [n.encode("utf-8") for n in names]

    head = _Layout.header.pack(MAGIC, FORMAT_VERSION, len(blob)) + blob
    directory_size = _Layout.count.size + sum(
        _Layout.entry_size(name, array.ndim)
        for name, array in zip(encoded, arrays)
    )
    cursor = len(head) + directory_size
    directory = [_Layout.count.pack(len(names))]
    for name, array in zip(encoded, arrays):
        directory.append(_Layout.name_len.pack(len(name)) + name)
        directory.append(_Layout.dtype_rank.pack(DTYPE_F32, array.ndim))
        directory.extend(_Layout.dim.pack(d) for d in array.shape)
        directory.append(_Layout.offset.pack(cursor))
        cursor += array.nbytes
    body = head + b"".join(directory) + b"".join(a.tobytes() for a in arrays)
    return body + checksum(body)


def save_checkpoint(store: CheckpointStore, path: str) -> str:
    data = encode_checkpoint(store)
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    partial = path + ".partial"
    with open(partial, "wb") as stream:
        stream.write(data)
    os.replace(partial, path)
    logger.info("Checkpoint written to %s (%s bytes)", path, len(data))
    return path


class _Reader:
    def __init__(self, data: bytes, limit: int) -> None:
        self.data = data
        self.limit = limit
        self.cursor = 0

    def take(self, layout: struct.Struct) -> Tuple:
        values = layout.unpack_from(self.bytes(layout.size))
        return values

    def bytes(self, size: int) -> bytes:
        end = self.cursor + size
        if end > self.limit:
            raise TruncatedCheckpointError(end, self.limit)
        chunk = self.data[self.cursor : end]
        self.cursor = end
        return chunk


def decode_checkpoint(data: bytes) -> CheckpointStore:
    """Checks run in order: magic, format version, structure (truncation),
    checksum. Names and metadata are decoded once the checksum holds."""
    if len(data) < _Layout.header.size + CHECKSUM_SIZE:
        raise TruncatedCheckpointError(
            _Layout.header.size + CHECKSUM_SIZE, len(data)
        )
    magic, version, blob_len = _Layout.header.unpack_from(data)
    if magic != MAGIC:
        raise BadMagicError(magic)
    if version != FORMAT_VERSION:
        raise FormatVersionError(version)

    body_end = len(data) - CHECKSUM_SIZE
    reader = _Reader(data, body_end)
    reader.cursor = _Layout.header.size
    blob = reader.bytes(blob_len)
    (count,) = reader.take(_Layout.count)
    entries: List[Tuple[bytes, int, Tuple[int, ...], int]] = []
    for _ in range(count):
        (name_len,) = reader.take(_Layout.name_len)
        name = reader.bytes(name_len)
        dtype, rank = reader.take(_Layout.dtype_rank)
        dims = tuple(reader.take(_Layout.dim)[0] for _ in range(rank))
        (offset,) = reader.take(_Layout.offset)
        entries.append((name, dtype, dims, offset))

    payload_end = reader.cursor
    for _, _, dims, offset in entries:
        payload_end = max(payload_end, offset + 4 * int(np.prod(dims)))
    if payload_end > body_end:
        raise TruncatedCheckpointError(payload_end, body_end)
    if checksum(data[:body_end]) != data[body_end:]:
        raise ChecksumMismatchError()

    metadata = json.loads(blob.decode("utf-8"))
    tensors = {}
    for raw_name, dtype, dims, offset in entries:
        name = raw_name.decode("utf-8")
        if dtype != DTYPE_F32:
            raise CheckpointFormatError(f"{name}: unknown dtype tag {dtype}")
        array = np.frombuffer(
            data, dtype="<f4", count=int(np.prod(dims)), offset=offset
        )
        tensors[name] = torch.from_numpy(array.reshape(dims).copy())
    return CheckpointStore(
        config=ModelConfig.create(**metadata["config"]),
        tensors=tensors,
        groups={
            name: FreezeGroup(group)
            for name, group in metadata["groups"].items()
        },
        stage=metadata["stage"],
        step=int(metadata["step"]),
    )


def load_checkpoint(path: str) -> CheckpointStore:
    if not os.path.isfile(path):
        raise CheckpointFormatError(f"no checkpoint at {path}")
    with open(path, "rb") as stream:
        return decode_checkpoint(stream.read())


class CheckpointFormatError(UniRouteError):
    def __init__(self, message: str) -> None:
        super().__init__(message, "CHECKPOINT_FORMAT_ERROR")


class BadMagicError(UniRouteError):
    def __init__(self, magic: bytes) -> None:
        super().__init__(
            f"not a checkpoint: magic {magic!r}, expected {MAGIC!r}",
            "BAD_MAGIC",
        )


class FormatVersionError(UniRouteError):
    def __init__(self, version: int) -> None:
        super().__init__(
            f"checkpoint format version {version}, this build reads "
            f"{FORMAT_VERSION}",
            "FORMAT_VERSION_MISMATCH",
        )


class ChecksumMismatchError(UniRouteError):
    def __init__(self) -> None:
        super().__init__("checkpoint checksum mismatch", "CHECKSUM_MISMATCH")


class TruncatedCheckpointError(UniRouteError):
    def __init__(self, needed: int, available: int) -> None:
        super().__init__(
            f"checkpoint truncated: needs {needed} bytes, has {available}",
            "TRUNCATED_CHECKPOINT",
        )
