"""Binary masks over the prunable part of the shared encoder.

A :class:`ParamSpace` lays every encoder block out in one flat vector.  Masks
store one bit per *prunable* coordinate only; coordinates of non-prunable
blocks (embeddings) are kept implicitly.

Mask file layout (little endian)::

    b"SSMK" | u16 version | 32-byte ParamSpace digest | u16 len + task id (utf-8)
    | u32 iteration | u32 bit count | packed bits | u32 CRC32 of everything before
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, FormatError, StructuralError, UndefinedRatioError

MAGIC = b"SSMK"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class ParamBlock:
    name: str
    shape: tuple[int, ...]
    prunable: bool
    layer: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


class ParamSpace:
    """Ordered catalogue of encoder parameter blocks with a stable flat index."""

    def __init__(self, blocks: Iterable[ParamBlock]):
        self.blocks: tuple[ParamBlock, ...] = tuple(blocks)
        names = [b.name for b in self.blocks]
        if len(set(names)) != len(names):
            raise StructuralError("parameter block names must be unique")
        self._slices: dict[str, slice] = {}
        self._prunable_slices: dict[str, slice] = {}
        offset = pruned_offset = 0
        positions = []
        layers = []
        for block in self.blocks:
            self._slices[block.name] = slice(offset, offset + block.size)
            if block.prunable:
                self._prunable_slices[block.name] = slice(pruned_offset, pruned_offset + block.size)
                positions.append(np.arange(offset, offset + block.size))
                layers.append(np.full(block.size, block.layer))
                pruned_offset += block.size
            offset += block.size
        self.total = offset
        self.n_prunable = pruned_offset
        self.prunable_positions = np.concatenate(positions) if positions else np.zeros(0, np.int64)
        self.prunable_layers = np.concatenate(layers) if layers else np.zeros(0, np.int64)

    def __len__(self) -> int:
        return len(self.blocks)

    def __eq__(self, other) -> bool:
        return isinstance(other, ParamSpace) and self.blocks == other.blocks

    def __hash__(self) -> int:
        return hash(self.blocks)

    @property
    def n_fixed(self) -> int:
        return self.total - self.n_prunable

    @property
    def num_layers(self) -> int:
        return max((b.layer for b in self.blocks), default=0)

    def block(self, name: str) -> ParamBlock:
        for b in self.blocks:
            if b.name == name:
                return b
        raise KeyError(name)

    def slice_of(self, name: str) -> slice:
        return self._slices[name]

    def prunable_slice_of(self, name: str) -> slice:
        return self._prunable_slices[name]

    def digest(self) -> bytes:
        layout = [[b.name, list(b.shape), b.prunable, b.layer] for b in self.blocks]
        return hashlib.sha256(json.dumps(layout, separators=(",", ":")).encode()).digest()

    def prunable_values(self, theta: np.ndarray) -> np.ndarray:
        return theta[self.prunable_positions]

    def expand(self, mask: "MaskMatrix | None") -> np.ndarray:
        """Full-length float mask over every encoder coordinate; non-prunable entries are 1."""
        full = np.ones(self.total)
        if mask is not None:
            _check_fits(mask, self)
            full[self.prunable_positions] = mask.bits
        return full

    def block_masks(self, mask: "MaskMatrix") -> dict[str, np.ndarray]:
        """Per prunable block, the mask reshaped to that block."""
        _check_fits(mask, self)
        bits = mask.bits.astype(np.float64)
        return {
            b.name: bits[self._prunable_slices[b.name]].reshape(b.shape)
            for b in self.blocks
            if b.prunable
        }


class MaskMatrix:
    """Keep/prune bit per prunable coordinate for one task; immutable."""

    __slots__ = ("task", "bits", "iteration")

    def __init__(self, task: str, bits, iteration: int = 1):
        arr = np.array(bits, dtype=bool).reshape(-1)
        arr.setflags(write=False)
        object.__setattr__(self, "task", str(task))
        object.__setattr__(self, "bits", arr)
        object.__setattr__(self, "iteration", int(iteration))

    def __setattr__(self, key, value):
        raise AttributeError("MaskMatrix is immutable")

    def __len__(self) -> int:
        return self.bits.size

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, MaskMatrix)
            and self.task == other.task
            and self.iteration == other.iteration
            and np.array_equal(self.bits, other.bits)
        )

    def __repr__(self) -> str:
        return f"MaskMatrix(task={self.task!r}, iteration={self.iteration}, kept={self.kept}/{len(self)})"

    @property
    def kept(self) -> int:
        return int(self.bits.sum())

    def with_bits(self, bits, iteration: int | None = None) -> "MaskMatrix":
        return MaskMatrix(self.task, bits, self.iteration if iteration is None else iteration)

    def covers(self, other: "MaskMatrix") -> bool:
        """True when every bit kept by ``other`` is also kept here."""
        return bool(np.all(self.bits | ~other.bits))


def _check_fits(mask: MaskMatrix, space: ParamSpace) -> None:
    if len(mask) != space.n_prunable:
        raise StructuralError(
            f"mask for task {mask.task!r} has {len(mask)} bits, space has {space.n_prunable} prunable coordinates"
        )


def full_mask(space: ParamSpace, task: str, iteration: int = 1) -> MaskMatrix:
    return MaskMatrix(task, np.ones(space.n_prunable, dtype=bool), iteration)


def sparsity(mask: MaskMatrix, space: ParamSpace) -> float:
    """Remaining fraction ``(kept prunable + non-prunable) / |theta_E|``.

    Higher means denser; 1.0 is the unpruned network.
    """
    _check_fits(mask, space)
    if space.total == 0:
        raise StructuralError("empty parameter space")
    return (mask.kept + space.n_fixed) / space.total


def overlap_ratio(masks: Sequence[MaskMatrix]) -> float:
    """Size of the intersection of keep-sets over the size of their union."""
    if len(masks) < 2:
        raise ConfigError("overlap ratio needs at least two masks")
    n = len(masks[0])
    if any(len(m) != n for m in masks):
        raise StructuralError("masks are defined over different spaces")
    stack = np.stack([m.bits for m in masks])
    union = int(stack.any(axis=0).sum())
    if union == 0:
        raise UndefinedRatioError("overlap ratio of masks with empty union")
    return int(stack.all(axis=0).sum()) / union


def _task_names(tasks: int | Sequence[str]) -> list[str]:
    if isinstance(tasks, int):
        if tasks < 1:
            raise ConfigError("need at least one task")
        return [str(i) for i in range(tasks)]
    names = list(tasks)
    if not names:
        raise ConfigError("need at least one task")
    return names


def hard_sharing_masks(space: ParamSpace, tasks: int | Sequence[str]) -> list[MaskMatrix]:
    return [full_mask(space, t) for t in _task_names(tasks)]


def hierarchical_masks(space: ParamSpace, task_to_layer: Mapping[str, int]) -> list[MaskMatrix]:
    """Task ``t`` keeps every prunable coordinate of layers ``<= task_to_layer[t]``.

    Prunable blocks tagged layer 0 (input stage) are always kept.
    """
    n_layers = space.num_layers
    masks = []
    for task, layer in task_to_layer.items():
        if not 1 <= layer <= n_layers:
            raise ConfigError(f"task {task!r} supervised at layer {layer}, encoder has layers 1..{n_layers}")
        masks.append(MaskMatrix(task, space.prunable_layers <= layer))
    return masks


# ---------------------------------------------------------------------------
# serialisation


def serialize_mask(mask: MaskMatrix, space: ParamSpace) -> bytes:
    _check_fits(mask, space)
    task = mask.task.encode("utf-8")
    body = b"".join(
        [
            MAGIC,
            struct.pack("<H", FORMAT_VERSION),
            space.digest(),
            struct.pack("<H", len(task)),
            task,
            struct.pack("<II", mask.iteration, len(mask)),
            np.packbits(mask.bits, bitorder="little").tobytes(),
        ]
    )
    return body + struct.pack("<I", zlib.crc32(body))


def deserialize_mask(blob: bytes, space: ParamSpace | None = None) -> MaskMatrix:
    """Inverse of :func:`serialize_mask`; with ``space`` given, the layout digest must match."""
    if len(blob) < 4 + 2 + 32 + 2 + 8 + 4 or blob[:4] != MAGIC:
        raise FormatError("not a mask file")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError("mask file checksum mismatch")
    (version,) = struct.unpack_from("<H", body, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported mask format version {version}")
    digest = body[6:38]
    (task_len,) = struct.unpack_from("<H", body, 38)
    pos = 40 + task_len
    if len(body) < pos + 8:
        raise FormatError("truncated mask header")
    task = body[40:pos].decode("utf-8")
    iteration, n_bits = struct.unpack_from("<II", body, pos)
    payload = body[pos + 8 :]
    if len(payload) != (n_bits + 7) // 8:
        raise FormatError("mask payload length does not match bit count")
    if space is not None:
        if digest != space.digest():
            raise StructuralError(f"mask for task {task!r} was built for a different parameter layout")
        if n_bits != space.n_prunable:
            raise StructuralError("mask bit count does not match parameter space")
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), count=n_bits, bitorder="little")
    return MaskMatrix(task, bits.astype(bool), iteration)


def save_mask(path: str | Path, mask: MaskMatrix, space: ParamSpace) -> None:
    Path(path).write_bytes(serialize_mask(mask, space))


def load_mask(path: str | Path, space: ParamSpace | None = None) -> MaskMatrix:
    return deserialize_mask(Path(path).read_bytes(), space)
