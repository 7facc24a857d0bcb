"""Embedding vectors, task-labelled embedding banks, and bank file I/O.

Scalars are float64 in memory. The binary bank format stores float32
(matching common embedding dumps), so a save is lossy for values that
need more than 24 mantissa bits; loading is exact, and save/load of
float32-representable banks round-trips bit-identically.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .errors import (
    DegenerateVectorError,
    DimensionError,
    FormatError,
    IoError,
    ParameterError,
)

BINARY_MAGIC = b"EBNK"
BINARY_VERSION = 1
JSONL_VERSION = 1


class Modality(Enum):
    VISUAL = "visual"
    TEXT = "text"

    @classmethod
    def from_string(cls, name: str) -> "Modality":
        try:
            return cls(name)
        except ValueError:
            raise ParameterError(f"unknown modality {name!r}; expected 'visual' or 'text'") from None


class BankFormat(Enum):
    JSON_LINES = "jsonl"
    BINARY = "binary"

    @classmethod
    def from_string(cls, name: str) -> "BankFormat":
        try:
            return cls(name)
        except ValueError:
            raise ParameterError(f"unknown bank format {name!r}; expected 'jsonl' or 'binary'") from None


def _as_vector(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise DimensionError(f"expected a non-empty 1-d vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ParameterError("vector entries must be finite")
    return v


@dataclass(frozen=True)
class Embedding:
    """A D-dimensional real vector tagged with the modality that produced it."""

    values: np.ndarray
    modality: Modality

    def __post_init__(self):
        if not isinstance(self.modality, Modality):
            raise ParameterError(f"modality must be a Modality, got {self.modality!r}")
        v = _as_vector(self.values).copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return int(self.values.size)


@dataclass(frozen=True)
class EmbeddingBank:
    """N same-dimension embeddings of one modality, each labelled by a task id.

    Task ids need not be unique (several goals may share a task) but must
    be non-empty strings.
    """

    modality: Modality
    dim: int
    task_ids: tuple[str, ...]
    values: np.ndarray  # (N, dim)

    def __post_init__(self):
        if not isinstance(self.modality, Modality):
            raise ParameterError(f"modality must be a Modality, got {self.modality!r}")
        if int(self.dim) < 1:
            raise DimensionError(f"bank dim must be >= 1, got {self.dim}")
        object.__setattr__(self, "dim", int(self.dim))
        ids = tuple(self.task_ids)
        for i, tid in enumerate(ids):
            if not isinstance(tid, str) or not tid:
                raise ParameterError(f"row {i}: task_id must be a non-empty string")
        object.__setattr__(self, "task_ids", ids)
        vals = np.ascontiguousarray(self.values, dtype=np.float64)
        if vals.ndim != 2 or vals.shape != (len(ids), self.dim):
            raise DimensionError(
                f"values shape {vals.shape} does not match {len(ids)} rows of dim {self.dim}"
            )
        if not np.all(np.isfinite(vals)):
            raise ParameterError("bank entries must be finite")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_rows(
        cls,
        modality: Modality,
        rows: Iterable[tuple[str, Iterable[float]]],
        dim: int | None = None,
    ) -> "EmbeddingBank":
        rows = list(rows)
        ids = []
        vecs = []
        for i, (tid, vec) in enumerate(rows):
            v = np.asarray(vec, dtype=np.float64)
            if v.ndim != 1:
                raise DimensionError(f"row {i}: expected a 1-d vector, got shape {v.shape}")
            if dim is None:
                dim = int(v.size)
            if v.size != dim:
                raise DimensionError(f"row {i}: expected {dim} values, got {v.size}")
            ids.append(tid)
            vecs.append(v)
        if dim is None:
            raise ParameterError("dim is required for an empty bank")
        values = np.array(vecs, dtype=np.float64).reshape(len(ids), dim)
        return cls(modality, dim, tuple(ids), values)

    @property
    def n(self) -> int:
        return len(self.task_ids)

    def rows(self) -> Iterator[tuple[str, np.ndarray]]:
        for tid, row in zip(self.task_ids, self.values):
            yield tid, row

    def embedding(self, i: int) -> Embedding:
        return Embedding(self.values[i], self.modality)

    def task_set(self) -> set[str]:
        return set(self.task_ids)

    def with_values(self, values: np.ndarray, dim: int | None = None) -> "EmbeddingBank":
        """Same task ids and modality over a replacement value matrix."""
        values = np.asarray(values, dtype=np.float64)
        if dim is None:
            dim = int(values.shape[1]) if values.ndim == 2 else self.dim
        return EmbeddingBank(self.modality, dim, self.task_ids, values)


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two vectors, in [-1, 1].

    Accepts Embedding or plain array-like arguments. Evaluation order is
    symmetric, so cosine_similarity(a, b) == cosine_similarity(b, a)
    exactly.
    """
    u = a.values if isinstance(a, Embedding) else _as_vector(a)
    w = b.values if isinstance(b, Embedding) else _as_vector(b)
    if u.size != w.size:
        raise DimensionError(f"dimension mismatch: {u.size} vs {w.size}")
    nu = float(np.linalg.norm(u))
    nw = float(np.linalg.norm(w))
    if nu == 0.0 or nw == 0.0:
        raise DegenerateVectorError("cosine similarity of a zero vector is undefined")
    return float(np.dot(u, w) / (nu * nw))


def normalize(v):
    """Scale a vector to unit length, preserving direction.

    Embedding in, Embedding out; array in, array out.
    """
    if isinstance(v, Embedding):
        return Embedding(normalize(v.values), v.modality)
    u = _as_vector(v)
    n = float(np.linalg.norm(u))
    if n == 0.0:
        raise DegenerateVectorError("cannot normalize a zero vector")
    return u / n


# ---------------------------------------------------------------------------
# File formats.
#
# JSON lines: a header object
#   {"format":"ebank","version":1,"modality":"visual"|"text","dim":D}
# followed by one {"task_id": str, "v": [D numbers]} object per row.
#
# Binary: magic "EBNK", u8 version=1, u8 modality (0=visual, 1=text),
# u32 LE dim, u64 LE count, count*dim LE float32 row-major, then each
# task_id as u16 LE byte length + UTF-8 bytes.
# ---------------------------------------------------------------------------

_MODALITY_CODE = {Modality.VISUAL: 0, Modality.TEXT: 1}
_CODE_MODALITY = {v: k for k, v in _MODALITY_CODE.items()}


def save_bank(bank: EmbeddingBank, path, format: BankFormat) -> None:
    """Write a bank to disk; deterministic (same bank -> same bytes)."""
    path = Path(path)
    if format is BankFormat.JSON_LINES:
        payload = _encode_jsonl(bank)
    elif format is BankFormat.BINARY:
        payload = _encode_binary(bank)
    else:
        raise ParameterError(f"unknown bank format {format!r}")
    try:
        path.write_bytes(payload)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_bank(path, format: BankFormat | None = None) -> EmbeddingBank:
    """Read a bank from disk; format is sniffed from the file when omitted."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if format is None:
        format = BankFormat.BINARY if raw[:4] == BINARY_MAGIC else BankFormat.JSON_LINES
    if format is BankFormat.JSON_LINES:
        return _decode_jsonl(raw, str(path))
    if format is BankFormat.BINARY:
        return _decode_binary(raw, str(path))
    raise ParameterError(f"unknown bank format {format!r}")


def detect_format(path) -> BankFormat:
    try:
        with open(path, "rb") as fh:
            head = fh.read(4)
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    return BankFormat.BINARY if head == BINARY_MAGIC else BankFormat.JSON_LINES


def _encode_jsonl(bank: EmbeddingBank) -> bytes:
    header = {
        "format": "ebank",
        "version": JSONL_VERSION,
        "modality": bank.modality.value,
        "dim": bank.dim,
    }
    lines = [json.dumps(header, sort_keys=True, separators=(",", ":"))]
    for tid, row in bank.rows():
        lines.append(
            json.dumps(
                {"task_id": tid, "v": [float(x) for x in row]},
                sort_keys=True,
                separators=(",", ":"),
            )
        )
    return ("\n".join(lines) + "\n").encode("utf-8")


def _decode_jsonl(raw: bytes, name: str) -> EmbeddingBank:
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{name}: not valid UTF-8 ({exc})") from exc
    lines = text.split("\n")
    while lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise FormatError(f"{name}: empty file, expected an ebank header on line 1")
    header = _parse_json_line(lines[0], name, 1)
    if not isinstance(header, dict):
        raise FormatError(f"{name}: line 1: header must be a JSON object")
    expected_keys = {"format", "version", "modality", "dim"}
    if set(header) != expected_keys:
        raise FormatError(
            f"{name}: line 1: header keys {sorted(header)} != {sorted(expected_keys)}"
        )
    if header["format"] != "ebank":
        raise FormatError(f"{name}: line 1: format is {header['format']!r}, expected 'ebank'")
    if header["version"] != JSONL_VERSION:
        raise FormatError(f"{name}: line 1: unsupported version {header['version']!r}")
    if header["modality"] not in ("visual", "text"):
        raise FormatError(f"{name}: line 1: bad modality {header['modality']!r}")
    dim = header["dim"]
    if not isinstance(dim, int) or isinstance(dim, bool) or dim < 1:
        raise FormatError(f"{name}: line 1: dim must be a positive integer, got {dim!r}")
    modality = Modality(header["modality"])

    ids = []
    vecs = []
    for row_idx, line in enumerate(lines[1:], start=1):
        lineno = row_idx + 1
        obj = _parse_json_line(line, name, lineno)
        if not isinstance(obj, dict) or set(obj) != {"task_id", "v"}:
            raise FormatError(f"{name}: line {lineno}: row must have exactly task_id and v")
        tid = obj["task_id"]
        if not isinstance(tid, str) or not tid:
            raise FormatError(f"{name}: line {lineno}: task_id must be a non-empty string")
        vec = obj["v"]
        if not isinstance(vec, list) or not all(
            isinstance(x, (int, float)) and not isinstance(x, bool) for x in vec
        ):
            raise FormatError(f"{name}: line {lineno}: v must be a list of numbers")
        if len(vec) != dim:
            raise DimensionError(
                f"{name}: row {row_idx} (line {lineno}): expected {dim} values, got {len(vec)}"
            )
        if not all(math.isfinite(x) for x in vec):
            raise FormatError(f"{name}: line {lineno}: non-finite value")
        ids.append(tid)
        vecs.append(vec)
    values = np.array(vecs, dtype=np.float64).reshape(len(ids), dim)
    return EmbeddingBank(modality, dim, tuple(ids), values)


def _parse_json_line(line: str, name: str, lineno: int):
    try:
        return json.loads(line)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{name}: line {lineno}: invalid JSON ({exc.msg})") from exc


def _encode_binary(bank: EmbeddingBank) -> bytes:
    floats = bank.values.astype("<f4")
    bad = np.argwhere(~np.isfinite(floats))
    if bad.size:
        r, c = bad[0]
        raise ParameterError(
            f"row {r}, dim {c}: value {bank.values[r, c]!r} is outside float32 range"
        )
    buf = bytearray()
    buf += BINARY_MAGIC
    buf += struct.pack("<BB", BINARY_VERSION, _MODALITY_CODE[bank.modality])
    buf += struct.pack("<IQ", bank.dim, bank.n)
    buf += floats.tobytes(order="C")
    for i, tid in enumerate(bank.task_ids):
        encoded = tid.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise ParameterError(f"row {i}: task_id longer than 65535 UTF-8 bytes")
        buf += struct.pack("<H", len(encoded))
        buf += encoded
    return bytes(buf)


def _decode_binary(raw: bytes, name: str) -> EmbeddingBank:
    def need(offset: int, count: int, what: str) -> None:
        if offset + count > len(raw):
            raise FormatError(f"{name}: truncated at offset {offset}: expected {what}")

    need(0, 4, "magic")
    if raw[:4] != BINARY_MAGIC:
        raise FormatError(f"{name}: offset 0: bad magic {raw[:4]!r}, expected {BINARY_MAGIC!r}")
    need(4, 2, "version and modality bytes")
    version, modality_code = struct.unpack_from("<BB", raw, 4)
    if version != BINARY_VERSION:
        raise FormatError(f"{name}: offset 4: unsupported version {version}")
    if modality_code not in _CODE_MODALITY:
        raise FormatError(f"{name}: offset 5: bad modality code {modality_code}")
    need(6, 12, "dim and count")
    dim, count = struct.unpack_from("<IQ", raw, 6)
    if dim < 1:
        raise FormatError(f"{name}: offset 6: dim must be >= 1, got {dim}")
    offset = 18
    n_floats = dim * count
    need(offset, 4 * n_floats, f"{n_floats} float32 values")
    values = (
        np.frombuffer(raw, dtype="<f4", count=n_floats, offset=offset)
        .astype(np.float64)
        .reshape(count, dim)
    )
    bad = np.argwhere(~np.isfinite(values))
    if bad.size:
        raise FormatError(f"{name}: row {bad[0][0]}: non-finite value")
    offset += 4 * n_floats
    ids = []
    for i in range(count):
        need(offset, 2, f"length prefix of task_id {i}")
        (length,) = struct.unpack_from("<H", raw, offset)
        offset += 2
        need(offset, length, f"task_id {i} ({length} bytes)")
        try:
            tid = raw[offset : offset + length].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{name}: task_id {i}: invalid UTF-8 ({exc})") from exc
        if not tid:
            raise FormatError(f"{name}: task_id {i}: empty string")
        ids.append(tid)
        offset += length
    if offset != len(raw):
        raise FormatError(f"{name}: {len(raw) - offset} trailing bytes at offset {offset}")
    return EmbeddingBank(_CODE_MODALITY[modality_code], dim, tuple(ids), values)
