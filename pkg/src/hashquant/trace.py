"""Hash-access traces consumed by the accelerator model.

A trace is the flat record of one rendering pass: for every pixel, the four
corner table entries touched at every level (in visit order), plus one GEMM
work descriptor per MLP layer per pixel tile. The binary form (HTRC) is
little-endian:

    magic "HTRC" | version u32 | pixel_count u32 | level_count u32
    | features_per_level u32 | level_entry_counts u32 x level_count
    | access records {pixel_id u32, level u16, entry_index u32}
    | GEMM descriptors {layer_id u16, M u32, K u32, N u32}

The access-record count is pixel_count * level_count * 4 (four corners per
level per pixel); descriptors run to end of file.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

TRACE_MAGIC = b"HTRC"
TRACE_VERSION = 1

_ACCESS_DTYPE = np.dtype([("pixel", "<u4"), ("level", "<u2"), ("entry", "<u4")])
_GEMM_DTYPE = np.dtype([("layer", "<u2"), ("m", "<u4"), ("k", "<u4"), ("n", "<u4")])


class TraceFormatError(ValueError):
    """Raised when a trace file cannot be parsed."""


@dataclass
class AccessTrace:
    pixel_ids: np.ndarray
    levels: np.ndarray
    entry_indices: np.ndarray
    gemm_layer_ids: np.ndarray
    gemm_m: np.ndarray
    gemm_k: np.ndarray
    gemm_n: np.ndarray
    pixel_count: int
    level_count: int
    level_entry_counts: np.ndarray
    features_per_level: int
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.pixel_ids = np.asarray(self.pixel_ids, dtype=np.uint32)
        self.levels = np.asarray(self.levels, dtype=np.uint16)
        self.entry_indices = np.asarray(self.entry_indices, dtype=np.uint32)
        self.gemm_layer_ids = np.asarray(self.gemm_layer_ids, dtype=np.uint16)
        self.gemm_m = np.asarray(self.gemm_m, dtype=np.uint32)
        self.gemm_k = np.asarray(self.gemm_k, dtype=np.uint32)
        self.gemm_n = np.asarray(self.gemm_n, dtype=np.uint32)
        self.level_entry_counts = np.asarray(self.level_entry_counts, dtype=np.uint32)
        if not (len(self.pixel_ids) == len(self.levels) == len(self.entry_indices)):
            raise ValueError("access record arrays must have equal length")
        if len(self.level_entry_counts) != self.level_count:
            raise ValueError("level_entry_counts length must equal level_count")
        if len(self.pixel_ids) != self.pixel_count * self.level_count * 4:
            raise ValueError("record count must equal pixel_count * level_count * 4")
        if len(self.levels) and int(self.levels.max()) >= self.level_count:
            raise ValueError("access record level out of range")
        if len(self.entry_indices):
            bounds = self.level_entry_counts.astype(np.int64)[self.levels]
            if np.any(self.entry_indices.astype(np.int64) >= bounds):
                raise ValueError("entry index beyond its level's table size")

    @property
    def num_accesses(self) -> int:
        return len(self.pixel_ids)

    @property
    def num_layers(self) -> int:
        if len(self.gemm_layer_ids) == 0:
            return 0
        return int(self.gemm_layer_ids.max()) + 1

    def fingerprint(self) -> str:
        """Content hash, used to memoize per-trace results."""
        cached = self._cache.get("fingerprint")
        if cached is None:
            h = hashlib.md5()
            h.update(struct.pack("<III", self.pixel_count, self.level_count, self.features_per_level))
            h.update(self.level_entry_counts.tobytes())
            for arr in (self.pixel_ids, self.levels, self.entry_indices,
                        self.gemm_layer_ids, self.gemm_m, self.gemm_k, self.gemm_n):
                h.update(arr.tobytes())
            cached = h.hexdigest()
            self._cache["fingerprint"] = cached
        return cached

    def write(self, path) -> None:
        header = struct.pack("<4sIIII", TRACE_MAGIC, TRACE_VERSION,
                             self.pixel_count, self.level_count, self.features_per_level)
        records = np.empty(self.num_accesses, dtype=_ACCESS_DTYPE)
        records["pixel"] = self.pixel_ids
        records["level"] = self.levels
        records["entry"] = self.entry_indices
        gemms = np.empty(len(self.gemm_layer_ids), dtype=_GEMM_DTYPE)
        gemms["layer"] = self.gemm_layer_ids
        gemms["m"] = self.gemm_m
        gemms["k"] = self.gemm_k
        gemms["n"] = self.gemm_n
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(self.level_entry_counts.astype("<u4").tobytes())
            fh.write(records.tobytes())
            fh.write(gemms.tobytes())

    @classmethod
    def read(cls, path) -> "AccessTrace":
        with open(path, "rb") as fh:
            blob = fh.read()
        head_size = struct.calcsize("<4sIIII")
        if len(blob) < head_size:
            raise TraceFormatError("trace file truncated before header")
        magic, version, pixel_count, level_count, features = struct.unpack_from("<4sIIII", blob, 0)
        if magic != TRACE_MAGIC:
            raise TraceFormatError(f"bad trace magic {magic!r}")
        if version != TRACE_VERSION:
            raise TraceFormatError(f"unsupported trace version {version}")
        off = head_size
        counts_bytes = 4 * level_count
        if len(blob) < off + counts_bytes:
            raise TraceFormatError("trace file truncated in level table")
        level_entry_counts = np.frombuffer(blob, dtype="<u4", count=level_count, offset=off).copy()
        off += counts_bytes
        n_records = pixel_count * level_count * 4
        rec_bytes = n_records * _ACCESS_DTYPE.itemsize
        if len(blob) < off + rec_bytes:
            raise TraceFormatError("trace file truncated in access records")
        records = np.frombuffer(blob, dtype=_ACCESS_DTYPE, count=n_records, offset=off)
        off += rec_bytes
        tail = len(blob) - off
        if tail % _GEMM_DTYPE.itemsize != 0:
            raise TraceFormatError("trailing bytes do not align with GEMM descriptors")
        gemms = np.frombuffer(blob, dtype=_GEMM_DTYPE, count=tail // _GEMM_DTYPE.itemsize, offset=off)
        try:
            return cls(
                pixel_ids=records["pixel"].copy(),
                levels=records["level"].copy(),
                entry_indices=records["entry"].copy(),
                gemm_layer_ids=gemms["layer"].copy(),
                gemm_m=gemms["m"].copy(),
                gemm_k=gemms["k"].copy(),
                gemm_n=gemms["n"].copy(),
                pixel_count=pixel_count,
                level_count=level_count,
                level_entry_counts=level_entry_counts,
                features_per_level=features,
            )
        except ValueError as exc:
            raise TraceFormatError(f"inconsistent trace contents: {exc}") from exc
