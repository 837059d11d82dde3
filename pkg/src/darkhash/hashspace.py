"""Binary hash-code primitives.

Codes live in {-1, +1}^K. Hamming distance between two codes is
(K - <a, b>) / 2, which is exact integer arithmetic for sign codes.
Quantization maps a continuous hash feature to a code with sign(v) = +1
for v > 0 and -1 otherwise (zero goes to -1).

This module also reads and writes the packed ``DHC1`` code-database file
format shared with the standalone hamming kernel: header magic ``DHC1``,
little-endian u32 fields N, K, L, then N records of ceil(K/8) bit-packed
code bytes followed by ceil(L/8) bit-packed label bytes. Bit j of byte
floor(k/8) is code position k (LSB first), +1 <-> 1 and -1 <-> 0, with
zero padding past K (or L).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

DHC1_MAGIC = b"DHC1"


class InvalidInputError(ValueError):
    """Input violates a value-domain precondition (non-finite, empty, ...)."""


class DimensionError(ValueError):
    """Operands have incompatible shapes."""


def quantize(features: np.ndarray) -> np.ndarray:
    """Sign-quantize a continuous feature vector (or batch) to a +-1 code.

    Zero quantizes to -1.
    """
    f = np.asarray(features, dtype=np.float64)
    if not np.all(np.isfinite(f)):
        raise InvalidInputError("features contain non-finite entries")
    return np.where(f > 0, 1, -1).astype(np.int8)


def _check_code(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c)
    if not np.all(np.abs(c) == 1):
        raise InvalidInputError("hash code entries must be exactly -1 or +1")
    return c.astype(np.int32)


def hamming_distance(a: np.ndarray, b: np.ndarray) -> int:
    """Hamming distance between two +-1 codes: (K - <a, b>) / 2."""
    a = _check_code(a)
    b = _check_code(b)
    if a.shape != b.shape:
        raise DimensionError(f"code length mismatch: {a.shape} vs {b.shape}")
    k = a.shape[-1]
    return int((k - int(np.dot(a, b))) // 2)


@dataclass
class CodeDatabase:
    """Aligned code / label / id columns for one retrieval database.

    codes:  (N, K) int8 in {-1, +1}
    labels: (N, L) uint8 multi-hot, every row has at least one set bit
    ids:    N stable item identifiers
    """

    codes: np.ndarray
    labels: np.ndarray
    ids: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.codes = np.asarray(self.codes, dtype=np.int8)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.codes.ndim != 2 or self.labels.ndim != 2:
            raise DimensionError("codes and labels must be 2-D arrays")
        if not self.ids:
            self.ids = [str(i) for i in range(self.codes.shape[0])]
        if not (self.codes.shape[0] == self.labels.shape[0] == len(self.ids)):
            raise DimensionError("codes, labels and ids must have equal length")
        if self.codes.size and not np.all(np.abs(self.codes) == 1):
            raise InvalidInputError("codes must be +-1")
        if self.labels.size and not np.all(self.labels.sum(axis=1) >= 1):
            raise InvalidInputError("every label vector needs at least one set bit")

    def __len__(self) -> int:
        return self.codes.shape[0]

    @property
    def k_bits(self) -> int:
        return self.codes.shape[1]

    @property
    def n_classes(self) -> int:
        return self.labels.shape[1]


def rank_database(query: np.ndarray, db: CodeDatabase) -> np.ndarray:
    """Indices of ``db`` sorted by ascending Hamming distance to ``query``.

    Ties are broken by ascending original index so rankings (and every
    metric downstream) are deterministic.
    """
    query = _check_code(query)
    if len(db) == 0:
        return np.empty(0, dtype=np.int64)
    if query.shape[0] != db.k_bits:
        raise DimensionError(
            f"query has {query.shape[0]} bits, database has {db.k_bits}"
        )
    k = db.k_bits
    dists = (k - db.codes.astype(np.int32) @ query) // 2
    # lexsort: last key is primary
    return np.lexsort((np.arange(len(db)), dists)).astype(np.int64)


def hamming_distances(query: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Vector of Hamming distances from one query to each row of ``codes``."""
    query = _check_code(query)
    codes = np.asarray(codes, dtype=np.int32)
    k = codes.shape[1]
    return (k - codes @ query) // 2


# --- DHC1 packed file format ------------------------------------------------


def _pack_rows(bits01: np.ndarray) -> np.ndarray:
    """Pack (N, B) 0/1 rows into (N, ceil(B/8)) bytes, LSB-first."""
    return np.packbits(bits01.astype(np.uint8), axis=1, bitorder="little")


def _unpack_rows(packed: np.ndarray, n_bits: int) -> np.ndarray:
    return np.unpackbits(packed, axis=1, count=n_bits, bitorder="little")


def dhc1_bytes(db: CodeDatabase) -> bytes:
    """Serialize a database to the DHC1 wire image."""
    n, k = db.codes.shape
    l = db.labels.shape[1]
    code_bytes = _pack_rows((db.codes > 0).astype(np.uint8))
    label_bytes = _pack_rows(db.labels)
    records = np.concatenate([code_bytes, label_bytes], axis=1)
    return DHC1_MAGIC + struct.pack("<III", n, k, l) + records.tobytes()


def write_dhc1(db: CodeDatabase, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dhc1_bytes(db))


def parse_dhc1(blob: bytes) -> CodeDatabase:
    """Parse a DHC1 image. Item ids are synthesized as row indices."""
    if len(blob) < 16 or blob[:4] != DHC1_MAGIC:
        raise InvalidInputError("not a DHC1 file (bad magic or truncated header)")
    n, k, l = struct.unpack("<III", blob[4:16])
    if k == 0:
        raise InvalidInputError("DHC1 file with K=0")
    cb, lb = (k + 7) // 8, (l + 7) // 8
    rec = cb + lb
    body = np.frombuffer(blob, dtype=np.uint8, offset=16)
    if body.size != n * rec:
        raise InvalidInputError(
            f"DHC1 payload size {body.size} != N*record ({n}*{rec})"
        )
    body = body.reshape(n, rec)
    code_bits = _unpack_rows(body[:, :cb], k)
    label_bits = _unpack_rows(body[:, cb:], l)
    codes = (code_bits.astype(np.int8) * 2 - 1) if n else np.zeros((0, k), np.int8)
    return CodeDatabase(codes=codes, labels=label_bits)


def read_dhc1(path) -> CodeDatabase:
    with open(path, "rb") as fh:
        return parse_dhc1(fh.read())
