"""ctypes bridge to the packed hamming kernel (optional native extension).

The kernel is a standalone shared library that exchanges DHC1 byte
buffers and scalar dimensions; nothing here is required for the primary
pipeline, which always has the pure-Python evaluator available.

Library lookup order: the DARKHASH_KERNEL_LIB environment variable, then
the kernel crate's release/debug build directories relative to the
repository root.
"""

from __future__ import annotations

import ctypes
import os
from pathlib import Path

import numpy as np

_LIB_NAMES = ("libhamming_kernel.so", "libhamming_kernel.dylib")


class KernelUnavailableError(RuntimeError):
    pass


class KernelCallError(RuntimeError):
    pass


def find_kernel_library() -> Path | None:
    env = os.environ.get("DARKHASH_KERNEL_LIB")
    if env:
        p = Path(env)
        return p if p.exists() else None
    root = Path(__file__).resolve().parents[2]
    for profile in ("release", "debug"):
        for name in _LIB_NAMES:
            p = root / "kernel" / "target" / profile / name
            if p.exists():
                return p
    return None


class KernelEvaluator:
    """Thin wrapper over the dh_* C entry points."""

    def __init__(self, lib_path: Path):
        self._lib = ctypes.CDLL(str(lib_path))
        self._lib.dh_map.restype = ctypes.c_int32
        self._lib.dh_map.argtypes = [
            ctypes.c_char_p, ctypes.c_uint64, ctypes.c_char_p, ctypes.c_uint64,
            ctypes.c_int64, ctypes.POINTER(ctypes.c_double)]
        self._lib.dh_rank.restype = ctypes.c_int32
        self._lib.dh_rank.argtypes = [
            ctypes.c_char_p, ctypes.c_uint64, ctypes.c_char_p, ctypes.c_uint64,
            ctypes.POINTER(ctypes.c_uint32), ctypes.c_uint64]
        self._lib.dh_topk.restype = ctypes.c_int32
        self._lib.dh_topk.argtypes = [
            ctypes.c_char_p, ctypes.c_uint64, ctypes.c_char_p, ctypes.c_uint64,
            ctypes.c_uint64, ctypes.POINTER(ctypes.c_uint32), ctypes.c_uint64]
        self._lib.dh_pack.restype = ctypes.c_int32
        self._lib.dh_pack.argtypes = [
            ctypes.c_char_p, ctypes.c_char_p, ctypes.c_uint64, ctypes.c_uint64,
            ctypes.c_uint64, ctypes.c_char_p, ctypes.c_uint64]
        self._lib.dh_packed_size.restype = ctypes.c_uint64
        self._lib.dh_packed_size.argtypes = [
            ctypes.c_uint64, ctypes.c_uint64, ctypes.c_uint64]
        self._lib.dh_distance.restype = ctypes.c_int32
        self._lib.dh_distance.argtypes = [
            ctypes.c_char_p, ctypes.c_char_p, ctypes.c_uint64,
            ctypes.POINTER(ctypes.c_uint32)]

    @classmethod
    def load(cls) -> "KernelEvaluator":
        path = find_kernel_library()
        if path is None:
            raise KernelUnavailableError(
                "hamming kernel library not found; build it with "
                "`cargo build --release` in kernel/ or set DARKHASH_KERNEL_LIB")
        return cls(path)

    def map(self, queries_dhc1: bytes, db_dhc1: bytes,
            target: int | None = None) -> float:
        out = ctypes.c_double(0.0)
        status = self._lib.dh_map(
            queries_dhc1, len(queries_dhc1), db_dhc1, len(db_dhc1),
            -1 if target is None else int(target), ctypes.byref(out))
        if status != 0:
            raise KernelCallError(f"dh_map failed with status {status}")
        return out.value

    def rank(self, db_dhc1: bytes, query_code_bytes: bytes, n: int) -> np.ndarray:
        out = (ctypes.c_uint32 * n)()
        status = self._lib.dh_rank(db_dhc1, len(db_dhc1), query_code_bytes,
                                   len(query_code_bytes), out, n)
        if status != 0:
            raise KernelCallError(f"dh_rank failed with status {status}")
        return np.ctypeslib.as_array(out).copy()

    def topk(self, db_dhc1: bytes, query_code_bytes: bytes, k: int) -> np.ndarray:
        out = (ctypes.c_uint32 * k)()
        status = self._lib.dh_topk(db_dhc1, len(db_dhc1), query_code_bytes,
                                   len(query_code_bytes), k, out, k)
        if status != 0:
            raise KernelCallError(f"dh_topk failed with status {status}")
        return np.ctypeslib.as_array(out).copy()

    def distance(self, a_code_bytes: bytes, b_code_bytes: bytes, k: int) -> int:
        out = ctypes.c_uint32(0)
        status = self._lib.dh_distance(a_code_bytes, b_code_bytes, k,
                                       ctypes.byref(out))
        if status != 0:
            raise KernelCallError(f"dh_distance failed with status {status}")
        return int(out.value)

    def pack(self, codes: np.ndarray, labels: np.ndarray) -> bytes:
        n, k = codes.shape
        l = labels.shape[1]
        size = self._lib.dh_packed_size(n, k, l)
        buf = ctypes.create_string_buffer(size)
        status = self._lib.dh_pack(
            np.ascontiguousarray(codes, dtype=np.int8).tobytes(),
            np.ascontiguousarray(labels, dtype=np.uint8).tobytes(),
            n, k, l, buf, size)
        if status != 0:
            raise KernelCallError(f"dh_pack failed with status {status}")
        return buf.raw
