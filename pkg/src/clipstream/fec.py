"""Systematic Reed-Solomon erasure coding over GF(2^8).

The generator is a Vandermonde matrix (points 0..n-1) right-multiplied by the
inverse of its top k x k block, so the first k rows form the identity and any k
rows stay invertible. Shard i of a codeword is row i of ``G @ data``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import InsufficientShards, PayloadTooLarge

PRIMITIVE_POLY = 0x11D
GF_ORDER = 256

EXP = [0] * 512
LOG = [0] * 256


def _build_tables() -> None:
    x = 1
    for i in range(255):
        EXP[i] = x
        LOG[x] = i
        x <<= 1
        if x & 0x100:
            x ^= PRIMITIVE_POLY
    for i in range(255, 512):
        EXP[i] = EXP[i - 255]


_build_tables()


def gf_add(a: int, b: int) -> int:
    return a ^ b


def gf_mul(a: int, b: int) -> int:
    if a == 0 or b == 0:
        return 0
    return EXP[LOG[a] + LOG[b]]


def gf_inv(a: int) -> int:
    if a == 0:
        raise ZeroDivisionError("0 has no inverse in GF(256)")
    return EXP[255 - LOG[a]]


def gf_div(a: int, b: int) -> int:
    if b == 0:
        raise ZeroDivisionError("division by zero in GF(256)")
    if a == 0:
        return 0
    return EXP[LOG[a] + 255 - LOG[b]]


def gf_pow(a: int, n: int) -> int:
    if n == 0:
        return 1
    if a == 0:
        return 0
    return EXP[(LOG[a] * n) % 255]


def _mul_table() -> np.ndarray:
    t = np.zeros((256, 256), dtype=np.uint8)
    for a in range(1, 256):
        for b in range(1, 256):
            t[a, b] = EXP[LOG[a] + LOG[b]]
    return t


MUL = _mul_table()


def mat_mul(a: list[list[int]], b: list[list[int]]) -> list[list[int]]:
    cols = len(b[0])
    out = []
    for row in a:
        acc = [0] * cols
        for k, coef in enumerate(row):
            if coef:
                brow = b[k]
                for j in range(cols):
                    if brow[j]:
                        acc[j] ^= gf_mul(coef, brow[j])
        out.append(acc)
    return out


def mat_inv(m: list[list[int]]) -> list[list[int]]:
    """Gauss-Jordan inversion; raises ValueError on a singular matrix."""
    n = len(m)
    a = np.zeros((n, 2 * n), dtype=np.uint8)
    a[:, :n] = np.array(m, dtype=np.uint8).reshape(n, n)
    a[:, n:] = np.eye(n, dtype=np.uint8)
    for col in range(n):
        nz = np.nonzero(a[col:, col])[0]
        if len(nz) == 0:
            raise ValueError("singular matrix")
        pivot = col + int(nz[0])
        if pivot != col:
            a[[col, pivot]] = a[[pivot, col]]
        a[col] = MUL[gf_inv(int(a[col, col])), a[col]]
        factors = a[:, col].copy()
        factors[col] = 0
        rows = np.nonzero(factors)[0]
        if len(rows):
            a[rows] ^= MUL[factors[rows][:, None], a[col][None, :]]
    return a[:, n:].tolist()


@lru_cache(maxsize=512)
def generator_matrix(k: int, m: int) -> tuple[tuple[int, ...], ...]:
    n = k + m
    vander = [[gf_pow(i, j) for j in range(k)] for i in range(n)]
    top_inv = mat_inv(vander[:k])
    return tuple(tuple(r) for r in mat_mul(vander, top_inv))


@lru_cache(maxsize=4096)
def _decode_matrix(k: int, m: int, rows: tuple[int, ...]) -> np.ndarray:
    gen = generator_matrix(k, m)
    return np.array(mat_inv([list(gen[r]) for r in rows]), dtype=np.uint8)


@dataclass(frozen=True)
class FecParams:
    k: int
    m: int
    shard_size: int = 1200

    def __post_init__(self):
        if self.k < 1 or self.m < 0:
            raise ValueError("need k >= 1 and m >= 0")
        if self.k + self.m > 255:
            raise PayloadTooLarge(f"k + m = {self.k + self.m} exceeds 255")
        if self.shard_size < 1:
            raise ValueError("shard_size must be positive")

    @property
    def n(self) -> int:
        return self.k + self.m

    @property
    def coded_length(self) -> int:
        return self.n * self.shard_size


LENGTH_PREFIX = struct.Struct("!I")


def data_shards_needed(payload_length: int, shard_size: int = 1200) -> int:
    """k for a payload, counting the 4-byte length prefix."""
    return max(1, math.ceil((payload_length + LENGTH_PREFIX.size) / shard_size))


@dataclass(frozen=True)
class ShardSet:
    """Shard i is ``shards[i]``, or None when erased."""

    shards: tuple[bytes | None, ...]

    @property
    def present(self) -> int:
        mask = 0
        for i, s in enumerate(self.shards):
            if s is not None:
                mask |= 1 << i
        return mask

    def count_present(self) -> int:
        return sum(s is not None for s in self.shards)

    def erase(self, *indices: int) -> "ShardSet":
        shards = list(self.shards)
        for i in indices:
            shards[i] = None
        return ShardSet(tuple(shards))

    def to_bytes(self) -> bytes:
        """Concatenate all shards; only valid when nothing is erased."""
        if any(s is None for s in self.shards):
            raise ValueError("cannot serialize a shard set with erasures")
        return b"".join(self.shards)

    @classmethod
    def from_bytes(cls, buf: bytes, params: FecParams, erased=()) -> "ShardSet":
        s = params.shard_size
        erased = set(erased)
        return cls(tuple(None if i in erased else bytes(buf[i * s:(i + 1) * s]) for i in range(params.n)))


def fec_encode(payload: bytes, params: FecParams) -> ShardSet:
    k, s = params.k, params.shard_size
    framed = LENGTH_PREFIX.pack(len(payload)) + bytes(payload)
    if len(framed) > k * s:
        need = data_shards_needed(len(payload), s)
        raise PayloadTooLarge(f"payload needs {need} data shards, params allow k={k}")
    data = np.zeros(k * s, dtype=np.uint8)
    data[:len(framed)] = np.frombuffer(framed, dtype=np.uint8)
    data = data.reshape(k, s)
    shards = [data[i].tobytes() for i in range(k)]
    if params.m:
        coefs = _parity_rows(k, params.m)
        parity = np.bitwise_xor.reduce(MUL[coefs[:, :, None], data[None, :, :]], axis=1)
        shards.extend(parity[r].tobytes() for r in range(params.m))
    return ShardSet(tuple(shards))


@lru_cache(maxsize=512)
def _parity_rows(k: int, m: int) -> np.ndarray:
    return np.array(generator_matrix(k, m)[k:], dtype=np.uint8)


def encode_payload(payload: bytes, params: FecParams) -> bytes:
    """Coded byte string as laid out on a stream: shards 0..n-1 back to back."""
    return fec_encode(payload, params).to_bytes()


def fec_decode(shards: ShardSet, params: FecParams) -> bytes:
    k, s = params.k, params.shard_size
    if len(shards.shards) != params.n:
        raise ValueError(f"expected {params.n} shard slots, got {len(shards.shards)}")
    present = [i for i, sh in enumerate(shards.shards) if sh is not None]
    for i in present:
        if len(shards.shards[i]) != s:
            raise ValueError(f"shard {i} has {len(shards.shards[i])} B, expected {s}")
    if len(present) < k:
        raise InsufficientShards(f"{len(present)} of {params.n} shards present, need {k}")
    if all(shards.shards[i] is not None for i in range(k)):
        framed = b"".join(shards.shards[:k])
    else:
        rows = tuple(present[:k])
        inv = _decode_matrix(k, params.m, rows)
        have = np.frombuffer(b"".join(shards.shards[r] for r in rows), dtype=np.uint8).reshape(k, s)
        missing = [i for i in range(k) if shards.shards[i] is None]
        rebuilt = np.bitwise_xor.reduce(MUL[inv[missing][:, :, None], have[None, :, :]], axis=1)
        out = list(shards.shards[:k])
        for j, i in enumerate(missing):
            out[i] = rebuilt[j].tobytes()
        framed = b"".join(out)
    (length,) = LENGTH_PREFIX.unpack_from(framed, 0)
    if length > k * s - LENGTH_PREFIX.size:
        raise ValueError("corrupt length prefix")
    return framed[LENGTH_PREFIX.size:LENGTH_PREFIX.size + length]


def parity_policy(k: int, loss_estimate: float = 0.0, mode: str = "static") -> int:
    """Parity shard count for a frame of k data shards.

    static: 15% of k. adaptive: scales with the sender's loss estimate,
    k * min(0.5, 4p + 0.02). Both round up and never return less than 1;
    mode "off" returns 0.
    """
    if not 0.0 <= loss_estimate <= 1.0:
        raise ValueError("loss_estimate must be within [0, 1]")
    if mode == "off":
        return 0
    if mode == "static":
        m = (15 * k + 99) // 100
    elif mode == "adaptive":
        m = math.ceil(round(k * min(0.5, 4 * loss_estimate + 0.02), 9))
    else:
        raise ValueError(f"unknown parity mode {mode!r}")
    return max(1, min(m, 255 - k))
