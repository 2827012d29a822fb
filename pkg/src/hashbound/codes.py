"""Bit-packed binary hash codes.

A hash code is a fixed-length vector in {-1, +1}^h. Codes are packed into
64-bit words (bit k of the code, 1-based, lives at packed bit k-1) so that
Hamming distance is XOR plus popcount and storage equality coincides with
code equality. The same bit order defines the canonical code index

    i = sum_k 1{b_k = +1} * 2^(k-1),

which exact-table operations rely on, and the on-disk HBC1 record layout.
Strings render codes MSB-first, i.e. "(b_h ... b_1)", so reading +1 as 1
gives the binary representation of the index.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidInputError, UnsupportedWidthError

WORD_BITS = 64
MAX_INDEX_BITS = 16
HBC1_MAGIC = b"HBC1"

__all__ = [
    "BitCode",
    "RealCode",
    "binarize",
    "hamming_distance",
    "code_to_index",
    "index_to_code",
    "sign_matrix",
    "pack_sign_matrix",
    "hamming_matrix",
    "read_hbc1",
    "write_hbc1",
    "MAX_INDEX_BITS",
    "HBC1_MAGIC",
]


def _words_needed(length: int) -> int:
    return (length + WORD_BITS - 1) // WORD_BITS


@dataclass(frozen=True, slots=True)
class BitCode:
    """An immutable code in {-1, +1}^h packed into 64-bit words.

    words: little-endian tuple of 64-bit integers; bit k-1 of the stream is 1
    exactly when code bit b_k is +1. All bits at positions >= length are zero
    (canonical packing), so tuple equality and hashing match code equality.
    """

    words: tuple[int, ...]
    length: int

    def __post_init__(self) -> None:
        if self.length < 1:
            raise InvalidInputError(f"code length must be >= 1, got {self.length}")
        if len(self.words) != _words_needed(self.length):
            raise InvalidInputError(
                f"expected {_words_needed(self.length)} words for length "
                f"{self.length}, got {len(self.words)}"
            )
        for w in self.words:
            if not (0 <= w < (1 << WORD_BITS)):
                raise InvalidInputError("packed words must fit in 64 bits")
        tail = self.length % WORD_BITS
        if tail and self.words[-1] >> tail:
            raise InvalidInputError("bits beyond the code length must be zero")

    @classmethod
    def from_signs(cls, signs: Iterable[int]) -> "BitCode":
        """Build a code from a +1/-1 sequence (b_1 first)."""
        words: list[int] = []
        current = 0
        n = 0
        for s in signs:
            if s not in (-1, 1):
                raise InvalidInputError(f"code entries must be +1 or -1, got {s!r}")
            if s > 0:
                current |= 1 << (n % WORD_BITS)
            n += 1
            if n % WORD_BITS == 0:
                words.append(current)
                current = 0
        if n == 0:
            raise InvalidInputError("cannot build a zero-length code")
        if n % WORD_BITS:
            words.append(current)
        return cls(tuple(words), n)

    def to_signs(self) -> np.ndarray:
        """Return the code as an int8 array of +1/-1, b_1 first."""
        out = np.empty(self.length, dtype=np.int8)
        for k in range(self.length):
            bit = (self.words[k // WORD_BITS] >> (k % WORD_BITS)) & 1
            out[k] = 1 if bit else -1
        return out

    def bit(self, k: int) -> int:
        """Value (+1/-1) of bit b_k, 1-based."""
        if not 1 <= k <= self.length:
            raise InvalidInputError(f"bit index {k} out of range 1..{self.length}")
        word = self.words[(k - 1) // WORD_BITS]
        return 1 if (word >> ((k - 1) % WORD_BITS)) & 1 else -1

    def to_record(self) -> bytes:
        """Pack into ceil(h/8) bytes, bit k-1 of the stream LSB-first per byte."""
        nbytes = (self.length + 7) // 8
        raw = b"".join(w.to_bytes(8, "little") for w in self.words)
        return raw[:nbytes]

    @classmethod
    def from_record(cls, record: bytes, length: int) -> "BitCode":
        """Inverse of to_record for a single code of the given length."""
        if len(record) != (length + 7) // 8:
            raise InvalidInputError(
                f"record holds {len(record)} bytes, expected {(length + 7) // 8}"
            )
        value = int.from_bytes(record, "little")
        if length % 8 and value >> length:
            raise InvalidInputError("record has bits set beyond the code length")
        words = tuple(
            (value >> (WORD_BITS * j)) & ((1 << WORD_BITS) - 1)
            for j in range(_words_needed(length))
        )
        return cls(words, length)

    def __str__(self) -> str:
        inner = "".join("+1" if self.bit(k) > 0 else "-1" for k in range(self.length, 0, -1))
        return f"({inner})"


@dataclass(frozen=True, slots=True)
class RealCode:
    """A length-h vector of finite reals, the pre-binarization model output."""

    values: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.values) == 0:
            raise InvalidInputError("cannot build a zero-length real code")
        if not all(np.isfinite(v) for v in self.values):
            raise InvalidInputError("real code entries must be finite")

    @property
    def length(self) -> int:
        return len(self.values)


def binarize(l) -> BitCode:
    """Binarize a real vector: bit k is +1 iff l_k >= 0 (zero maps to +1).

    Accepts a RealCode or any 1-d array-like of finite reals.
    """
    if isinstance(l, RealCode):
        values = np.asarray(l.values, dtype=np.float64)
    else:
        values = np.asarray(l, dtype=np.float64)
        if values.ndim != 1 or values.size == 0:
            raise InvalidInputError("binarize expects a non-empty 1-d vector")
        if not np.all(np.isfinite(values)):
            raise InvalidInputError("binarize requires finite inputs")
    return BitCode.from_signs(np.where(values >= 0, 1, -1).tolist())


def hamming_distance(a: BitCode, b: BitCode) -> int:
    """Number of positions where two equal-length codes differ."""
    if a.length != b.length:
        raise InvalidInputError(f"length mismatch: {a.length} vs {b.length}")
    return sum((x ^ y).bit_count() for x, y in zip(a.words, b.words))


def code_to_index(b: BitCode) -> int:
    """Canonical index i = sum_k 1{b_k = +1} * 2^(k-1); needs h <= 16."""
    if b.length > MAX_INDEX_BITS:
        raise UnsupportedWidthError(
            f"code index is only defined up to {MAX_INDEX_BITS} bits, got {b.length}"
        )
    return b.words[0]


def index_to_code(i: int, h: int) -> BitCode:
    """Code whose canonical index is i, for 0 <= i < 2^h, h <= 16."""
    if h < 1 or h > MAX_INDEX_BITS:
        raise UnsupportedWidthError(f"bit length must be in 1..{MAX_INDEX_BITS}, got {h}")
    if not 0 <= i < (1 << h):
        raise InvalidInputError(f"index {i} out of range for {h} bits")
    return BitCode((i,), h)


def sign_matrix(codes: Sequence[BitCode]) -> np.ndarray:
    """Stack codes into an (n, h) int8 matrix of +1/-1."""
    if len(codes) == 0:
        raise InvalidInputError("cannot build a sign matrix from zero codes")
    h = codes[0].length
    records = [c.to_record() for c in codes]
    for c in codes:
        if c.length != h:
            raise InvalidInputError("all codes must share one length")
    raw = np.frombuffer(b"".join(records), dtype=np.uint8).reshape(len(codes), -1)
    bits = np.unpackbits(raw, axis=1, bitorder="little", count=h)
    return (bits.astype(np.int8) * 2) - 1


def pack_sign_matrix(signs: np.ndarray) -> list[BitCode]:
    """Inverse of sign_matrix: each row of +1/-1 becomes a BitCode."""
    signs = np.asarray(signs)
    if signs.ndim != 2:
        raise InvalidInputError("expected an (n, h) matrix of signs")
    payload = np.packbits(signs > 0, axis=1, bitorder="little")
    h = signs.shape[1]
    return [BitCode.from_record(row.tobytes(), h) for row in payload]


def hamming_matrix(queries: Sequence[BitCode], base: Sequence[BitCode]) -> np.ndarray:
    """All pairwise distances as an (n_q, n_b) int32 matrix.

    Uses the identity d(a, b) = (h - <a, b>) / 2 on the sign matrices, which is
    exact in integer arithmetic; cross-checked against the scalar popcount
    route in the tests.
    """
    qs = sign_matrix(queries).astype(np.int32)
    bs = sign_matrix(base).astype(np.int32)
    if qs.shape[1] != bs.shape[1]:
        raise InvalidInputError("query and base codes must share one length")
    h = qs.shape[1]
    return (h - qs @ bs.T) // 2


def write_hbc1(path, codes: Sequence[BitCode]) -> None:
    """Write codes to an HBC1 file.

    Layout: magic "HBC1", little-endian u32 bit-length h, little-endian u64
    count n, then n records of ceil(h/8) bytes (see BitCode.to_record).
    """
    if len(codes) == 0:
        raise InvalidInputError("refusing to write an HBC1 file with zero codes")
    h = codes[0].length
    for c in codes:
        if c.length != h:
            raise InvalidInputError("all codes in one file must share one length")
    with open(path, "wb") as f:
        f.write(HBC1_MAGIC)
        f.write(h.to_bytes(4, "little"))
        f.write(len(codes).to_bytes(8, "little"))
        for c in codes:
            f.write(c.to_record())


def read_hbc1(path) -> list[BitCode]:
    """Read codes from an HBC1 file; validates magic, sizes, and padding bits."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != HBC1_MAGIC:
        raise InvalidInputError(f"not an HBC1 file: bad magic {blob[:4]!r}")
    if len(blob) < 16:
        raise InvalidInputError("truncated HBC1 header")
    h = int.from_bytes(blob[4:8], "little")
    n = int.from_bytes(blob[8:16], "little")
    if h < 1:
        raise InvalidInputError(f"invalid bit length {h}")
    rec = (h + 7) // 8
    body = blob[16:]
    if len(body) != n * rec:
        raise InvalidInputError(
            f"HBC1 body holds {len(body)} bytes, expected {n} records of {rec}"
        )
    return [BitCode.from_record(body[i * rec : (i + 1) * rec], h) for i in range(n)]
