"""Systematic MDS erasure codec over GF(2^8).

The generator is [I; C] with C a Cauchy matrix, C[i][j] = 1 / (x_i + y_j),
x_i = k + i and y_j = j. Every square submatrix of a Cauchy matrix is
invertible, so any k of the k + m symbols recover the data.
"""

from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple

import galois
import numpy as np

from .errors import CodecParameterError, InsufficientSymbolsError, SymbolSizeError

GF = galois.GF(2**8)
MAX_SYMBOLS = 255


def _check_params(k: int, m: int) -> None:
    if k < 1 or m < 1 or k + m > MAX_SYMBOLS:
        raise CodecParameterError(f"need 1 <= k, 1 <= m, k + m <= {MAX_SYMBOLS}; got k={k}, m={m}")


@lru_cache(maxsize=None)
def _parity_matrix(k: int, m: int) -> galois.FieldArray:
    x = GF(np.arange(k, k + m))
    y = GF(np.arange(k))
    return GF(1) / (x[:, np.newaxis] + y[np.newaxis, :])


@lru_cache(maxsize=None)
def _generator(k: int, m: int) -> galois.FieldArray:
    return np.vstack([GF.Identity(k), _parity_matrix(k, m)])


@lru_cache(maxsize=4096)
def _decode_matrix(k: int, m: int, rows: Tuple[int, ...]) -> galois.FieldArray:
    return np.linalg.inv(_generator(k, m)[list(rows), :])


def _to_field(symbols: Sequence[bytes], length: int) -> galois.FieldArray:
    raw = np.frombuffer(b"".join(symbols), dtype=np.uint8).reshape(len(symbols), length)
    return GF(raw)


def _to_bytes(rows: galois.FieldArray) -> List[bytes]:
    plain = np.asarray(rows.view(np.ndarray), dtype=np.uint8)
    return [row.tobytes() for row in plain]


def pad_symbols(payloads: Sequence[bytes]) -> Tuple[List[bytes], int]:
    """Zero-pad payloads to the longest one; returns (padded, symbol_len)."""
    symbol_len = max((len(p) for p in payloads), default=0)
    return [p.ljust(symbol_len, b"\x00") for p in payloads], symbol_len


def trim(symbol: bytes, true_len: int) -> bytes:
    return symbol[:true_len]


def encode(data_symbols: Sequence[bytes], m: int) -> List[bytes]:
    """Return m parity symbols for k equal-length data symbols."""
    k = len(data_symbols)
    _check_params(k, m)
    length = len(data_symbols[0])
    if any(len(s) != length for s in data_symbols):
        raise SymbolSizeError(f"data symbols differ in length: {sorted({len(s) for s in data_symbols})}")
    parity = _parity_matrix(k, m) @ _to_field(data_symbols, length)
    return _to_bytes(parity)


@dataclass(frozen=True)
class SymbolBlock:
    """k data + m parity positions; ``symbols[i]`` is None when position i is missing."""
    k: int
    m: int
    symbols: Tuple[Optional[bytes], ...]
    symbol_len: int

    def __post_init__(self):
        _check_params(self.k, self.m)
        if len(self.symbols) != self.k + self.m:
            raise CodecParameterError(f"block has {len(self.symbols)} positions, expected {self.k + self.m}")
        for i, sym in enumerate(self.symbols):
            if sym is not None and len(sym) != self.symbol_len:
                raise SymbolSizeError(f"symbol {i} has length {len(sym)}, block uses {self.symbol_len}")

    @classmethod
    def from_present(cls, k: int, m: int, present: Dict[int, bytes], symbol_len: int) -> "SymbolBlock":
        for index in present:
            if not 0 <= index < k + m:
                raise CodecParameterError(f"symbol index {index} outside 0..{k + m - 1}")
        return cls(k, m, tuple(present.get(i) for i in range(k + m)), symbol_len)

    @property
    def present(self) -> List[int]:
        return [i for i, sym in enumerate(self.symbols) if sym is not None]


def decode(block: SymbolBlock) -> List[bytes]:
    """Recover all k data symbols; present data symbols come back unchanged."""
    present = block.present
    if len(present) < block.k:
        raise InsufficientSymbolsError(len(present), block.k)
    data = list(block.symbols[: block.k])
    if all(sym is not None for sym in data):
        return data

    rows = tuple(present[: block.k])
    decoded = _decode_matrix(block.k, block.m, rows) @ _to_field(
        [block.symbols[i] for i in rows], block.symbol_len
    )
    recovered = _to_bytes(decoded)
    return [sym if sym is not None else recovered[i] for i, sym in enumerate(data)]
