"""Alphabets, fixed-length sequence spaces and Hamming neighbourhoods.

States of a length-``L`` sequence space over an alphabet of size ``A`` are
indexed big-endian: the first site is the most significant digit, so over
``ACGT`` the codon ``AAA`` is state 0 and ``TTT`` is state 63.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterator, Sequence as SequenceLike

import numpy as np

DEFAULT_STATE_CAP = 10**6
DNA = "ACGT"
AMINO_ACIDS = "ACDEFGHIKLMNPQRSTVWY"


class StateSpaceTooLarge(ValueError):
    """Raised when an operation needs the full state space and it exceeds the cap."""


@dataclass(frozen=True)
class Alphabet:
    symbols: tuple[str, ...]

    def __post_init__(self):
        symbols = tuple(self.symbols)
        object.__setattr__(self, "symbols", symbols)
        if len(symbols) < 2:
            raise ValueError(f"alphabet needs at least 2 symbols, got {len(symbols)}")
        if len(set(symbols)) != len(symbols):
            raise ValueError(f"alphabet symbols must be distinct: {symbols}")
        if any(len(s) != 1 for s in symbols):
            raise ValueError("alphabet symbols must be single characters")

    @classmethod
    def dna(cls) -> "Alphabet":
        return cls(tuple(DNA))

    @classmethod
    def from_string(cls, text: str) -> "Alphabet":
        return cls(tuple(text))

    @property
    def size(self) -> int:
        return len(self.symbols)

    @cached_property
    def _lookup(self) -> dict[str, int]:
        return {s: i for i, s in enumerate(self.symbols)}

    def index(self, symbol: str) -> int:
        try:
            return self._lookup[symbol]
        except KeyError:
            raise ValueError(f"symbol {symbol!r} not in alphabet {''.join(self.symbols)}") from None

    def __str__(self) -> str:
        return "".join(self.symbols)


@dataclass(frozen=True)
class StateSpace:
    """All length-``length`` sequences over ``alphabet``.

    Construction fails when ``size ** length`` exceeds ``cap``; every dense
    operation in the package relies on this guard.
    """

    alphabet: Alphabet
    length: int
    cap: int = field(default=DEFAULT_STATE_CAP, compare=False)

    def __post_init__(self):
        if self.length < 1:
            raise ValueError(f"sequence length must be positive, got {self.length}")
        if self.num_states > self.cap:
            raise StateSpaceTooLarge(
                f"{self.alphabet.size}^{self.length} = {self.num_states} states exceeds "
                f"the dense-representation cap of {self.cap}"
            )

    @classmethod
    def codons(cls) -> "StateSpace":
        return cls(Alphabet.dna(), 3)

    @property
    def num_states(self) -> int:
        # python ints do not overflow, so the cap comparison is exact
        return self.alphabet.size**self.length

    @property
    def num_neighbors(self) -> int:
        return self.length * (self.alphabet.size - 1)

    # -- construction / conversion -------------------------------------------------

    def sequence(self, symbols) -> "Sequence":
        """Build a validated sequence from a string or an iterable of indices."""
        if isinstance(symbols, str):
            return self.parse(symbols)
        return Sequence(self, tuple(int(s) for s in symbols))

    def parse(self, text: str) -> "Sequence":
        return Sequence(self, tuple(self.alphabet.index(c) for c in text))

    def format(self, seq: "Sequence") -> str:
        return "".join(self.alphabet.symbols[s] for s in seq.symbols)

    def state_index(self, seq: "Sequence") -> int:
        self._check(seq)
        return _encode(seq.symbols, self.alphabet.size)

    def index_to_sequence(self, index: int) -> "Sequence":
        index = int(index)
        if not 0 <= index < self.num_states:
            raise IndexError(f"state index {index} out of range [0, {self.num_states})")
        size = self.alphabet.size
        out = [0] * self.length
        for pos in range(self.length - 1, -1, -1):
            index, out[pos] = divmod(index, size)
        return Sequence(self, tuple(out))

    def __iter__(self) -> Iterator["Sequence"]:
        for i in range(self.num_states):
            yield self.index_to_sequence(i)

    # -- neighbourhoods --------------------------------------------------------------

    def hamming_neighbors(self, seq: "Sequence") -> list[tuple[int, int, "Sequence"]]:
        """All single-site mutants of ``seq`` as ``(site, new_symbol, neighbor)``.

        Ordered site-major, then by symbol index.
        """
        self._check(seq)
        out = []
        symbols = list(seq.symbols)
        for site, current in enumerate(seq.symbols):
            for a in range(self.alphabet.size):
                if a == current:
                    continue
                symbols[site] = a
                out.append((site, a, Sequence(self, tuple(symbols))))
            symbols[site] = current
        return out

    @cached_property
    def state_table(self) -> np.ndarray:
        """``(num_states, length)`` array of symbol indices for every state."""
        size = self.alphabet.size
        idx = np.arange(self.num_states)
        powers = size ** np.arange(self.length - 1, -1, -1)
        return ((idx[:, None] // powers[None, :]) % size).astype(np.int64)

    @cached_property
    def neighbor_table(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Vectorised Hamming-1 graph.

        Returns ``(neighbors, sites, symbols)``, each ``(num_states, L*(A-1))``,
        in the same order as :meth:`hamming_neighbors`.
        """
        size, length = self.alphabet.size, self.length
        table = self.state_table
        powers = size ** np.arange(length - 1, -1, -1)
        # candidate offsets 1..A-1 map to symbols (current + k) mod A, then sort per
        # site so the order is by symbol index
        cand = np.arange(size)[None, None, :]  # (1, 1, A)
        mask = cand != table[:, :, None]  # (S, L, A)
        sites = np.broadcast_to(np.arange(length)[None, :, None], mask.shape)[mask]
        syms = np.broadcast_to(cand, mask.shape)[mask]
        sites = sites.reshape(self.num_states, -1)
        syms = syms.reshape(self.num_states, -1)
        current = np.take_along_axis(table, sites, axis=1)
        idx = np.arange(self.num_states)[:, None]
        neighbors = idx + (syms - current) * powers[sites]
        return neighbors, sites, syms

    def _check(self, seq: "Sequence") -> None:
        if seq.space != self:
            raise ValueError("sequence belongs to a different state space")


@dataclass(frozen=True)
class Sequence:
    space: StateSpace
    symbols: tuple[int, ...]

    def __post_init__(self):
        if len(self.symbols) != self.space.length:
            raise ValueError(
                f"sequence has length {len(self.symbols)}, state space expects {self.space.length}"
            )
        size = self.space.alphabet.size
        for s in self.symbols:
            if not 0 <= s < size:
                raise ValueError(f"symbol index {s} out of range for alphabet of size {size}")

    def __len__(self) -> int:
        return len(self.symbols)

    def __getitem__(self, site: int) -> int:
        return self.symbols[site]

    def __str__(self) -> str:
        return self.space.format(self)

    @property
    def index(self) -> int:
        return self.space.state_index(self)

    def mutate(self, site: int, symbol: int) -> "Sequence":
        symbols = list(self.symbols)
        symbols[site] = symbol
        return Sequence(self.space, tuple(symbols))


@dataclass(frozen=True)
class TransitionRecord:
    parent: Sequence
    child: Sequence
    branch_length: float

    def __post_init__(self):
        if self.parent.space != self.child.space:
            raise ValueError("parent and child must share a state space")
        if not np.isfinite(self.branch_length) or self.branch_length < 0:
            raise ValueError(f"branch length must be finite and >= 0, got {self.branch_length}")


def _encode(symbols: SequenceLike[int], size: int) -> int:
    index = 0
    for s in symbols:
        index = index * size + s
    return index


def state_index(seq: Sequence) -> int:
    return seq.space.state_index(seq)


def index_to_sequence(space: StateSpace, index: int) -> Sequence:
    return space.index_to_sequence(index)


def hamming_neighbors(seq: Sequence) -> list[tuple[int, int, Sequence]]:
    return seq.space.hamming_neighbors(seq)


def hamming_distance(a: Sequence, b: Sequence) -> int:
    if a.space != b.space:
        raise ValueError("hamming distance needs sequences from the same state space")
    return sum(x != y for x, y in zip(a.symbols, b.symbols))
