import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pointmut.state_space import (
    Alphabet,
    Sequence,
    StateSpace,
    StateSpaceTooLarge,
    TransitionRecord,
    hamming_distance,
    hamming_neighbors,
    index_to_sequence,
    state_index,
)


def test_corner_indices(codons):
    assert state_index(codons.parse("AAA")) == 0
    assert state_index(codons.parse("TTT")) == 63


def test_big_endian_encoding(codons):
    # C=1 at the first site is worth 16
    assert codons.parse("CAA").index == 16
    assert codons.parse("AAC").index == 1


def test_round_trip_all_codons(codons):
    for i in range(64):
        s = index_to_sequence(codons, i)
        assert state_index(s) == i
        assert codons.parse(str(s)) == s


def test_state_table_matches_enumeration(codons):
    table = codons.state_table
    for s in codons:
        assert tuple(table[s.index]) == s.symbols


def test_errors(codons):
    with pytest.raises(IndexError):
        codons.index_to_sequence(64)
    with pytest.raises(ValueError):
        codons.parse("AXA")
    with pytest.raises(ValueError):
        Sequence(codons, (0, 1))
    with pytest.raises(ValueError):
        Alphabet(("A", "A"))
    with pytest.raises(ValueError):
        Alphabet(("A",))


def test_cap_enforced():
    with pytest.raises(StateSpaceTooLarge):
        StateSpace(Alphabet.from_string("ACDEFGHIKLMNPQRSTVWY"), 5)
    assert StateSpace(Alphabet.dna(), 9).num_states == 4**9
    with pytest.raises(StateSpaceTooLarge):
        StateSpace(Alphabet.dna(), 10)


def test_neighbor_counts(codons):
    assert len(hamming_neighbors(codons.parse("ACG"))) == 9
    tiny = StateSpace(Alphabet.from_string("01"), 1)
    assert len(tiny.hamming_neighbors(tiny.parse("0"))) == 1
    assert sum(len(codons.hamming_neighbors(s)) for s in codons) == 576


def test_neighbor_order_and_properties(codons):
    x = codons.parse("CGT")
    nbs = codons.hamming_neighbors(x)
    assert [(l, a) for l, a, _ in nbs] == sorted((l, a) for l, a, _ in nbs)
    seqs = [y for _, _, y in nbs]
    assert len(set(seqs)) == len(seqs)
    assert x not in seqs
    assert all(hamming_distance(x, y) == 1 for y in seqs)


def test_neighbor_table_matches_list(codons):
    neighbors, sites, syms = codons.neighbor_table
    for x in codons:
        listed = codons.hamming_neighbors(x)
        assert [y.index for _, _, y in listed] == neighbors[x.index].tolist()
        assert [l for l, _, _ in listed] == sites[x.index].tolist()
        assert [a for _, a, _ in listed] == syms[x.index].tolist()


def test_hamming_examples(codons):
    assert hamming_distance(codons.parse("AAA"), codons.parse("AAA")) == 0
    assert hamming_distance(codons.parse("AAA"), codons.parse("ACA")) == 1
    other = StateSpace(Alphabet.dna(), 2)
    with pytest.raises(ValueError):
        hamming_distance(codons.parse("AAA"), other.parse("AA"))


def test_hamming_symmetry_random_pairs(codons):
    rng = np.random.default_rng(0)
    for a, b in rng.integers(0, 64, size=(1000, 2)):
        x, y = codons.index_to_sequence(a), codons.index_to_sequence(b)
        d = hamming_distance(x, y)
        assert d == hamming_distance(y, x)
        assert (d == 0) == (x == y)


seq_idx = st.integers(min_value=0, max_value=4**5 - 1)


@settings(max_examples=200, deadline=None)
@given(seq_idx, seq_idx, seq_idx)
def test_triangle_inequality(a, b, c):
    space = StateSpace(Alphabet.dna(), 5)
    x, y, z = (space.index_to_sequence(i) for i in (a, b, c))
    assert hamming_distance(x, z) <= hamming_distance(x, y) + hamming_distance(y, z)


@settings(max_examples=200, deadline=None)
@given(st.integers(min_value=2, max_value=6), st.integers(min_value=1, max_value=5), st.data())
def test_index_bijection_property(size, length, data):
    space = StateSpace(Alphabet(tuple("abcdef"[:size])), length)
    i = data.draw(st.integers(min_value=0, max_value=space.num_states - 1))
    assert space.index_to_sequence(i).index == i


def test_transition_record_validation(codons):
    x = codons.parse("AAA")
    TransitionRecord(x, x, 0.0)
    with pytest.raises(ValueError):
        TransitionRecord(x, x, -0.1)
    with pytest.raises(ValueError):
        TransitionRecord(x, StateSpace(Alphabet.dna(), 2).parse("AA"), 1.0)
