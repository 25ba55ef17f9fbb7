from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prefixgen.pipeline import bundled_corpus
from prefixgen.smiles import (BOS_TOKEN, EOS_TOKEN, BondOrder, OutOfVocabToken, SmilesError,
                              UnclosedBranch, UnclosedRingBond, UnknownCharacter, UnterminatedBracket,
                              MolGraph, build_vocab, decode, detokenize, encode, parse, token_from_text,
                              tokenize, validate, validate_smiles)


def texts(seq):
    return [t.text for t in seq]


def codes(report):
    return {r.split(":")[0] for r in report.reasons}


@pytest.mark.parametrize("smiles,expected", [
    ("CCO", ["C", "C", "O"]),
    ("", []),
    ("ClC(Br)=O", ["Cl", "C", "(", "Br", ")", "=", "O"]),
    ("c1ccccc1", ["c", "1", "c", "c", "c", "c", "c", "1"]),
    ("[NH4+].[Cl-]", ["[NH4+]", ".", "[Cl-]"]),
    ("C%12CC%12", ["C", "%12", "C", "C", "%12"]),
    ("F/C=C\\F", ["F", "/", "C", "=", "C", "\\", "F"]),
])
def test_tokenize_examples(smiles, expected):
    assert texts(tokenize(smiles)) == expected


def test_detokenize_examples():
    assert detokenize(tokenize("CCO")) == "CCO"
    assert detokenize(()) == ""
    assert detokenize((BOS_TOKEN, token_from_text("c"), token_from_text("1"), EOS_TOKEN)) == "c1"


@pytest.mark.parametrize("bad,exc", [
    ("C[NH4", UnterminatedBracket),
    ("C$C", UnknownCharacter),
    ("CC?", UnknownCharacter),
])
def test_tokenize_errors(bad, exc):
    with pytest.raises(exc):
        tokenize(bad)


def test_unknown_character_reports_position():
    with pytest.raises(UnknownCharacter) as info:
        tokenize("CC$")
    assert info.value.position == 2


def test_vocab_ordering_and_size():
    v = build_vocab([tokenize("C"), tokenize("O")])
    assert len(v) == 5
    assert {t: v.id_of(t) for t in v.itos} == {"<pad>": 0, "<bos>": 1, "<eos>": 2, "C": 3, "O": 4}
    assert len(build_vocab([tokenize("CC")])) == 4
    assert build_vocab([tokenize("CCO")]) == build_vocab([tokenize("CCO")])


def test_encode_decode():
    v = build_vocab([tokenize("C"), tokenize("O")])
    assert texts(decode(v, encode(v, tokenize("CCO")))) == ["C", "C", "O"]
    assert texts(decode(v, [3, 3])) == ["C", "C"]
    with pytest.raises(OutOfVocabToken):
        encode(v, tokenize("N"))
    ids = encode(v, tokenize("CO"), add_specials=True)
    assert ids[0] == v.bos_id and ids[-1] == v.eos_id


def test_vocab_json_round_trip():
    v = build_vocab([tokenize("c1ccccc1Cl")])
    assert type(v).from_json(v.to_json()) == v


def test_parse_examples():
    g = parse("CCO")
    assert g.n_atoms == 3 and len(g.bonds) == 2 and len(g.rings) == 0
    assert all(b.order == BondOrder.SINGLE for b in g.bonds)
    benz = parse("c1ccccc1")
    assert benz.n_atoms == 6 and all(a.aromatic for a in benz.atoms)
    assert len(benz.bonds) == 6 and all(b.order == BondOrder.AROMATIC for b in benz.bonds)
    assert len(benz.rings) == 1


@pytest.mark.parametrize("bad,exc", [("C1CC", UnclosedRingBond), ("CC(C", UnclosedBranch)])
def test_parse_errors(bad, exc):
    with pytest.raises(exc):
        parse(bad)


def test_fused_ring_perception():
    assert len(parse("c1ccc2ccccc2c1").rings) == 2
    assert sorted(len(r) for r in parse("C1CC2CCC1CC2").rings) == [6, 6]


def test_implicit_hydrogens():
    g = parse("CC(=O)O")
    assert [a.hcount for a in g.atoms] == [3, 0, 0, 1]
    assert parse("c1ccccc1").atoms[0].hcount == 1
    assert parse("c1cc[nH]c1").atoms[3].hcount == 1


def test_validate_examples():
    assert validate(parse("CCO")).valid
    rep = validate(parse("C(C)(C)(C)(C)C", strict=False))
    assert not rep.valid and "ValenceViolation" in codes(rep)
    empty = validate(MolGraph((), (), ()))
    assert not empty.valid and "EmptyMolecule" in codes(empty)


@pytest.mark.parametrize("smiles", ["c1ccoc1", "c1ccsc1", "c1cc[nH]c1", "c1ccncc1", "[NH4+]",
                                    "c1ccc2ccccc2c1", "OC(=O)c1ccccc1"])
def test_valid_aromatics(smiles):
    assert validate_smiles(smiles).valid


@pytest.mark.parametrize("smiles,reason", [("c1cccc1", "KekulizationFailed"),
                                           ("cc", "AromaticOutsideRing")])
def test_invalid_aromatics(smiles, reason):
    rep = validate_smiles(smiles)
    assert not rep.valid and reason in codes(rep)


def test_failures_carry_reasons():
    for s in ["C1CC", "C$", "C(C)(C)(C)(C)C", "c1cccc1", ""]:
        rep = validate_smiles(s)
        assert not rep.valid and rep.reasons


def _multisets(g):
    atoms = Counter((a.element, a.aromatic, a.charge, a.hcount) for a in g.atoms)
    bonds = Counter(tuple(sorted([(g.atoms[b.i].element, int(b.order)), (g.atoms[b.j].element, int(b.order))]))
                    for b in g.bonds)
    return atoms, bonds


def test_corpus_round_trip_and_isomorphism():
    corpus = bundled_corpus()
    assert len(corpus) == 2000
    for s in corpus[:300]:
        toks = tokenize(s)
        assert detokenize(toks) == s
        assert _multisets(parse(detokenize(toks))) == _multisets(parse(s))


@settings(max_examples=200, deadline=None)
@given(st.text(alphabet="CNOcn()=#123[]+-H@.%ClBr", max_size=20))
def test_tokenize_is_total_or_raises_smiles_error(text):
    try:
        toks = tokenize(text)
    except SmilesError:
        return
    assert detokenize(toks) == text
    assert tokenize(text) == toks
