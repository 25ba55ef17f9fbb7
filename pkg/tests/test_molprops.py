import itertools
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prefixgen.molprops import (Fingerprint, PropVec, StubVina, descriptors, desirability, fingerprint,
                                lipinski, logp, logp_table, property_vector, qed, qed_params, sa_score,
                                tanimoto, Descriptors)
from prefixgen.pipeline import bundled_corpus
from prefixgen.smiles import Atom, Bond, MolGraph, parse, perceive_rings


def test_benzene_descriptors():
    d = descriptors(parse("c1ccccc1"))
    assert d.mol_weight == pytest.approx(6 * 12.011 + 6 * 1.008, abs=0.01)
    assert d.hbd == 0 and d.hba == 0 and d.rotatable_bonds == 0


def test_small_descriptors():
    d = descriptors(parse("C"))
    assert (d.hbd, d.hba, d.rotatable_bonds) == (0, 0, 0)
    d = descriptors(parse("CCO"))
    assert (d.hbd, d.hba, d.rotatable_bonds) == (1, 1, 0)


def test_logp_table_lookups():
    table = logp_table()
    c0 = table[("C", False, "0")]
    assert logp(parse("C")) == c0
    assert logp(parse("C.C")) == pytest.approx(2 * c0, abs=1e-12)
    # CCO: terminal C, C next to O, hydroxyl O next to no heteroatom
    expected = table[("C", False, "0")] + table[("C", False, "1")] + table[("O", False, "0")]
    assert logp(parse("CCO")) == pytest.approx(expected, abs=1e-12)


def test_logp_additivity_on_corpus_pairs():
    corpus = bundled_corpus()
    for a, b in zip(corpus[:20], corpus[20:40]):
        assert logp(parse(f"{a}.{b}")) == pytest.approx(logp(parse(a)) + logp(parse(b)), abs=1e-9)


def test_sa_examples():
    assert sa_score(parse("C")) >= 0.95
    polycycle = "c1cc2ccc3ccc4ccc5ccc6ccc7ccc8cccc9ccc1c2c3c4c5c6c7c89"
    g = parse(polycycle)
    assert sum(a.element != "H" for a in g.atoms) >= 30
    assert sa_score(g) < 0.5


def test_qed_examples():
    p = qed_params()
    centred = Descriptors(mol_weight=p["mol_weight"][0], hbd=int(p["hbd"][0]), hba=int(p["hba"][0]),
                          rotatable_bonds=0, aromatic_rings=0, heavy_atoms=1)
    assert qed(centred, p["logp"][0]) == pytest.approx(1.0)
    prev = 1.0
    for mw in [400, 800, 1600, 3200]:
        val = qed(Descriptors(mw, int(p["hbd"][0]), int(p["hba"][0]), 0, 0, 1), p["logp"][0])
        assert val < prev
        prev = val
    assert prev < 1e-6
    g = parse("CCO")
    d, lp = descriptors(g), logp(g)
    terms = [desirability(d.mol_weight, *p["mol_weight"]), desirability(lp, *p["logp"]),
             desirability(d.hbd, *p["hbd"]), desirability(d.hba, *p["hba"])]
    assert qed(d, lp) == pytest.approx(math.prod(terms) ** 0.25, rel=1e-12)


def test_lipinski_examples():
    g = parse("c1ccccc1")
    assert lipinski(descriptors(g), logp(g)) == 5
    bad = Descriptors(mol_weight=900.0, hbd=8, hba=15, rotatable_bonds=20, aromatic_rings=0, heavy_atoms=60)
    assert lipinski(bad, 9.0) == 0
    base = Descriptors(mol_weight=520.0, hbd=2, hba=4, rotatable_bonds=3, aromatic_rings=1, heavy_atoms=30)
    hi = lipinski(base, 2.0)
    lo = lipinski(Descriptors(480.0, 2, 4, 3, 1, 30), 2.0)
    assert lo >= hi


def test_fingerprint_basics():
    assert fingerprint(parse("CCO")) == fingerprint(parse("CCO"))
    assert fingerprint(parse("C")).bits != fingerprint(parse("O")).bits
    assert fingerprint(parse("C")).popcount() > 0


def _permuted(g: MolGraph, perm):
    inv = {old: new for new, old in enumerate(perm)}
    atoms = tuple(g.atoms[old] for old in perm)
    bonds = tuple(Bond(min(inv[b.i], inv[b.j]), max(inv[b.i], inv[b.j]), b.order) for b in g.bonds)
    return MolGraph(atoms, bonds, perceive_rings(len(atoms), bonds))


@pytest.mark.parametrize("smiles", ["CC(O)CN", "C1CCOC1", "OC(=O)C=C"])
def test_fingerprint_permutation_invariance(smiles):
    g = parse(smiles)
    assert g.n_atoms <= 6
    prints = {fingerprint(_permuted(g, p)).bits for p in itertools.permutations(range(g.n_atoms))}
    assert prints == {fingerprint(g).bits}


def test_tanimoto_examples():
    a = Fingerprint(0b00111)
    assert tanimoto(a, a) == 1.0
    assert tanimoto(Fingerprint(0b0011), Fingerprint(0b1100)) == 0.0
    assert tanimoto(Fingerprint(0b00111), Fingerprint(0b11001 | 0b00010)) == pytest.approx(2 / 5)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 2048 - 1), st.integers(0, 2 ** 2048 - 1))
def test_tanimoto_properties(x, y):
    a, b = Fingerprint(x), Fingerprint(y)
    t = tanimoto(a, b)
    assert 0.0 <= t <= 1.0
    assert t == tanimoto(b, a)
    assert tanimoto(a, a) == 1.0


def test_property_vector_examples():
    g = parse("c1ccccc1")
    pv = property_vector(g, StubVina(-6.0))
    assert pv.vina == -6.0 and pv.lipinski == 5 and all(pv.mask)
    assert property_vector(g, StubVina(-6.0)) == pv

    def broken(_):
        raise RuntimeError("docking failed")
    pv = property_vector(g, broken)
    assert pv.vina is None and pv.mask == (False, True, True, True, True)


def test_stub_vina_surrogate():
    assert StubVina()(parse("c1ccccc1")) == pytest.approx(-0.6)
    assert StubVina()(parse("C" * 200)) == -12.0


def test_propvec_validation_and_shift():
    with pytest.raises(ValueError):
        PropVec(qed=1.5)
    with pytest.raises(ValueError):
        PropVec(lipinski=6)
    pv = PropVec(0.0, 0.5, 0.9, 1.0, 5)
    shifted = pv.shifted("sa", 0.5)
    assert shifted.sa == pytest.approx(1.4) and shifted.qed == 0.5
    assert PropVec.from_dict(pv.as_dict()) == pv


def test_range_invariants_corpus_wide():
    for s in bundled_corpus():
        g = parse(s)
        d = descriptors(g)
        pv = property_vector(g, StubVina())
        assert 0.0 <= pv.qed <= 1.0 and 0.0 <= pv.sa <= 1.0 and 0 <= pv.lipinski <= 5
        assert min(d.hbd, d.hba, d.rotatable_bonds, d.aromatic_rings, d.heavy_atoms) >= 0


def test_unknown_atom_type_warns():
    g = MolGraph((Atom("Se", 0, 2, False, True),), (), ())
    with pytest.warns(UserWarning):
        logp(g)
