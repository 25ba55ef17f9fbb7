"""Chemical property calculators used both as conditions and as metrics.

All calculators are lightweight surrogates (no RDKit): a Crippen-style
atom-class LogP, a four-term QED, a complexity-penalty SA score and the
Lipinski rule count. The contribution tables live in ``prefixgen/data``.
"""
from __future__ import annotations

import csv
import hashlib
import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Callable, Iterable, Protocol

from .smiles import MolGraph, BondOrder

PROPERTY_NAMES = ("vina", "qed", "sa", "logp", "lipinski")

ATOMIC_MASS = {
    "H": 1.008, "B": 10.81, "C": 12.011, "N": 14.007, "O": 15.999, "F": 18.998,
    "Na": 22.990, "Mg": 24.305, "Si": 28.085, "P": 30.974, "S": 32.06, "Cl": 35.45,
    "K": 39.098, "Ca": 40.078, "Fe": 55.845, "Cu": 63.546, "Zn": 65.38, "Se": 78.971,
    "Br": 79.904, "I": 126.904,
}


class EmptyMolecule(ValueError):
    pass


class UnknownAtomType(UserWarning):
    pass


class SizeMismatch(ValueError):
    pass


def _read_tsv(name: str) -> list[dict]:
    text = resources.files("prefixgen.data").joinpath(name).read_text()
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    return list(csv.DictReader(lines, delimiter="\t"))


@lru_cache(maxsize=None)
def logp_table() -> dict[tuple[str, bool, str], float]:
    return {(r["element"], r["aromatic"] == "1", r["hetero_nbrs"]): float(r["contribution"])
            for r in _read_tsv("logp_contrib.tsv")}


@lru_cache(maxsize=None)
def sa_weights() -> dict[str, float]:
    return {r["term"]: float(r["weight"]) for r in _read_tsv("sa_weights.tsv")}


@lru_cache(maxsize=None)
def qed_params() -> dict[str, tuple[float, float]]:
    return {r["descriptor"]: (float(r["center"]), float(r["width"]))
            for r in _read_tsv("qed_params.tsv")}


@dataclass(frozen=True)
class Descriptors:
    mol_weight: float
    hbd: int
    hba: int
    rotatable_bonds: int
    aromatic_rings: int
    heavy_atoms: int


def _heavy(g: MolGraph) -> list[int]:
    return [i for i, a in enumerate(g.atoms) if a.element != "H"]


def descriptors(g: MolGraph) -> Descriptors:
    if g.n_atoms == 0:
        raise EmptyMolecule("descriptors of an empty molecule")
    adj = g.neighbors()
    heavy = set(_heavy(g))
    # explicit [H] atoms donate their hydrogen to the neighbor for HBD counting
    h_on = [a.hcount for a in g.atoms]
    for i, a in enumerate(g.atoms):
        if a.element == "H":
            for j, _ in adj[i]:
                h_on[j] += 1
    mass = 0.0
    for a in g.atoms:
        if a.element not in ATOMIC_MASS:
            raise ValueError(f"no atomic mass for element {a.element!r}")
        mass += ATOMIC_MASS[a.element] + a.hcount * ATOMIC_MASS["H"]
    hba = sum(1 for i in heavy if g.atoms[i].element in ("N", "O"))
    hbd = sum(1 for i in heavy if g.atoms[i].element in ("N", "O") and h_on[i] >= 1)
    heavy_deg = [sum(1 for j, _ in adj[i] if j in heavy) for i in range(g.n_atoms)]
    ring_bonds = g.ring_bonds()
    rot = 0
    for b in g.bonds:
        if b.order is not BondOrder.SINGLE or (min(b.i, b.j), max(b.i, b.j)) in ring_bonds:
            continue
        if b.i in heavy and b.j in heavy and heavy_deg[b.i] >= 2 and heavy_deg[b.j] >= 2:
            rot += 1
    arom_rings = sum(1 for r in g.rings if all(g.atoms[i].aromatic for i in r))
    return Descriptors(round(mass, 6), hbd, hba, rot, arom_rings, len(heavy))


def _logp_contributions(g: MolGraph) -> list[float]:
    table = logp_table()
    adj = g.neighbors()
    out = []
    for i, a in enumerate(g.atoms):
        if a.element == "H":
            continue
        n_het = sum(1 for j, _ in adj[i] if g.atoms[j].element not in ("C", "H"))
        bucket = str(min(n_het, 2))
        for key in ((a.element, a.aromatic, bucket), (a.element, a.aromatic, "*")):
            if key in table:
                out.append(table[key])
                break
        else:
            fallback = table.get((a.element, a.aromatic, "0"), table.get((a.element, False, "0"), 0.0))
            warnings.warn(f"no logP class for {a.element} aromatic={a.aromatic} "
                          f"hetero_nbrs={bucket}; using {fallback}", UnknownAtomType, stacklevel=3)
            out.append(fallback)
    return out


def logp(g: MolGraph) -> float:
    return math.fsum(_logp_contributions(g))


def sa_score(g: MolGraph) -> float:
    w = sa_weights()
    heavy = len(_heavy(g))
    macro = any(len(r) > 8 for r in g.rings)
    n_bracket = sum(1 for a in g.atoms if a.bracket and a.element != "H")
    complexity = (w["rings"] * len(g.rings) + w["macrocycle"] * macro
                  + w["heavy_atoms"] * heavy / 25.0 + w["bracket_atoms"] * n_bracket)
    return 1.0 - min(max(complexity, 0.0), 1.0)


def desirability(x: float, center: float, width: float) -> float:
    return math.exp(-((x - center) ** 2) / (2.0 * width * width))


def qed(d: Descriptors, logp_value: float) -> float:
    """Simplified QED: geometric mean of four Gaussian desirabilities."""
    p = qed_params()
    terms = [
        desirability(d.mol_weight, *p["mol_weight"]),
        desirability(logp_value, *p["logp"]),
        desirability(d.hbd, *p["hbd"]),
        desirability(d.hba, *p["hba"]),
    ]
    if min(terms) <= 0.0:
        return 0.0
    value = math.exp(sum(math.log(t) for t in terms) / len(terms))
    return min(max(value, 0.0), 1.0)


def lipinski(d: Descriptors, logp_value: float) -> int:
    rules = (d.mol_weight <= 500, logp_value <= 5, d.hbd <= 5, d.hba <= 10,
             d.rotatable_bonds <= 10)
    return sum(bool(r) for r in rules)


# ---------------------------------------------------------------------------
# fingerprints


@dataclass(frozen=True)
class Fingerprint:
    bits: int
    n_bits: int = 2048
    radius: int = 2

    def popcount(self) -> int:
        return self.bits.bit_count()

    def on_bits(self) -> list[int]:
        return [i for i in range(self.n_bits) if self.bits >> i & 1]


def _h64(*parts: int) -> int:
    data = b"".join(int(p).to_bytes(8, "little", signed=True) for p in parts)
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little", signed=True)


def _element_code(symbol: str) -> int:
    return int.from_bytes(hashlib.blake2b(symbol.encode(), digest_size=4).digest(), "little")


def fingerprint(g: MolGraph, radius: int = 2, n_bits: int = 2048) -> Fingerprint:
    """Morgan-style circular fingerprint over heavy atoms."""
    heavy = _heavy(g)
    index = {a: k for k, a in enumerate(heavy)}
    adj: list[list[tuple[int, int]]] = [[] for _ in heavy]
    for b in g.bonds:
        if b.i in index and b.j in index:
            adj[index[b.i]].append((index[b.j], int(b.order)))
            adj[index[b.j]].append((index[b.i], int(b.order)))
    ids = []
    for a in heavy:
        atom = g.atoms[a]
        ids.append(_h64(_element_code(atom.element), int(atom.aromatic), atom.charge,
                        len(adj[index[a]])))
    bits = 0
    for v in ids:
        bits |= 1 << (v % n_bits)
    for r in range(1, radius + 1):
        new = []
        for k in range(len(heavy)):
            shell = sorted((order, ids[j]) for j, order in adj[k])
            flat = [x for pair in shell for x in pair]
            new.append(_h64(r, ids[k], *flat))
        ids = new
        for v in ids:
            bits |= 1 << (v % n_bits)
    return Fingerprint(bits, n_bits, radius)


def tanimoto(a: Fingerprint, b: Fingerprint) -> float:
    if a.n_bits != b.n_bits:
        raise SizeMismatch(f"fingerprint sizes differ: {a.n_bits} vs {b.n_bits}")
    union = (a.bits | b.bits).bit_count()
    if union == 0:
        return 1.0
    return (a.bits & b.bits).bit_count() / union


# ---------------------------------------------------------------------------
# condition vectors


class VinaOracle(Protocol):
    def __call__(self, g: MolGraph) -> float: ...


@dataclass(frozen=True)
class StubVina:
    """Docking stand-in: a fixed value, or -0.1 * heavy atoms clamped to [-12, 0]."""

    constant: float | None = None

    def __call__(self, g: MolGraph) -> float:
        if self.constant is not None:
            return float(self.constant)
        return min(max(-0.1 * len(_heavy(g)), -12.0), 0.0)


@dataclass(frozen=True)
class PropVec:
    """Property conditions (vina, qed, sa, logp, lipinski) with availability mask."""

    vina: float | None = None
    qed: float | None = None
    sa: float | None = None
    logp: float | None = None
    lipinski: int | None = None
    mask: tuple[bool, ...] = field(default=None)  # True where the value is present

    def __post_init__(self):
        present = tuple(getattr(self, n) is not None for n in PROPERTY_NAMES)
        if self.mask is None:
            object.__setattr__(self, "mask", present)
        elif tuple(self.mask) != present:
            raise ValueError("mask must mark exactly the entries that carry a value")
        if self.qed is not None and not 0.0 <= self.qed <= 1.0:
            raise ValueError(f"qed out of range: {self.qed}")
        if self.sa is not None and not 0.0 <= self.sa <= 1.0:
            raise ValueError(f"sa out of range: {self.sa}")
        if self.lipinski is not None and self.lipinski not in range(6):
            raise ValueError(f"lipinski out of range: {self.lipinski}")

    def values(self) -> list[float | None]:
        return [getattr(self, n) for n in PROPERTY_NAMES]

    def as_dict(self) -> dict:
        return {n: getattr(self, n) for n in PROPERTY_NAMES}

    def replace(self, **kw) -> "PropVec":
        d = self.as_dict()
        d.update(kw)
        return PropVec(**d)

    def shifted(self, name: str, delta: float) -> "PropVec":
        """Native-unit shift that bypasses range validation (used for control scales)."""
        d = self.as_dict()
        if d[name] is None:
            return self
        new = object.__new__(PropVec)
        for n in PROPERTY_NAMES:
            object.__setattr__(new, n, d[n] + delta if n == name else d[n])
        object.__setattr__(new, "mask", self.mask)
        return new

    @classmethod
    def from_dict(cls, d: dict) -> "PropVec":
        return cls(**{n: d.get(n) for n in PROPERTY_NAMES})


def property_vector(g: MolGraph, vina: Callable[[MolGraph], float] | None = None) -> PropVec:
    d = descriptors(g)
    lp = logp(g)
    v = None
    if vina is not None:
        try:
            v = float(vina(g))
            if not math.isfinite(v):
                v = None
        except Exception:
            v = None
    return PropVec(vina=v, qed=qed(d, lp), sa=sa_score(g), logp=lp, lipinski=lipinski(d, lp))


def mean_pairwise_tanimoto(fps: list[Fingerprint]) -> float:
    n = len(fps)
    if n < 2:
        return 1.0
    total = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            total += tanimoto(fps[i], fps[j])
    return total / (n * (n - 1) / 2)


def max_similarity(fp: Fingerprint, reference: Iterable[Fingerprint]) -> float:
    return max((tanimoto(fp, r) for r in reference), default=0.0)
