"""SMILES tokenization, vocabulary handling and graph parsing."""
from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import networkx as nx


class SmilesError(ValueError):
    """Base class for everything the SMILES layer can reject."""


class UnterminatedBracket(SmilesError):
    pass


class UnknownCharacter(SmilesError):
    def __init__(self, char: str, position: int):
        super().__init__(f"unknown character {char!r} at position {position}")
        self.char = char
        self.position = position


class UnclosedRingBond(SmilesError):
    pass


class UnclosedBranch(SmilesError):
    pass


class ValenceViolation(SmilesError):
    pass


class SmilesSyntaxError(SmilesError):
    pass


class OutOfVocabToken(KeyError):
    pass


class EmptyCorpus(ValueError):
    pass


class TokenKind(enum.Enum):
    ATOM = "Atom"
    BRACKET_ATOM = "BracketAtom"
    BOND = "Bond"
    RING_BOND = "RingBond"
    TWO_DIGIT_RING_BOND = "TwoDigitRingBond"
    BRANCH = "Branch"
    DOT = "Dot"
    SPECIAL = "Special"


PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
SPECIALS = (PAD, BOS, EOS)


@dataclass(frozen=True)
class Token:
    kind: TokenKind
    text: str

    def __post_init__(self):
        if not self.text:
            raise ValueError("token text must be non-empty")
        if self.kind is TokenKind.BRACKET_ATOM and not (
            self.text.startswith("[") and self.text.endswith("]")
        ):
            raise ValueError(f"bracket atom token must be wrapped in []: {self.text!r}")
        if self.kind is TokenKind.SPECIAL and self.text not in SPECIALS:
            raise ValueError(f"unknown special token {self.text!r}")

    def __str__(self):
        return self.text


TokenSeq = tuple[Token, ...]
IdSeq = list[int]

BOS_TOKEN = Token(TokenKind.SPECIAL, BOS)
EOS_TOKEN = Token(TokenKind.SPECIAL, EOS)
PAD_TOKEN = Token(TokenKind.SPECIAL, PAD)

ORGANIC = ("Cl", "Br", "B", "C", "N", "O", "P", "S", "F", "I")
AROMATIC = ("b", "c", "n", "o", "p", "s")
BONDS = "-=#/\\:"


def token_from_text(text: str) -> Token:
    """Classify a single token text (as stored in a vocabulary or token file)."""
    if text in SPECIALS:
        return Token(TokenKind.SPECIAL, text)
    if text.startswith("["):
        return Token(TokenKind.BRACKET_ATOM, text)
    if text in ORGANIC or text in AROMATIC:
        return Token(TokenKind.ATOM, text)
    if text in BONDS:
        return Token(TokenKind.BOND, text)
    if text in "()":
        return Token(TokenKind.BRANCH, text)
    if text == ".":
        return Token(TokenKind.DOT, text)
    if len(text) == 1 and text.isdigit():
        return Token(TokenKind.RING_BOND, text)
    if len(text) == 3 and text[0] == "%" and text[1:].isdigit():
        return Token(TokenKind.TWO_DIGIT_RING_BOND, text)
    raise SmilesSyntaxError(f"not a SMILES token: {text!r}")


def tokenize(smiles: str) -> TokenSeq:
    """Split a SMILES string into tokens using longest-match scanning."""
    out = []
    i, n = 0, len(smiles)
    while i < n:
        ch = smiles[i]
        if ch == "[":
            end = smiles.find("]", i + 1)
            if end < 0:
                raise UnterminatedBracket(f"bracket opened at position {i} is never closed")
            out.append(Token(TokenKind.BRACKET_ATOM, smiles[i:end + 1]))
            i = end + 1
        elif smiles.startswith(("Cl", "Br"), i):
            out.append(Token(TokenKind.ATOM, smiles[i:i + 2]))
            i += 2
        elif ch in ORGANIC or ch in AROMATIC:
            out.append(Token(TokenKind.ATOM, ch))
            i += 1
        elif ch in BONDS:
            out.append(Token(TokenKind.BOND, ch))
            i += 1
        elif ch in "()":
            out.append(Token(TokenKind.BRANCH, ch))
            i += 1
        elif ch == ".":
            out.append(Token(TokenKind.DOT, ch))
            i += 1
        elif ch.isdigit() and ch.isascii():
            out.append(Token(TokenKind.RING_BOND, ch))
            i += 1
        elif ch == "%":
            digits = smiles[i + 1:i + 3]
            if len(digits) != 2 or not (digits.isdigit() and digits.isascii()):
                raise UnknownCharacter(ch, i)
            out.append(Token(TokenKind.TWO_DIGIT_RING_BOND, smiles[i:i + 3]))
            i += 3
        else:
            raise UnknownCharacter(ch, i)
    return tuple(out)


def detokenize(seq: Iterable[Token]) -> str:
    return "".join(t.text for t in seq if t.kind is not TokenKind.SPECIAL)


# ---------------------------------------------------------------------------
# vocabulary


@dataclass(frozen=True)
class Vocab:
    """Bijective token-text <-> id mapping. Specials always take ids 0, 1, 2."""

    itos: tuple[str, ...]
    stoi: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.itos[:3] != SPECIALS:
            raise ValueError("vocab must start with PAD, BOS, EOS")
        if len(set(self.itos)) != len(self.itos):
            raise ValueError("duplicate tokens in vocab")
        object.__setattr__(self, "stoi", {t: i for i, t in enumerate(self.itos)})

    pad_id = 0
    bos_id = 1
    eos_id = 2

    def __len__(self):
        return len(self.itos)

    def __contains__(self, text):
        return text in self.stoi

    def id_of(self, text: str) -> int:
        try:
            return self.stoi[text]
        except KeyError:
            raise OutOfVocabToken(text) from None

    def to_json(self) -> list[str]:
        return list(self.itos)

    @classmethod
    def from_json(cls, items: Sequence[str]) -> "Vocab":
        return cls(tuple(items))


def build_vocab(corpus: Iterable[Sequence[Token]]) -> Vocab:
    seen = set()
    empty = True
    for seq in corpus:
        empty = False
        seen.update(t.text for t in seq if t.kind is not TokenKind.SPECIAL)
    if empty:
        raise EmptyCorpus("cannot build a vocabulary from an empty corpus")
    return Vocab(SPECIALS + tuple(sorted(seen)))


def encode(vocab: Vocab, seq: Iterable[Token], add_specials: bool = False) -> IdSeq:
    ids = [vocab.id_of(t.text) for t in seq]
    if add_specials:
        ids = [vocab.bos_id] + ids + [vocab.eos_id]
    return ids


def decode(vocab: Vocab, ids: Iterable[int]) -> TokenSeq:
    out = []
    for i in ids:
        i = int(i)
        if not 0 <= i < len(vocab):
            raise OutOfVocabToken(i)
        out.append(token_from_text(vocab.itos[i]))
    return tuple(out)


# ---------------------------------------------------------------------------
# molecular graph


class BondOrder(enum.IntEnum):
    SINGLE = 1
    DOUBLE = 2
    TRIPLE = 3
    AROMATIC = 4

    @property
    def valence(self) -> float:
        return 1.5 if self is BondOrder.AROMATIC else float(self.value)


@dataclass(frozen=True)
class Atom:
    element: str
    charge: int = 0
    hcount: int = 0
    aromatic: bool = False
    bracket: bool = False


@dataclass(frozen=True)
class Bond:
    i: int
    j: int
    order: BondOrder


@dataclass(frozen=True)
class MolGraph:
    atoms: tuple[Atom, ...]
    bonds: tuple[Bond, ...]
    rings: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        n = len(self.atoms)
        seen = set()
        for b in self.bonds:
            if not (0 <= b.i < n and 0 <= b.j < n) or b.i == b.j:
                raise ValueError(f"bond endpoints out of range: {b}")
            key = (min(b.i, b.j), max(b.i, b.j))
            if key in seen:
                raise ValueError(f"duplicate bond {key}")
            seen.add(key)

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    def neighbors(self) -> list[list[tuple[int, BondOrder]]]:
        adj: list[list[tuple[int, BondOrder]]] = [[] for _ in self.atoms]
        for b in self.bonds:
            adj[b.i].append((b.j, b.order))
            adj[b.j].append((b.i, b.order))
        return adj

    def ring_bonds(self) -> set[tuple[int, int]]:
        """Bonds that lie on at least one cycle, as sorted index pairs."""
        # every cycle edge lies on some basis ring, and a bond joining two atoms
        # of one ring always closes a cycle
        ring_sets = [set(r) for r in self.rings]
        return {tuple(sorted((b.i, b.j))) for b in self.bonds
                if any(b.i in r and b.j in r for r in ring_sets)}


# allowed valences of the organic subset
VALENCES = {
    "B": (3,), "C": (4,), "N": (3, 5), "O": (2,), "P": (3, 5), "S": (2, 4, 6),
    "F": (1,), "Cl": (1,), "Br": (1,), "I": (1,),
}
# aromatic atoms that donate a lone pair instead of taking an extra pi bond
_LONE_PAIR_AROMATIC = {"O", "S", "Se"}

_BRACKET_RE = re.compile(
    r"^\[(?P<isotope>\d+)?"
    r"(?P<symbol>\*|[A-Z][a-z]?|se|as|[bcnops])"
    r"(?P<chiral>@[@A-Z0-9]*)?"
    r"(?P<h>H\d*)?"
    r"(?P<charge>[+-]+\d*)?"
    r"(?::\d+)?\]$"
)


def _parse_bracket(text: str) -> Atom:
    m = _BRACKET_RE.match(text)
    if m is None:
        raise SmilesSyntaxError(f"malformed bracket atom {text!r}")
    sym = m["symbol"]
    aromatic = sym.islower()
    element = sym.capitalize() if aromatic else sym
    h = m["h"]
    hcount = 0 if h is None else (int(h[1:]) if len(h) > 1 else 1)
    charge = 0
    c = m["charge"]
    if c:
        sign = 1 if c[0] == "+" else -1
        digits = c.lstrip("+-")
        charge = sign * (int(digits) if digits else len(c))
    return Atom(element, charge, hcount, aromatic, bracket=True)


def _bond_sum(atom: Atom, orders: list[BondOrder]) -> int:
    total = sum(o.value for o in orders if o is not BondOrder.AROMATIC)
    n_arom = sum(1 for o in orders if o is BondOrder.AROMATIC)
    total += n_arom
    if atom.aromatic and n_arom:
        if atom.bracket:
            total += int(_needs_pi(atom, orders))
        elif atom.element not in _LONE_PAIR_AROMATIC:
            total += 1
    return total


def max_valence(atom: Atom) -> int | None:
    """Largest allowed valence (bonds plus hydrogens) or None for unchecked elements."""
    base = VALENCES.get(atom.element)
    if base is None:
        return None
    top = max(base)
    if atom.charge:
        if atom.element in ("B", "C"):
            top -= abs(atom.charge)
        else:
            top += atom.charge
    return top


def implicit_hydrogens(atom: Atom, bond_sum: int) -> int:
    if atom.bracket:
        return atom.hcount
    valences = VALENCES[atom.element]
    for v in valences:
        if v >= bond_sum:
            return v - bond_sum
    return 0


def parse(smiles: str, strict: bool = True) -> MolGraph:
    """Parse SMILES into a MolGraph with implicit hydrogens and SSSR rings.

    With ``strict=False`` valence problems are left for :func:`validate` to
    report instead of raising ``ValenceViolation``.
    """
    tokens = tokenize(smiles)
    atoms: list[Atom] = []
    bonds: dict[tuple[int, int], BondOrder] = {}
    bond_list: list[Bond] = []
    stack: list[int] = []
    open_rings: dict[str, tuple[int, BondOrder | None]] = {}
    prev: int | None = None
    pending: BondOrder | None = None

    def bond_between(a: int, b: int, order: BondOrder | None):
        if order is None:
            if atoms[a].aromatic and atoms[b].aromatic:
                order = BondOrder.AROMATIC
            else:
                order = BondOrder.SINGLE
        key = (min(a, b), max(a, b))
        if key in bonds or a == b:
            raise SmilesSyntaxError(f"duplicate bond between atoms {a} and {b}")
        bonds[key] = order
        bond_list.append(Bond(a, b, order))

    for tok in tokens:
        kind = tok.kind
        if kind in (TokenKind.ATOM, TokenKind.BRACKET_ATOM):
            if kind is TokenKind.ATOM:
                arom = tok.text.islower()
                atom = Atom(tok.text.capitalize() if arom else tok.text, aromatic=arom)
            else:
                atom = _parse_bracket(tok.text)
            atoms.append(atom)
            idx = len(atoms) - 1
            if prev is not None:
                bond_between(prev, idx, pending)
            pending = None
            prev = idx
        elif kind is TokenKind.BOND:
            if prev is None or pending is not None:
                raise SmilesSyntaxError(f"misplaced bond symbol {tok.text!r}")
            pending = {"-": BondOrder.SINGLE, "/": BondOrder.SINGLE, "\\": BondOrder.SINGLE,
                       "=": BondOrder.DOUBLE, "#": BondOrder.TRIPLE,
                       ":": BondOrder.AROMATIC}[tok.text]
        elif kind in (TokenKind.RING_BOND, TokenKind.TWO_DIGIT_RING_BOND):
            if prev is None:
                raise SmilesSyntaxError("ring bond before any atom")
            label = tok.text.lstrip("%")
            if label in open_rings:
                other, order = open_rings.pop(label)
                if order is not None and pending is not None and order != pending:
                    raise SmilesSyntaxError(f"conflicting bond orders on ring bond {label}")
                bond_between(other, prev, pending if pending is not None else order)
            else:
                open_rings[label] = (prev, pending)
            pending = None
        elif kind is TokenKind.BRANCH:
            if tok.text == "(":
                if prev is None:
                    raise SmilesSyntaxError("branch opened before any atom")
                stack.append(prev)
            else:
                if not stack:
                    raise UnclosedBranch("')' without matching '('")
                if pending is not None:
                    raise SmilesSyntaxError("bond symbol before ')'")
                prev = stack.pop()
        elif kind is TokenKind.DOT:
            if pending is not None:
                raise SmilesSyntaxError("bond symbol before '.'")
            prev = None
        else:  # pragma: no cover - tokenize never yields specials
            raise SmilesSyntaxError(f"unexpected token {tok.text!r}")

    if pending is not None:
        raise SmilesSyntaxError("dangling bond symbol at end of input")
    if open_rings:
        raise UnclosedRingBond(f"ring bond(s) never closed: {sorted(open_rings)}")
    if stack:
        raise UnclosedBranch(f"{len(stack)} branch(es) never closed")

    orders: list[list[BondOrder]] = [[] for _ in atoms]
    for b in bond_list:
        orders[b.i].append(b.order)
        orders[b.j].append(b.order)
    final = []
    for idx, atom in enumerate(atoms):
        s = _bond_sum(atom, orders[idx])
        if not atom.bracket and atom.element in VALENCES:
            h = implicit_hydrogens(atom, s)
            atom = Atom(atom.element, atom.charge, h, atom.aromatic, False)
        top = max_valence(atom)
        if strict and top is not None and s + atom.hcount > top:
            raise ValenceViolation(
                f"atom {idx} ({atom.element}) has valence {s + atom.hcount} > {top}")
        final.append(atom)

    return MolGraph(tuple(final), tuple(bond_list), perceive_rings(len(final), bond_list))


def perceive_rings(n_atoms: int, bonds: Sequence[Bond]) -> tuple[tuple[int, ...], ...]:
    """Smallest set of smallest rings as sorted atom-index tuples.

    Bridges are dropped first so the cycle basis runs on each small ring system alone.
    """
    g = nx.Graph()
    g.add_nodes_from(range(n_atoms))
    g.add_edges_from((b.i, b.j) for b in bonds)
    g.remove_edges_from(list(nx.bridges(g)))
    rings = []
    for comp in nx.connected_components(g):
        if len(comp) < 3:
            continue
        sub = g.subgraph(comp)
        if sub.number_of_edges() == len(comp):  # a lone ring
            rings.append(tuple(sorted(comp)))
            continue
        if len(comp) > 64:
            raise ValueError("ring perception is limited to ring systems of at most 64 atoms")
        rings.extend(tuple(sorted(c)) for c in nx.minimum_cycle_basis(sub))
    return tuple(sorted(rings, key=lambda r: (len(r), r)))


@dataclass(frozen=True)
class ValidityReport:
    valid: bool
    reasons: tuple[str, ...] = ()


def validate(g: MolGraph) -> ValidityReport:
    if g.n_atoms == 0:
        return ValidityReport(False, ("EmptyMolecule",))
    orders: list[list[BondOrder]] = [[] for _ in g.atoms]
    for b in g.bonds:
        orders[b.i].append(b.order)
        orders[b.j].append(b.order)
    reasons = []
    for idx, atom in enumerate(g.atoms):
        top = max_valence(atom)
        if top is None:
            continue
        total = _bond_sum(atom, orders[idx]) + atom.hcount
        if total > top:
            reasons.append(f"ValenceViolation:atom{idx}:{atom.element}:{total}>{top}")
    reasons.extend(_aromaticity_problems(g, orders))
    return ValidityReport(not reasons, tuple(reasons))


def _needs_pi(atom: Atom, orders: list[BondOrder]) -> bool:
    if not atom.aromatic or atom.element not in VALENCES:
        return False
    used = sum(1 if o is BondOrder.AROMATIC else o.value for o in orders) + atom.hcount
    shift = -abs(atom.charge) if atom.element in ("B", "C") else atom.charge
    free = [v + shift for v in VALENCES[atom.element] if v + shift >= used]
    return bool(free) and free[0] - used >= 1


def _aromaticity_problems(g: MolGraph, orders: list[list[BondOrder]]) -> list[str]:
    """Aromatic atoms must sit on rings and admit a Kekule structure."""
    problems = []
    in_ring = set()
    for i, j in g.ring_bonds():
        in_ring.update((i, j))
    for idx, atom in enumerate(g.atoms):
        if atom.aromatic and idx not in in_ring:
            problems.append(f"AromaticOutsideRing:atom{idx}")
    for b in g.bonds:
        if b.order is BondOrder.AROMATIC and not (g.atoms[b.i].aromatic and g.atoms[b.j].aromatic):
            problems.append(f"AromaticBondOnAliphaticAtom:{b.i}-{b.j}")
    pi = {i for i, a in enumerate(g.atoms) if _needs_pi(a, orders[i])}
    if pi:
        sub = nx.Graph()
        sub.add_nodes_from(pi)
        sub.add_edges_from((b.i, b.j) for b in g.bonds
                           if b.order is BondOrder.AROMATIC and b.i in pi and b.j in pi)
        matching = nx.max_weight_matching(sub, maxcardinality=True)
        if 2 * len(matching) != len(pi):
            problems.append("KekulizationFailed")
    return problems


def validate_smiles(smiles: str) -> ValidityReport:
    """Parse and validate; parse failures become report reasons."""
    try:
        g = parse(smiles, strict=False)
    except SmilesError as exc:
        return ValidityReport(False, (f"{type(exc).__name__}:{exc}",))
    return validate(g)
