"""SMILES parsing into molecular graphs.

Supports the organic subset (B, C, N, O, P, S, F, Cl, Br, I and aromatic
lowercase forms), bracket atoms with element symbol, charge, explicit H
count and @/@@ chirality markers, ring closures 1-9 and %NN, branches,
and the bond symbols ``- = # : / \\``. Dots (multi-fragment inputs) are
rejected. Aromaticity is taken syntactically from lowercase symbols; no
kekulization or perception is performed. Implicit hydrogens are not
materialized as nodes.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field


class SmilesError(ValueError):
    """Base class for all parse failures. ``position`` is a 0-based offset."""

    def __init__(self, message: str, position: int | None = None):
        super().__init__(message)
        self.position = position


class EmptyInput(SmilesError):
    def __init__(self):
        super().__init__("empty SMILES input")


class UnknownCharacter(SmilesError):
    def __init__(self, char: str, position: int):
        super().__init__(f"unknown character {char!r} at position {position}", position)
        self.char = char


class UnclosedRing(SmilesError):
    def __init__(self, digit: int):
        super().__init__(f"ring closure {digit} opened but never closed")
        self.digit = digit


class UnbalancedBranch(SmilesError):
    def __init__(self, position: int, message: str = "unbalanced branch parenthesis"):
        super().__init__(f"{message} at position {position}", position)


class InvalidBracketAtom(SmilesError):
    def __init__(self, position: int, message: str = "invalid bracket atom"):
        super().__init__(f"{message} at position {position}", position)


class DanglingBond(SmilesError):
    def __init__(self, position: int, message: str = "bond symbol with nothing to bind"):
        super().__init__(f"{message} at position {position}", position)


class FragmentedInput(SmilesError):
    """Dot disconnector found: multi-fragment molecules are rejected."""

    def __init__(self, position: int):
        super().__init__(f"dot disconnector at position {position}: "
                         "multi-fragment inputs are not supported", position)


class Chirality(enum.Enum):
    UNSPECIFIED = 0
    TETRAHEDRAL_CW = 1
    TETRAHEDRAL_CCW = 2
    OTHER = 3


class BondType(enum.Enum):
    SINGLE = 0
    DOUBLE = 1
    TRIPLE = 2
    AROMATIC = 3


class BondDirection(enum.Enum):
    NONE = 0
    END_UP_RIGHT = 1
    END_DOWN_RIGHT = 2


# Token kinds, as emitted by tokenize().
ORGANIC_ATOM = "organic-atom"
BRACKET_ATOM = "bracket-atom"
BOND_SYMBOL = "bond-symbol"
RING_CLOSURE = "ring-closure-digit"
BRANCH_OPEN = "branch-open"
BRANCH_CLOSE = "branch-close"
DOT = "dot"


@dataclass(frozen=True)
class SmilesToken:
    kind: str
    lexeme: str
    position: int


@dataclass(frozen=True)
class Atom:
    atomic_number: int
    chirality: Chirality = Chirality.UNSPECIFIED
    aromatic: bool = False

    def __post_init__(self):
        if not 1 <= self.atomic_number <= 118:
            raise ValueError(f"atomic number {self.atomic_number} outside [1, 118]")


@dataclass(frozen=True)
class Bond:
    u: int
    v: int
    bond_type: BondType = BondType.SINGLE
    direction: BondDirection = BondDirection.NONE

    def __post_init__(self):
        if self.u == self.v:
            raise ValueError(f"self-bond on atom {self.u}")
        if self.u > self.v:
            raise ValueError("bond endpoints must satisfy u < v")


@dataclass
class MolecularGraph:
    """Heavy-atom graph: atoms, typed undirected bonds, symmetric adjacency.

    ``adjacency[i]`` lists ``(neighbor_index, bond_index)`` pairs for atom i.
    """

    atoms: list[Atom]
    bonds: list[Bond]
    adjacency: list[list[tuple[int, int]]] = field(default_factory=list)

    def __post_init__(self):
        if not self.atoms:
            raise ValueError("molecular graph requires at least one atom")
        if not self.adjacency:
            self.adjacency = _build_adjacency(len(self.atoms), self.bonds)

    @property
    def num_atoms(self) -> int:
        return len(self.atoms)

    @property
    def num_bonds(self) -> int:
        return len(self.bonds)

    def neighbors(self, v: int) -> list[int]:
        return [u for u, _ in self.adjacency[v]]

    def has_bond(self, u: int, v: int) -> bool:
        return any(n == v for n, _ in self.adjacency[u])


def _build_adjacency(n_atoms: int, bonds: list[Bond]) -> list[list[tuple[int, int]]]:
    adjacency: list[list[tuple[int, int]]] = [[] for _ in range(n_atoms)]
    seen: set[tuple[int, int]] = set()
    for b_idx, bond in enumerate(bonds):
        if bond.v >= n_atoms:
            raise ValueError(f"bond endpoint {bond.v} out of range")
        if (bond.u, bond.v) in seen:
            raise ValueError(f"duplicate bond ({bond.u}, {bond.v})")
        seen.add((bond.u, bond.v))
        adjacency[bond.u].append((bond.v, b_idx))
        adjacency[bond.v].append((bond.u, b_idx))
    return adjacency


def make_graph(atoms: list[Atom], bond_specs: list[tuple[int, int, BondType, BondDirection]]) -> MolecularGraph:
    """Build a validated graph from atoms and (u, v, type, direction) tuples."""
    bonds = [Bond(min(u, v), max(u, v), bt, bd) for u, v, bt, bd in bond_specs]
    return MolecularGraph(atoms=atoms, bonds=bonds)


# Organic-subset symbols readable without brackets. Two-letter symbols
# must be matched before single letters.
_ORGANIC_TWO_LETTER = {"Cl": 17, "Br": 35}
_ORGANIC_ONE_LETTER = {"B": 5, "C": 6, "N": 7, "O": 8, "P": 15, "S": 16, "F": 9, "I": 53}
_AROMATIC_ORGANIC = {"b": 5, "c": 6, "n": 7, "o": 8, "p": 15, "s": 16}

_BOND_CHARS = "-=#:/\\"

ELEMENT_SYMBOLS = [
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne", "Na", "Mg", "Al",
    "Si", "P", "S", "Cl", "Ar", "K", "Ca", "Sc", "Ti", "V", "Cr", "Mn", "Fe",
    "Co", "Ni", "Cu", "Zn", "Ga", "Ge", "As", "Se", "Br", "Kr", "Rb", "Sr",
    "Y", "Zr", "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In", "Sn",
    "Sb", "Te", "I", "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd", "Pm", "Sm",
    "Eu", "Gd", "Tb", "Dy", "Ho", "Er", "Tm", "Yb", "Lu", "Hf", "Ta", "W",
    "Re", "Os", "Ir", "Pt", "Au", "Hg", "Tl", "Pb", "Bi", "Po", "At", "Rn",
    "Fr", "Ra", "Ac", "Th", "Pa", "U", "Np", "Pu", "Am", "Cm", "Bk", "Cf",
    "Es", "Fm", "Md", "No", "Lr", "Rf", "Db", "Sg", "Bh", "Hs", "Mt", "Ds",
    "Rg", "Cn", "Nh", "Fl", "Mc", "Lv", "Ts", "Og",
]
ATOMIC_NUMBER = {symbol: i + 1 for i, symbol in enumerate(ELEMENT_SYMBOLS)}


def tokenize(smiles: str) -> list[SmilesToken]:
    """Split a SMILES string into tokens.

    Token lexemes concatenate back to the input; unknown characters raise
    UnknownCharacter rather than being skipped.
    """
    if not smiles:
        raise EmptyInput()
    tokens: list[SmilesToken] = []
    i = 0
    n = len(smiles)
    while i < n:
        ch = smiles[i]
        if ch == "[":
            end = smiles.find("]", i + 1)
            if end == -1:
                raise InvalidBracketAtom(i, "unterminated bracket atom")
            tokens.append(SmilesToken(BRACKET_ATOM, smiles[i:end + 1], i))
            i = end + 1
        elif ch in _BOND_CHARS:
            tokens.append(SmilesToken(BOND_SYMBOL, ch, i))
            i += 1
        elif ch == "(":
            tokens.append(SmilesToken(BRANCH_OPEN, ch, i))
            i += 1
        elif ch == ")":
            tokens.append(SmilesToken(BRANCH_CLOSE, ch, i))
            i += 1
        elif ch == ".":
            tokens.append(SmilesToken(DOT, ch, i))
            i += 1
        elif ch == "%":
            if i + 2 >= n or not (smiles[i + 1].isdigit() and smiles[i + 2].isdigit()):
                raise UnknownCharacter(ch, i)
            tokens.append(SmilesToken(RING_CLOSURE, smiles[i:i + 3], i))
            i += 3
        elif ch.isdigit():
            if ch == "0":
                raise UnknownCharacter(ch, i)
            tokens.append(SmilesToken(RING_CLOSURE, ch, i))
            i += 1
        elif smiles[i:i + 2] in _ORGANIC_TWO_LETTER:
            tokens.append(SmilesToken(ORGANIC_ATOM, smiles[i:i + 2], i))
            i += 2
        elif ch in _ORGANIC_ONE_LETTER or ch in _AROMATIC_ORGANIC:
            tokens.append(SmilesToken(ORGANIC_ATOM, ch, i))
            i += 1
        else:
            raise UnknownCharacter(ch, i)
    return tokens


def _parse_bracket_atom(lexeme: str, position: int) -> Atom:
    """Parse ``[symbol chirality? Hcount? charge?]``.

    Charge and explicit H count are validated and discarded: node features
    carry only atomic number and chirality tag.
    """
    body = lexeme[1:-1]
    if not body:
        raise InvalidBracketAtom(position, "empty bracket atom")
    i = 0

    def err(offset: int, message: str) -> InvalidBracketAtom:
        # +1 skips the '[' so reported positions point into the source string
        return InvalidBracketAtom(position + 1 + offset, message)

    ch = body[0]
    aromatic = False
    if ch in _AROMATIC_ORGANIC:
        atomic_number = _AROMATIC_ORGANIC[ch]
        aromatic = True
        i = 1
    elif ch.isupper():
        if len(body) >= 2 and body[:2] in ATOMIC_NUMBER:
            # greedy two-letter element match ([Cl-], [Na+], [Sc])
            symbol = body[:2]
            i = 2
        else:
            symbol = ch
            i = 1
        if symbol not in ATOMIC_NUMBER:
            raise err(0, f"unknown element symbol {symbol!r}")
        atomic_number = ATOMIC_NUMBER[symbol]
    else:
        raise err(0, f"expected element symbol, found {ch!r}")

    chirality = Chirality.UNSPECIFIED
    if i < len(body) and body[i] == "@":
        if i + 1 < len(body) and body[i + 1] == "@":
            chirality = Chirality.TETRAHEDRAL_CW
            i += 2
        elif i + 2 < len(body) and body[i + 1:i + 3].isalpha() and body[i + 1:i + 3].isupper():
            # extended markers such as @TH1, @AL2, @SP3: recorded as Other
            chirality = Chirality.OTHER
            i += 3
            while i < len(body) and body[i].isdigit():
                i += 1
        else:
            chirality = Chirality.TETRAHEDRAL_CCW
            i += 1

    if i < len(body) and body[i] == "H":
        i += 1
        while i < len(body) and body[i].isdigit():
            i += 1

    if i < len(body) and body[i] in "+-":
        sign = body[i]
        i += 1
        if i < len(body) and body[i].isdigit():
            while i < len(body) and body[i].isdigit():
                i += 1
        else:
            while i < len(body) and body[i] == sign:
                i += 1

    if i != len(body):
        raise err(i, f"unexpected {body[i]!r} in bracket atom")
    return Atom(atomic_number=atomic_number, chirality=chirality, aromatic=aromatic)


_BOND_FOR_SYMBOL = {
    "-": (BondType.SINGLE, BondDirection.NONE),
    "=": (BondType.DOUBLE, BondDirection.NONE),
    "#": (BondType.TRIPLE, BondDirection.NONE),
    ":": (BondType.AROMATIC, BondDirection.NONE),
    "/": (BondType.SINGLE, BondDirection.END_UP_RIGHT),
    "\\": (BondType.SINGLE, BondDirection.END_DOWN_RIGHT),
}


@dataclass
class _PendingBond:
    bond_type: BondType
    direction: BondDirection
    position: int


class _Builder:
    """Accumulates atoms and bonds while walking the token stream."""

    def __init__(self):
        self.atoms: list[Atom] = []
        self.bond_specs: list[tuple[int, int, BondType, BondDirection]] = []
        self.bond_keys: set[tuple[int, int]] = set()

    def add_atom(self, atom: Atom) -> int:
        self.atoms.append(atom)
        return len(self.atoms) - 1

    def add_bond(self, u: int, v: int, bond_type: BondType,
                 direction: BondDirection, position: int) -> None:
        if u == v:
            raise DanglingBond(position, "ring closure bonds an atom to itself")
        key = (min(u, v), max(u, v))
        if key in self.bond_keys:
            raise DanglingBond(position, f"duplicate bond between atoms {key[0]} and {key[1]}")
        self.bond_keys.add(key)
        self.bond_specs.append((u, v, bond_type, direction))


def parse(smiles: str) -> MolecularGraph:
    """Parse a SMILES string into a MolecularGraph.

    Ring-closure digits are matched pairwise into bonds, parentheses restore
    the attachment atom, and bonds between consecutive aromatic atoms are
    aromatic unless an explicit bond symbol overrides. Directional bond
    symbols ``/`` and ``\\`` are recorded on the produced bond.
    """
    tokens = tokenize(smiles)
    builder = _Builder()
    prev_atom: int | None = None
    pending: _PendingBond | None = None
    branch_stack: list[tuple[int, int]] = []  # (attachment atom, '(' position)
    open_rings: dict[int, tuple[int, _PendingBond | None]] = {}

    def resolve_bond(u: int, v: int, explicit: _PendingBond | None, position: int) -> None:
        if explicit is not None:
            builder.add_bond(u, v, explicit.bond_type, explicit.direction, position)
        elif builder.atoms[u].aromatic and builder.atoms[v].aromatic:
            builder.add_bond(u, v, BondType.AROMATIC, BondDirection.NONE, position)
        else:
            builder.add_bond(u, v, BondType.SINGLE, BondDirection.NONE, position)

    for token in tokens:
        if token.kind in (ORGANIC_ATOM, BRACKET_ATOM):
            if token.kind == ORGANIC_ATOM:
                lex = token.lexeme
                if lex in _ORGANIC_TWO_LETTER:
                    atom = Atom(_ORGANIC_TWO_LETTER[lex])
                elif lex in _ORGANIC_ONE_LETTER:
                    atom = Atom(_ORGANIC_ONE_LETTER[lex])
                else:
                    atom = Atom(_AROMATIC_ORGANIC[lex], aromatic=True)
            else:
                atom = _parse_bracket_atom(token.lexeme, token.position)
            idx = builder.add_atom(atom)
            if prev_atom is not None:
                resolve_bond(prev_atom, idx, pending, token.position)
            pending = None
            prev_atom = idx
        elif token.kind == BOND_SYMBOL:
            if pending is not None:
                raise DanglingBond(token.position, "consecutive bond symbols")
            if prev_atom is None:
                raise DanglingBond(token.position, "bond symbol before any atom")
            bond_type, direction = _BOND_FOR_SYMBOL[token.lexeme]
            pending = _PendingBond(bond_type, direction, token.position)
        elif token.kind == RING_CLOSURE:
            digit = int(token.lexeme.lstrip("%"))
            if prev_atom is None:
                raise DanglingBond(token.position, "ring closure before any atom")
            if digit in open_rings:
                other_atom, other_pending = open_rings.pop(digit)
                explicit = pending if pending is not None else other_pending
                if (pending is not None and other_pending is not None
                        and (pending.bond_type, pending.direction)
                        != (other_pending.bond_type, other_pending.direction)):
                    raise DanglingBond(token.position,
                                       f"conflicting bond symbols on ring closure {digit}")
                resolve_bond(other_atom, prev_atom, explicit, token.position)
                pending = None
            else:
                open_rings[digit] = (prev_atom, pending)
                pending = None
        elif token.kind == BRANCH_OPEN:
            if pending is not None:
                raise DanglingBond(token.position, "bond symbol before branch open")
            if prev_atom is None:
                raise UnbalancedBranch(token.position, "branch opened before any atom")
            branch_stack.append((prev_atom, token.position))
        elif token.kind == BRANCH_CLOSE:
            if pending is not None:
                raise DanglingBond(token.position, "bond symbol before branch close")
            if not branch_stack:
                raise UnbalancedBranch(token.position, "branch closed but never opened")
            prev_atom = branch_stack.pop()[0]
        else:  # DOT
            raise FragmentedInput(token.position)

    if pending is not None:
        raise DanglingBond(pending.position, "trailing bond symbol")
    if branch_stack:
        raise UnbalancedBranch(branch_stack[-1][1], "branch opened but never closed")
    if open_rings:
        raise UnclosedRing(min(open_rings))
    return MolecularGraph(atoms=builder.atoms,
                          bonds=[Bond(min(u, v), max(u, v), bt, bd)
                                 for u, v, bt, bd in builder.bond_specs])


def parse_directional(smiles: str) -> MolecularGraph:
    """Parse with directional bond semantics.

    ``/`` and ``\\`` set END_UP_RIGHT / END_DOWN_RIGHT on the produced bond;
    every other bond carries direction NONE. The base parser already records
    directions, so this is the same operation under its directional contract.
    """
    return parse(smiles)
