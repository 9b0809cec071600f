import csv
from pathlib import Path

import pytest

from metamol.smiles import (Atom, Bond, BondDirection, BondType, Chirality,
                            DanglingBond, EmptyInput, FragmentedInput,
                            InvalidBracketAtom, MolecularGraph, SmilesError,
                            UnbalancedBranch, UnclosedRing, UnknownCharacter,
                            make_graph, parse, parse_directional, tokenize)

CORPUS = Path(__file__).parent / "data" / "smiles_corpus.csv"


def load_corpus():
    with open(CORPUS, newline="") as fh:
        rows = [r for r in csv.DictReader(line for line in fh if not line.startswith("#"))]
    assert len(rows) >= 50
    return rows


def graph_stats(graph: MolecularGraph) -> dict:
    formula: dict[int, int] = {}
    for atom in graph.atoms:
        formula[atom.atomic_number] = formula.get(atom.atomic_number, 0) + 1
    return {
        "atoms": graph.num_atoms,
        "bonds": graph.num_bonds,
        "single": sum(b.bond_type == BondType.SINGLE for b in graph.bonds),
        "double": sum(b.bond_type == BondType.DOUBLE for b in graph.bonds),
        "triple": sum(b.bond_type == BondType.TRIPLE for b in graph.bonds),
        "aromatic_bonds": sum(b.bond_type == BondType.AROMATIC for b in graph.bonds),
        "dir_up": sum(b.direction == BondDirection.END_UP_RIGHT for b in graph.bonds),
        "dir_down": sum(b.direction == BondDirection.END_DOWN_RIGHT for b in graph.bonds),
        "chi_ccw": sum(a.chirality == Chirality.TETRAHEDRAL_CCW for a in graph.atoms),
        "chi_cw": sum(a.chirality == Chirality.TETRAHEDRAL_CW for a in graph.atoms),
        "chi_other": sum(a.chirality == Chirality.OTHER for a in graph.atoms),
        "aromatic_atoms": sum(a.aromatic for a in graph.atoms),
        "formula": " ".join(f"{z}:{n}" for z, n in sorted(formula.items())),
    }


@pytest.mark.parametrize("row", load_corpus(), ids=lambda r: r["smiles"])
def test_corpus_entry(row):
    got = graph_stats(parse(row["smiles"]))
    for key, value in got.items():
        expected = row[key] if key == "formula" else int(row[key])
        assert value == expected, f"{row['smiles']}: {key} = {value}, expected {expected}"


class TestTokenize:
    def test_simple_chain(self):
        tokens = tokenize("CC")
        assert [t.kind for t in tokens] == ["organic-atom", "organic-atom"]
        assert [t.lexeme for t in tokens] == ["C", "C"]

    def test_ring_digits(self):
        kinds = [t.kind for t in tokenize("C1CC1")]
        assert kinds == ["organic-atom", "ring-closure-digit", "organic-atom",
                         "organic-atom", "ring-closure-digit"]

    def test_unknown_character_position(self):
        with pytest.raises(UnknownCharacter) as exc:
            tokenize("C#X")
        assert exc.value.position == 2

    def test_empty_input(self):
        with pytest.raises(EmptyInput):
            tokenize("")

    def test_lexemes_reconstruct_input(self):
        for smiles in ["CC(=O)Oc1ccccc1C(=O)O", "F/C=C\\F", "C%12CC%12",
                       "[C@@H](N)O", "C1CC2CCC12"]:
            tokens = tokenize(smiles)
            assert "".join(t.lexeme for t in tokens) == smiles
            positions = [t.position for t in tokens]
            assert positions == sorted(positions)
            assert len(set(positions)) == len(positions)

    def test_positions_within_input(self):
        for smiles in ["c1ccccc1", "[NH4+]", "CC"]:
            for token in tokenize(smiles):
                assert 0 <= token.position < len(smiles)


class TestParse:
    def test_single_atom(self):
        graph = parse("C")
        assert graph.num_atoms == 1 and graph.num_bonds == 0
        assert graph.atoms[0].atomic_number == 6
        assert graph.atoms[0].chirality == Chirality.UNSPECIFIED

    def test_double_bond(self):
        graph = parse("C=O")
        assert [a.atomic_number for a in graph.atoms] == [6, 8]
        assert graph.bonds[0].bond_type == BondType.DOUBLE

    def test_benzene_cycle(self):
        graph = parse("c1ccccc1")
        assert graph.num_atoms == 6 and graph.num_bonds == 6
        assert all(b.bond_type == BondType.AROMATIC for b in graph.bonds)
        # one cycle: every atom has exactly two neighbors
        assert all(len(graph.adjacency[v]) == 2 for v in range(6))

    def test_branch_restores_attachment(self):
        graph = parse("CC(C)C")
        # atom 1 is the branch point with three neighbors
        assert sorted(len(graph.adjacency[v]) for v in range(4)) == [1, 1, 1, 3]

    def test_explicit_override_beats_aromatic_inference(self):
        graph = parse("c1ccccc1-c1ccccc1" .replace(" ", ""))
        biphenyl_link = [b for b in graph.bonds if b.bond_type == BondType.SINGLE]
        assert len(biphenyl_link) == 1

    def test_unclosed_ring(self):
        with pytest.raises(UnclosedRing) as exc:
            parse("C1CC")
        assert exc.value.digit == 1

    def test_unbalanced_branches(self):
        with pytest.raises(UnbalancedBranch):
            parse("C(C")
        with pytest.raises(UnbalancedBranch):
            parse("CC)C")
        with pytest.raises(UnbalancedBranch):
            parse("(CC)")

    def test_invalid_bracket_atom(self):
        with pytest.raises(InvalidBracketAtom):
            parse("[]")
        with pytest.raises(InvalidBracketAtom):
            parse("[Zz]")
        with pytest.raises(InvalidBracketAtom):
            parse("[C!]")
        with pytest.raises(InvalidBracketAtom):
            parse("[13C]")  # isotopes are outside the supported subset
        with pytest.raises(InvalidBracketAtom):
            parse("[CH")

    def test_dangling_bonds(self):
        for bad in ["CC=", "=CC", "C=(C)C", "C=)", "C==C", "1CC"]:
            with pytest.raises((DanglingBond, UnbalancedBranch)):
                parse(bad)

    def test_dot_rejected(self):
        with pytest.raises(FragmentedInput) as exc:
            parse("CC.O")
        assert exc.value.position == 2

    def test_duplicate_ring_bond_rejected(self):
        with pytest.raises(DanglingBond):
            parse("C1C1")  # ring closure duplicates the chain bond
        with pytest.raises(DanglingBond):
            parse("C11")  # self bond

    def test_error_positions_in_range(self):
        bad_inputs = ["C#X", "CC.O", "C=)", "[CH", "CC)"]
        for smiles in bad_inputs:
            try:
                parse(smiles)
                raise AssertionError(f"{smiles} unexpectedly parsed")
            except SmilesError as exc:
                if exc.position is not None:
                    assert 0 <= exc.position < len(smiles)

    def test_deterministic(self):
        a = parse("CC(=O)Oc1ccccc1C(=O)O")
        b = parse("CC(=O)Oc1ccccc1C(=O)O")
        assert [at.atomic_number for at in a.atoms] == [at.atomic_number for at in b.atoms]
        assert [(x.u, x.v, x.bond_type, x.direction) for x in a.bonds] == \
               [(x.u, x.v, x.bond_type, x.direction) for x in b.bonds]

    def test_adjacency_symmetric(self):
        for smiles in ["C1CC2CCC12", "c1ccc2ccccc2c1", "CC(=O)Oc1ccccc1C(=O)O"]:
            graph = parse(smiles)
            for v in range(graph.num_atoms):
                for u, b in graph.adjacency[v]:
                    assert (v, b) in graph.adjacency[u]
                    bond = graph.bonds[b]
                    assert {bond.u, bond.v} == {u, v}

    def test_ring_digits_matched_pairwise(self):
        graph = parse("C1CC2CCC12")
        # two ring closures create exactly two extra bonds over the chain
        assert graph.num_bonds == graph.num_atoms - 1 + 2


class TestParseDirectional:
    def test_trans_difluoroethene(self):
        graph = parse_directional("F/C=C/F")
        kinds = [(b.bond_type, b.direction) for b in graph.bonds]
        assert kinds == [
            (BondType.SINGLE, BondDirection.END_UP_RIGHT),
            (BondType.DOUBLE, BondDirection.NONE),
            (BondType.SINGLE, BondDirection.END_UP_RIGHT),
        ]

    def test_plain_bond_has_no_direction(self):
        graph = parse_directional("CC")
        assert graph.bonds[0].direction == BondDirection.NONE

    def test_up_direction(self):
        graph = parse_directional("C/C")
        assert graph.bonds[0].bond_type == BondType.SINGLE
        assert graph.bonds[0].direction == BondDirection.END_UP_RIGHT


class TestGraphValidation:
    def test_atom_bounds(self):
        with pytest.raises(ValueError):
            Atom(0)
        with pytest.raises(ValueError):
            Atom(119)

    def test_bond_endpoints(self):
        with pytest.raises(ValueError):
            Bond(2, 2)
        with pytest.raises(ValueError):
            Bond(3, 1)

    def test_duplicate_bond_rejected(self):
        with pytest.raises(ValueError):
            make_graph([Atom(6), Atom(6)],
                       [(0, 1, BondType.SINGLE, BondDirection.NONE),
                        (1, 0, BondType.DOUBLE, BondDirection.NONE)])

    def test_empty_graph_rejected(self):
        with pytest.raises(ValueError):
            MolecularGraph(atoms=[], bonds=[])
