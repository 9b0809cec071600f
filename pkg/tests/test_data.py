import numpy as np
import pytest

from metamol.autodiff import ParameterSet
from metamol.data import (CorruptFile, EmptyDataset, Episode, InsufficientClassData,
                          MISSING, MissingColumn, ShapeMismatch, UnknownTaskName,
                          VersionMismatch, build_episode, generate_synthetic,
                          load_checkpoint, load_dataset, motif_catalog, save_checkpoint,
                          split_tasks, write_dataset_csv)
from metamol.smiles import MolecularGraph


def write_csv(path, text):
    path.write_text(text, encoding="utf-8")
    return path


class TestLoadDataset:
    def test_single_row(self, tmp_path):
        path = write_csv(tmp_path / "d.csv", "smiles,tox\nCC,1\n")
        dataset, report = load_dataset(path)
        assert len(dataset.molecules) == 1
        assert dataset.task_names == ["tox"]
        assert dataset.labels[0, 0] == 1
        assert report.conserved()

    def test_parse_failure_isolated(self, tmp_path):
        path = write_csv(tmp_path / "d.csv", "smiles,tox\nCC,1\nC1CC,0\nCCO,0\n")
        dataset, report = load_dataset(path)
        assert report.rows_total == 3
        assert report.retained == 2
        assert len(report.parse_failures) == 1
        line_no, smiles, error = report.parse_failures[0]
        assert line_no == 3 and smiles == "C1CC" and "ring" in error
        assert report.conserved()

    def test_task_autodetection_skips_id_column(self, tmp_path):
        path = write_csv(tmp_path / "d.csv",
                         "mol_id,smiles,t1,t2\nTOX1,CC,1,0\nTOX2,CCO,,1\n")
        dataset, _ = load_dataset(path)
        assert dataset.task_names == ["t1", "t2"]
        assert dataset.labels[1, 0] == MISSING

    def test_float_style_labels(self, tmp_path):
        path = write_csv(tmp_path / "d.csv", "smiles,t\nCC,1.0\nCCO,0.0\n")
        dataset, _ = load_dataset(path)
        assert list(dataset.labels[:, 0]) == [1, 0]

    def test_all_missing_row_counted(self, tmp_path):
        path = write_csv(tmp_path / "d.csv", "smiles,t1,t2\nCC,,\nCCO,1,0\n")
        dataset, report = load_dataset(path)
        assert report.all_missing_rows == 1
        assert report.retained == 1
        assert report.conserved()

    def test_missing_column(self, tmp_path):
        path = write_csv(tmp_path / "d.csv", "smi,t\nCC,1\n")
        with pytest.raises(MissingColumn):
            load_dataset(path)
        path2 = write_csv(tmp_path / "d2.csv", "smiles,t\nCC,1\n")
        with pytest.raises(MissingColumn):
            load_dataset(path2, task_columns=["nope"])

    def test_empty_dataset(self, tmp_path):
        path = write_csv(tmp_path / "d.csv", "smiles,t\nC1CC,1\n")
        with pytest.raises(EmptyDataset):
            load_dataset(path)


class TestSplitTasks:
    def dataset(self):
        return generate_synthetic(5, 12, np.random.default_rng(0))

    def test_named_split(self):
        ds = self.dataset()
        split = split_tasks(ds, ["task_3", "task_4"])
        assert split.test_task_ids == [3, 4]
        assert split.train_task_ids == [0, 1, 2]
        assert set(split.train_task_ids) | set(split.test_task_ids) == set(range(5))

    def test_unknown_task(self):
        with pytest.raises(UnknownTaskName):
            split_tasks(self.dataset(), ["nope"])


class TestBuildEpisode:
    def dataset(self):
        return generate_synthetic(3, 40, np.random.default_rng(1))

    def test_one_shot_support_size(self):
        episode = build_episode(self.dataset(), 0, 1, 4, np.random.default_rng(0))
        assert len(episode.support) == 2
        assert episode.k_shot == 1

    def test_five_shot_support_size(self):
        episode = build_episode(self.dataset(), 0, 5, 4, np.random.default_rng(0))
        assert len(episode.support) == 10
        assert sum(y for _, y in episode.support) == 5

    def test_insufficient_class_data(self):
        ds = self.dataset()
        with pytest.raises(InsufficientClassData):
            build_episode(ds, 0, 20, 4, np.random.default_rng(0))

    def test_disjoint_and_balanced_across_seeds(self):
        ds = self.dataset()
        for seed in range(30):
            episode = build_episode(ds, 1, 2, 3, np.random.default_rng(seed))
            assert set(episode.support_ids).isdisjoint(episode.query_ids)
            pos = sum(y for _, y in episode.support)
            assert pos == 2 and len(episode.support) == 4
            q_pos = sum(y for _, y in episode.query)
            assert q_pos == 3 and len(episode.query) == 6

    def test_query_none_takes_all_remaining(self):
        ds = self.dataset()
        episode = build_episode(ds, 0, 1, None, np.random.default_rng(0))
        pos, neg = ds.task_pools(0)
        assert len(episode.query) == len(pos) + len(neg) - 2

    def test_reproducible_bitwise(self):
        ds = self.dataset()
        a = build_episode(ds, 0, 2, 5, np.random.default_rng(7))
        b = build_episode(ds, 0, 2, 5, np.random.default_rng(7))
        assert a.support_ids == b.support_ids and a.query_ids == b.query_ids

    def test_seeds_differ_with_high_probability(self):
        ds = self.dataset()
        supports = {build_episode(ds, 0, 1, 2, np.random.default_rng(s)).support_ids
                    for s in range(100)}
        assert len(supports) > 50

    def test_episode_validation(self):
        ds = self.dataset()
        graph = ds.molecules[0].graph
        with pytest.raises(ValueError):
            Episode(task_id=0, support=[(graph, 1), (graph, 1)], query=[])
        with pytest.raises(ValueError):
            Episode(task_id=0, support=[(graph, 1), (graph, 0)], query=[(graph, 1)],
                    support_ids=(1, 2), query_ids=(2,))


def independent_motif_scan(graph: MolecularGraph, motif) -> bool:
    """Exhaustive ordered-triple scan, written independently of the generator:
    enumerate every (u, v, w) with u-v and v-w bonds and compare types."""
    a, b, c = motif
    n = graph.num_atoms
    bonded = [[False] * n for _ in range(n)]
    for bond in graph.bonds:
        bonded[bond.u][bond.v] = bonded[bond.v][bond.u] = True
    for u in range(n):
        for v in range(n):
            for w in range(n):
                if u == v or v == w or u == w:
                    continue
                if not (bonded[u][v] and bonded[v][w]):
                    continue
                types = (graph.atoms[u].atomic_number, graph.atoms[v].atomic_number,
                         graph.atoms[w].atomic_number)
                if types == (a, b, c) or types == (c, b, a):
                    return True
    return False


class TestGenerateSynthetic:
    def test_labels_match_independent_scan(self):
        ds = generate_synthetic(6, 30, np.random.default_rng(2))
        motifs = motif_catalog()[:6]
        for i, record in enumerate(ds.molecules):
            task = int(np.flatnonzero(ds.labels[i] != MISSING)[0])
            expected = 1 if independent_motif_scan(record.graph, motifs[task]) else 0
            assert ds.labels[i, task] == expected

    def test_positive_rate_balanced(self):
        ds = generate_synthetic(4, 25, np.random.default_rng(3))
        for task in range(4):
            pos, neg = ds.task_pools(task)
            rate = len(pos) / (len(pos) + len(neg))
            assert abs(rate - 0.5) <= 0.1

    def test_atom_range_and_alphabet(self):
        ds = generate_synthetic(3, 20, np.random.default_rng(4))
        for record in ds.molecules:
            assert 6 <= record.graph.num_atoms <= 20
            for atom in record.graph.atoms:
                assert atom.atomic_number in (6, 7, 8, 16, 9)

    def test_deterministic(self):
        a = generate_synthetic(3, 15, np.random.default_rng(5))
        b = generate_synthetic(3, 15, np.random.default_rng(5))
        assert [m.smiles for m in a.molecules] == [m.smiles for m in b.molecules]
        assert np.array_equal(a.labels, b.labels)

    def test_requires_two_tasks(self):
        with pytest.raises(ValueError):
            generate_synthetic(1, 10, np.random.default_rng(0))

    def test_csv_round_trip(self, tmp_path):
        ds = generate_synthetic(3, 10, np.random.default_rng(6))
        path = tmp_path / "synth.csv"
        write_dataset_csv(ds, path)
        loaded, report = load_dataset(path)
        assert not report.parse_failures
        assert loaded.task_names == ds.task_names
        assert np.array_equal(loaded.labels, ds.labels)
        assert [m.smiles for m in loaded.molecules] == [m.smiles for m in ds.molecules]


def random_params(seed, n_tensors=4):
    rng = np.random.default_rng(seed)
    return ParameterSet.from_arrays({
        f"tensor_{i}": rng.standard_normal(tuple(rng.integers(1, 6, size=rng.integers(1, 3))))
        for i in range(n_tensors)})


class TestCheckpoints:
    def test_bitwise_round_trip(self, tmp_path):
        for seed in range(10):
            params = random_params(seed)
            path = tmp_path / f"ck{seed}.ckpt"
            save_checkpoint(params, {"seed": seed}, path)
            loaded, config, version = load_checkpoint(path)
            assert version == 1
            assert config == {"seed": seed}
            assert params.equals_bitwise(loaded)

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "ck.ckpt"
        save_checkpoint(random_params(0), {}, path)
        blob = path.read_bytes().replace(b"MOLCKPT 1", b"MOLCKPT 99", 1)
        path.write_bytes(blob)
        with pytest.raises(VersionMismatch):
            load_checkpoint(path)

    def test_renamed_tensor_names_the_error(self, tmp_path):
        path = tmp_path / "ck.ckpt"
        params = random_params(1)
        save_checkpoint(params, {}, path)
        expected = {name: t.shape for name, t in params.items()}
        expected["tensor_renamed"] = expected.pop("tensor_0")
        with pytest.raises(ShapeMismatch) as exc:
            load_checkpoint(path, expected_shapes=expected)
        assert "tensor_renamed" in str(exc.value)

    def test_wrong_shape_names_the_tensor(self, tmp_path):
        path = tmp_path / "ck.ckpt"
        params = random_params(2)
        save_checkpoint(params, {}, path)
        expected = {name: t.shape for name, t in params.items()}
        expected["tensor_1"] = (99, 99)
        with pytest.raises(ShapeMismatch) as exc:
            load_checkpoint(path, expected_shapes=expected)
        assert exc.value.name == "tensor_1"

    def test_truncated_payload_is_corrupt(self, tmp_path):
        path = tmp_path / "ck.ckpt"
        save_checkpoint(random_params(3), {}, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-8])
        with pytest.raises(CorruptFile):
            load_checkpoint(path)

    def test_not_a_checkpoint(self, tmp_path):
        path = write_csv(tmp_path / "junk.ckpt", "hello world\n")
        with pytest.raises(CorruptFile):
            load_checkpoint(path)

    def test_f4_mode_is_lossy_but_loads(self, tmp_path):
        params = random_params(4)
        path = tmp_path / "ck.ckpt"
        save_checkpoint(params, {}, path, dtype="f4")
        loaded, _, _ = load_checkpoint(path)
        for name, tensor in params.items():
            np.testing.assert_allclose(loaded[name].value, tensor.value, rtol=1e-6)

    def test_identical_bytes_for_identical_params(self, tmp_path):
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(random_params(5), {"x": 1}, a)
        save_checkpoint(random_params(5), {"x": 1}, b)
        assert a.read_bytes() == b.read_bytes()
