"""Dataset ingestion, task splitting, episode sampling, synthetic task
generation, and checkpoint persistence.

Datasets are multi-task CSV files: a header row, one SMILES column, and
task columns valued 0, 1, or empty (missing). A missing label only removes
the molecule from that task's episode pool. The synthetic generator plants
a distinct three-atom path motif per task so labels are exactly computable
by subgraph scan, giving the few-shot benchmark a ground-truth oracle.

Checkpoints are a self-describing container: a plain-text manifest
(names, shapes, dtype, byte offsets) followed by a raw little-endian
payload. 64-bit saves round-trip bitwise.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ParameterSet, Tensor
from .smiles import MolecularGraph, SmilesError, parse


class MissingColumn(ValueError):
    pass


class EmptyDataset(ValueError):
    pass


class BadLabelValue(ValueError):
    pass


class UnknownTaskName(ValueError):
    pass


class InsufficientClassData(ValueError):
    def __init__(self, task, label_class: int, have: int, need: int):
        super().__init__(f"task {task!r} class {label_class}: "
                         f"{have} molecules available, {need} required")
        self.task = task
        self.label_class = label_class


class VersionMismatch(ValueError):
    pass


class ShapeMismatch(ValueError):
    def __init__(self, name: str, message: str):
        super().__init__(message)
        self.name = name


class CorruptFile(ValueError):
    pass


MISSING = -1


@dataclass
class MoleculeRecord:
    mol_id: str
    graph: MolecularGraph
    smiles: str


@dataclass
class IngestionReport:
    rows_total: int = 0
    retained: int = 0
    all_missing_rows: int = 0
    parse_failures: list[tuple[int, str, str]] = field(default_factory=list)  # (line, smiles, error)

    def conserved(self) -> bool:
        return self.rows_total == self.retained + len(self.parse_failures) + self.all_missing_rows


@dataclass
class MultiTaskDataset:
    molecules: list[MoleculeRecord]
    labels: np.ndarray  # [molecules x tasks], values in {0, 1, MISSING}
    task_names: list[str]

    def __post_init__(self):
        if self.labels.shape != (len(self.molecules), len(self.task_names)):
            raise ValueError("label matrix shape does not match molecules x tasks")

    @property
    def num_tasks(self) -> int:
        return len(self.task_names)

    def task_index(self, name: str) -> int:
        try:
            return self.task_names.index(name)
        except ValueError:
            raise UnknownTaskName(f"no task named {name!r}") from None

    def task_pools(self, task: int) -> tuple[np.ndarray, np.ndarray]:
        """Indices of positive and negative molecules for one task."""
        column = self.labels[:, task]
        return np.flatnonzero(column == 1), np.flatnonzero(column == 0)


@dataclass
class TaskSplit:
    train_task_ids: list[int]
    test_task_ids: list[int]


@dataclass
class Episode:
    """One task's class-balanced support set and disjoint query set."""

    task_id: int
    support: list[tuple[MolecularGraph, int]]
    query: list[tuple[MolecularGraph, int]]
    support_ids: tuple = ()
    query_ids: tuple = ()

    def __post_init__(self):
        pos = sum(1 for _, y in self.support if y == 1)
        neg = len(self.support) - pos
        if pos == 0 or pos != neg:
            raise ValueError(f"support must hold k examples per class, got {pos} pos / {neg} neg")
        if self.support_ids and self.query_ids:
            overlap = set(self.support_ids) & set(self.query_ids)
            if overlap:
                raise ValueError(f"support and query share molecules: {sorted(overlap)}")

    @property
    def k_shot(self) -> int:
        return len(self.support) // 2


def _parse_label_cell(cell: str) -> int:
    text = cell.strip()
    if not text:
        return MISSING
    try:
        value = float(text)
    except ValueError:
        raise BadLabelValue(f"label cell {cell!r} is not numeric") from None
    if value == 0.0:
        return 0
    if value == 1.0:
        return 1
    raise BadLabelValue(f"label cell {cell!r} is not 0, 1, or empty")


def _detect_task_columns(header: list[str], rows: list[list[str]], smiles_col: str) -> list[str]:
    """Columns other than the SMILES column whose non-empty cells are all 0/1."""
    tasks = []
    for j, name in enumerate(header):
        if name == smiles_col:
            continue
        non_empty = 0
        ok = True
        for row in rows:
            cell = row[j].strip() if j < len(row) else ""
            if not cell:
                continue
            non_empty += 1
            try:
                value = float(cell)
            except ValueError:
                ok = False
                break
            if value not in (0.0, 1.0):
                ok = False
                break
        if ok and non_empty:
            tasks.append(name)
    return tasks


def load_dataset(path, smiles_column: str = "smiles",
                 task_columns: list[str] | None = None
                 ) -> tuple[MultiTaskDataset, IngestionReport]:
    """Load a multi-task CSV; unparseable rows are reported, never dropped silently.

    Without an explicit task column list, every non-SMILES column whose
    non-empty values are all 0/1 is treated as a task.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyDataset(f"{path}: no header row") from None
        rows = list(reader)

    if smiles_column not in header:
        raise MissingColumn(f"{path}: no column named {smiles_column!r}")
    smiles_idx = header.index(smiles_column)
    if task_columns is None:
        task_columns = _detect_task_columns(header, rows, smiles_column)
        if not task_columns:
            raise MissingColumn(f"{path}: no task columns detected")
    else:
        for name in task_columns:
            if name not in header:
                raise MissingColumn(f"{path}: no column named {name!r}")
    task_idx = [header.index(name) for name in task_columns]

    report = IngestionReport(rows_total=len(rows))
    molecules: list[MoleculeRecord] = []
    label_rows: list[list[int]] = []
    for line_no, row in enumerate(rows, start=2):  # header is line 1
        smiles = row[smiles_idx].strip() if smiles_idx < len(row) else ""
        try:
            graph = parse(smiles)
        except SmilesError as exc:
            report.parse_failures.append((line_no, smiles, str(exc)))
            continue
        labels = [_parse_label_cell(row[j]) if j < len(row) else MISSING for j in task_idx]
        if all(v == MISSING for v in labels):
            report.all_missing_rows += 1
            continue
        molecules.append(MoleculeRecord(mol_id=f"row{line_no}", graph=graph, smiles=smiles))
        label_rows.append(labels)
    report.retained = len(molecules)
    if not molecules:
        raise EmptyDataset(f"{path}: no usable molecules")
    labels = np.array(label_rows, dtype=np.int8)
    return MultiTaskDataset(molecules=molecules, labels=labels,
                            task_names=list(task_columns)), report


def split_tasks(dataset: MultiTaskDataset, test_task_names: list[str]) -> TaskSplit:
    """Deterministic split by explicit test-task names."""
    if not test_task_names:
        raise UnknownTaskName("at least one test task name is required")
    test_ids = [dataset.task_index(name) for name in test_task_names]
    train_ids = [i for i in range(dataset.num_tasks) if i not in set(test_ids)]
    return TaskSplit(train_task_ids=train_ids, test_task_ids=test_ids)


def build_episode(dataset: MultiTaskDataset, task: int, k_shot: int,
                  query_per_class: int | None, rng: np.random.Generator) -> Episode:
    """Sample a class-balanced support set and a disjoint query set.

    ``query_per_class=None`` takes every remaining molecule of the task
    (the meta-testing convention); an integer caps each class, clamped to
    availability.
    """
    pos_pool, neg_pool = dataset.task_pools(task)
    for label_class, pool in ((1, pos_pool), (0, neg_pool)):
        if len(pool) < k_shot + 1:
            raise InsufficientClassData(dataset.task_names[task], label_class,
                                        len(pool), k_shot + 1)

    def split_class(pool: np.ndarray) -> tuple[list[int], list[int]]:
        chosen = rng.choice(len(pool), size=k_shot, replace=False)
        chosen_set = set(int(i) for i in chosen)
        support = [int(pool[i]) for i in sorted(chosen_set)]
        rest = [int(pool[i]) for i in range(len(pool)) if i not in chosen_set]
        if query_per_class is None:
            return support, rest
        take = min(query_per_class, len(rest))
        picked = rng.choice(len(rest), size=take, replace=False)
        return support, [rest[i] for i in sorted(picked)]

    sup_pos, qry_pos = split_class(pos_pool)
    sup_neg, qry_neg = split_class(neg_pool)
    support_idx = sup_pos + sup_neg
    query_idx = qry_pos + qry_neg
    return Episode(
        task_id=task,
        support=[(dataset.molecules[i].graph, int(dataset.labels[i, task])) for i in support_idx],
        query=[(dataset.molecules[i].graph, int(dataset.labels[i, task])) for i in query_idx],
        support_ids=tuple(support_idx),
        query_ids=tuple(query_idx),
    )


# ---------------------------------------------------------------------------
# synthetic planted-motif tasks

_SYNTH_ATOMS = (6, 7, 8, 16, 9)  # C N O S F
_SYNTH_SYMBOL = {6: "C", 7: "N", 8: "O", 16: "S", 9: "F"}
_HETERO_ATOMS = (7, 8, 16, 9)


def motif_catalog() -> list[tuple[int, int, int]]:
    """Ordered heteroatom triples with three distinct types, in a fixed order.

    One canonical orientation per path (a path matches in either direction);
    carbon is excluded so the all-carbon scaffolding can never complete a
    motif by accident. The order interleaves the four type-sets so any
    prefix keeps letter-set siblings together: negatives drawn from sibling
    motifs then balance every chain pattern across a pooled view of the
    tasks.
    """
    from itertools import combinations, permutations

    groups = []
    for trio in combinations(_HETERO_ATOMS, 3):
        classes = sorted({(a, b, c) if (a, b, c) < (c, b, a) else (c, b, a)
                          for a, b, c in permutations(trio)})
        groups.append(classes)
    ordered = groups[0] + groups[1] + groups[2][:2] + groups[3][:2]
    ordered += [groups[2][2], groups[3][2]]
    return ordered


def contains_path_triple(graph: MolecularGraph, motif: tuple[int, int, int]) -> bool:
    """True iff some 3-atom path u-v-w carries the motif's types, in either
    orientation."""
    a, b, c = motif
    for v in range(graph.num_atoms):
        if graph.atoms[v].atomic_number != b:
            continue
        neighbors = graph.neighbors(v)
        for u in neighbors:
            if graph.atoms[u].atomic_number != a:
                continue
            for w in neighbors:
                if w != u and graph.atoms[w].atomic_number == c:
                    return True
    return False


def _build_molecule(chain: tuple[int, int, int],
                    rng: np.random.Generator) -> tuple[list[int], list[list[int]]]:
    """One synthetic molecule: a carbon tree (plus up to two ring closures)
    carrying a three-atom heteroatom chain, with heteroatom leaf decorations.

    The class signal lives in the chain's ordered types: positives carry the
    task's motif, negatives a reordering of the same three types, so both
    classes share atom inventory and hetero-bond counts. The chain's
    attachment point, an optional extra ring edge through a chain atom, and
    leaves landing on arbitrary hosts all vary, so the pattern appears in
    many local contexts rather than one canonical pendant shape.
    """
    backbone = int(rng.integers(5, 13))
    types = [6] * backbone
    edges = {(int(rng.integers(0, i)), i) for i in range(1, backbone)}
    for _ in range(int(rng.integers(0, 2))):
        u, v = (int(x) for x in rng.integers(0, backbone, size=2))
        if u != v and (min(u, v), max(u, v)) not in edges:
            edges.add((min(u, v), max(u, v)))

    first = len(types)
    types.extend(chain)
    edges.add((first, first + 1))
    edges.add((first + 1, first + 2))
    # the backbone may grab any chain atom, not always the chain head
    attach_to = first + int(rng.integers(0, 3))
    edges.add((int(rng.integers(0, backbone)), attach_to))
    if rng.integers(0, 2):
        # occasional second backbone contact turns the chain into a ring part
        u = int(rng.integers(0, backbone))
        v = first + int(rng.integers(0, 3))
        if (min(u, v), max(u, v)) not in edges:
            edges.add((min(u, v), max(u, v)))

    n_leaves = int(rng.integers(1, 4))
    for _ in range(n_leaves):
        host = int(rng.integers(0, first + 3))
        leaf = len(types)
        types.append(int(_HETERO_ATOMS[int(rng.integers(0, len(_HETERO_ATOMS)))]))
        edges.add((host, leaf))

    adjacency: list[list[int]] = [[] for _ in range(len(types))]
    for u, v in sorted(edges):
        adjacency[u].append(v)
        adjacency[v].append(u)
    return types, adjacency


def _to_smiles(types: list[int], adjacency: list[list[int]]) -> str:
    """Emit a single-bond SMILES via DFS; non-tree edges become ring digits."""
    n = len(types)
    visited = [False] * n
    children: list[list[int]] = [[] for _ in range(n)]
    tree_edges: set[tuple[int, int]] = set()

    def dfs(v: int) -> None:
        visited[v] = True
        for u in adjacency[v]:
            if not visited[u]:
                children[v].append(u)
                tree_edges.add((min(u, v), max(u, v)))
                dfs(u)

    dfs(0)
    ring_at: dict[int, list[int]] = {}
    digit = 0
    for u in range(n):
        for v in adjacency[u]:
            if u < v and (u, v) not in tree_edges:
                digit += 1
                ring_at.setdefault(u, []).append(digit)
                ring_at.setdefault(v, []).append(digit)

    def emit(v: int) -> str:
        part = _SYNTH_SYMBOL[types[v]] + "".join(str(d) for d in ring_at.get(v, ()))
        kids = children[v]
        for child in kids[:-1]:
            part += "(" + emit(child) + ")"
        if kids:
            part += emit(kids[-1])
        return part

    return emit(0)


def generate_synthetic(n_tasks: int, per_task: int,
                       rng: np.random.Generator) -> MultiTaskDataset:
    """Build an n-task dataset of random molecules with planted motifs.

    Each task's block is label-balanced by construction: positives carry the
    task's motif as a pendant path, negatives a reordering of the same three
    atom types, and candidates are rejection-sampled until the subgraph scan
    agrees with the intended class. Every label equals the scan of the graph
    re-parsed from its emitted SMILES.
    """
    if n_tasks < 2:
        raise ValueError("need at least two tasks")
    catalog = motif_catalog()
    if n_tasks > len(catalog):
        raise ValueError(f"at most {len(catalog)} distinct motifs available")
    motifs = catalog[:n_tasks]
    molecules: list[MoleculeRecord] = []
    label_rows: list[list[int]] = []
    for t, motif in enumerate(motifs):
        # negative chains reorder the same three types; prefer sibling motifs
        # that are themselves tasks so each pattern is both class labels
        # somewhere in the dataset
        siblings = [m for m in motifs if set(m) == set(motif) and m != motif]
        if not siblings:
            a, b, c = motif
            siblings = [(b, a, c), (a, c, b)]
        need_pos = (per_task + 1) // 2
        need_neg = per_task - need_pos
        got_pos = got_neg = 0
        serial = 0
        while got_pos < need_pos or got_neg < need_neg:
            want_positive = got_pos < need_pos
            chain = motif if want_positive else siblings[int(rng.integers(0, len(siblings)))]
            types, adjacency = _build_molecule(chain, rng)
            smiles = _to_smiles(types, adjacency)
            graph = parse(smiles)
            label = 1 if contains_path_triple(graph, motif) else 0
            if label == 1 and got_pos < need_pos:
                got_pos += 1
            elif label == 0 and got_neg < need_neg:
                got_neg += 1
            else:
                continue
            row = [MISSING] * n_tasks
            row[t] = label
            molecules.append(MoleculeRecord(mol_id=f"t{t}_m{serial}", graph=graph, smiles=smiles))
            label_rows.append(row)
            serial += 1
    return MultiTaskDataset(molecules=molecules,
                            labels=np.array(label_rows, dtype=np.int8),
                            task_names=[f"task_{t}" for t in range(n_tasks)])


def write_dataset_csv(dataset: MultiTaskDataset, path) -> None:
    """Write a dataset in the standard ingestion CSV format."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["smiles"] + dataset.task_names)
        for record, row in zip(dataset.molecules, dataset.labels):
            writer.writerow([record.smiles] + ["" if v == MISSING else str(int(v)) for v in row])


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = "MOLCKPT"
FORMAT_VERSION = 1
_DTYPES = {"f8": "<f8", "f4": "<f4"}


def save_checkpoint(params: ParameterSet, config: dict, path, dtype: str = "f8") -> None:
    """Write the manifest + raw little-endian payload container.

    The default 64-bit mode round-trips bitwise; "f4" is a lossy storage
    mode for smaller files.
    """
    if dtype not in _DTYPES:
        raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")
    manifest = io.StringIO()
    payload = io.BytesIO()
    offset = 0
    entries = []
    for name, tensor in params.items():
        raw = np.ascontiguousarray(tensor.value, dtype=_DTYPES[dtype]).tobytes()
        dims = ",".join(str(s) for s in tensor.shape) if tensor.shape else ""
        entries.append(f"{name}\t{dtype}\t{dims}\t{offset}\t{len(raw)}")
        payload.write(raw)
        offset += len(raw)
    manifest.write(f"{_MAGIC} {FORMAT_VERSION}\n")
    manifest.write("config " + json.dumps(config, sort_keys=True) + "\n")
    manifest.write(f"tensors {len(entries)}\n")
    for line in entries:
        manifest.write(line + "\n")
    manifest.write(f"payload {offset}\n")
    with open(path, "wb") as fh:
        fh.write(manifest.getvalue().encode("utf-8"))
        fh.write(payload.getvalue())


def load_checkpoint(path, expected_shapes: dict[str, tuple[int, ...]] | None = None
                    ) -> tuple[ParameterSet, dict, int]:
    """Read a checkpoint; returns (parameters, config, format version).

    With ``expected_shapes``, missing names and shape disagreements raise
    ShapeMismatch naming the offending tensor.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    stream = io.BytesIO(blob)

    def read_line() -> str:
        line = stream.readline()
        if not line.endswith(b"\n"):
            raise CorruptFile(f"{path}: truncated header")
        return line[:-1].decode("utf-8")

    first = read_line().split(" ")
    if len(first) != 2 or first[0] != _MAGIC:
        raise CorruptFile(f"{path}: not a checkpoint container")
    try:
        version = int(first[1])
    except ValueError:
        raise CorruptFile(f"{path}: malformed version field") from None
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format version {version}, expected {FORMAT_VERSION}")

    config_line = read_line()
    if not config_line.startswith("config "):
        raise CorruptFile(f"{path}: missing config record")
    try:
        config = json.loads(config_line[len("config "):])
    except json.JSONDecodeError:
        raise CorruptFile(f"{path}: malformed config JSON") from None

    tensors_line = read_line().split(" ")
    if len(tensors_line) != 2 or tensors_line[0] != "tensors":
        raise CorruptFile(f"{path}: missing tensor count")
    n_tensors = int(tensors_line[1])
    entries = []
    for _ in range(n_tensors):
        fields = read_line().split("\t")
        if len(fields) != 5:
            raise CorruptFile(f"{path}: malformed tensor record")
        name, dtype, dims, offset, nbytes = fields
        if dtype not in _DTYPES:
            raise CorruptFile(f"{path}: unknown dtype {dtype!r}")
        shape = tuple(int(s) for s in dims.split(",")) if dims else ()
        entries.append((name, dtype, shape, int(offset), int(nbytes)))

    payload_line = read_line().split(" ")
    if len(payload_line) != 2 or payload_line[0] != "payload":
        raise CorruptFile(f"{path}: missing payload marker")
    payload = blob[stream.tell():]
    if len(payload) != int(payload_line[1]):
        raise CorruptFile(f"{path}: payload length {len(payload)}, "
                          f"manifest says {payload_line[1]}")

    arrays: dict[str, np.ndarray] = {}
    for name, dtype, shape, offset, nbytes in entries:
        count = int(np.prod(shape)) if shape else 1
        if count * np.dtype(_DTYPES[dtype]).itemsize != nbytes:
            raise CorruptFile(f"{path}: tensor {name!r} byte length inconsistent")
        if offset + nbytes > len(payload):
            raise CorruptFile(f"{path}: tensor {name!r} overruns payload")
        flat = np.frombuffer(payload, dtype=_DTYPES[dtype], count=count, offset=offset)
        arrays[name] = flat.astype(np.float64).reshape(shape)

    if expected_shapes is not None:
        for name, shape in expected_shapes.items():
            if name not in arrays:
                raise ShapeMismatch(name, f"{path}: checkpoint is missing tensor {name!r}")
            if arrays[name].shape != tuple(shape):
                raise ShapeMismatch(name, f"{path}: tensor {name!r} has shape "
                                          f"{arrays[name].shape}, expected {tuple(shape)}")
        extra = set(arrays) - set(expected_shapes)
        if extra:
            name = sorted(extra)[0]
            raise ShapeMismatch(name, f"{path}: unexpected tensor {name!r} in checkpoint")

    params = ParameterSet({name: Tensor(arrays[name].copy(), requires_grad=True)
                           for name in arrays})
    return params, config, version
