"""Command-line entry point: parsing, training, evaluation, diagnostics,
and data utilities.

Configuration is a plain INI file (sections per subsystem) overridden by
command-line flags; every key is validated against the schema below, which
also generates the --help text. The fully resolved configuration is echoed
into the output directory for reproducibility.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 check failure.
"""

from __future__ import annotations

import argparse
import configparser
import json
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import GradMode, ParameterSet, Tensor
from .data import (CorruptFile, Episode, MultiTaskDataset, ShapeMismatch,
                   UnknownTaskName, VersionMismatch, build_episode, generate_synthetic,
                   load_checkpoint, load_dataset, save_checkpoint, split_tasks,
                   write_dataset_csv)
from .encoder import Aggregator, EncoderConfig, init_params
from .losses import LossWeights
from .meta import (AblationFlags, InsufficientData, MetaConfig, SslConfig, meta_test,
                   meta_train)
from .metrics import DegenerateLabels, export_embeddings, roc_auc
from .smiles import BondDirection, BondType, Chirality, SmilesError, parse as parse_smiles

# section -> key -> (type, default, help). This is the single source of truth:
# config validation, defaults, and --help are all generated from it.
SCHEMA: dict[str, dict[str, tuple[type, object, str]]] = {
    "encoder": {
        "num_layers": (int, 5, "message-passing layers"),
        "hidden_dim": (int, 32, "embedding width (desk default 32, paper profile 300)"),
        "leaky_slope": (float, 0.01, "LeakyReLU negative slope"),
        "aggregator": (str, "paper_concat", "paper_concat (mean of neighbor+edge) or gin_sum"),
    },
    "meta": {
        "alpha": (float, 0.1, "inner-loop step size"),
        "beta": (float, 0.001, "outer (meta) step size"),
        "inner_steps_train": (int, 5, "adaptation steps during meta-training"),
        "inner_steps_test": (int, 10, "adaptation steps during meta-testing"),
        "k_shot": (int, 1, "support examples per class"),
        "query_size_per_class": (int, 16, "query examples per class during training"),
        "tasks_per_batch": (int, 0, "tasks sampled per iteration (0 = all training tasks)"),
        "meta_grad_mode": (str, "first_order", "first_order or second_order"),
        "episode_budget": (int, 2000, "total episodes to consume during training"),
        "use_meta": (bool, True, "episodic meta-learning (off: pooled gradient descent)"),
        "use_bond_loss": (bool, True, "bond reconstruction auxiliary loss"),
        "use_atom_loss": (bool, True, "atom type prediction auxiliary loss"),
        "use_task_attention": (bool, True, "self-attentive task weighting"),
    },
    "loss": {
        "w_label": (float, 1.0, "weight of the property prediction loss"),
        "w_edge": (float, 0.1, "weight of the bond reconstruction loss"),
        "w_node": (float, 0.1, "weight of the atom type prediction loss"),
    },
    "ssl": {
        "n_pos": (int, 5, "positive bond pairs sampled per graph"),
        "n_neg": (int, 5, "negative bond pairs sampled per graph"),
        "context_fraction": (float, 0.15, "fraction of atoms used as prediction centers"),
        "hops": (int, 1, "context neighborhood radius"),
    },
    "run": {
        "seed": (int, 0, "master seed for all derived random streams"),
        "threads": (int, 1, "worker bound for per-task adaptation"),
    },
}

PROFILES = {
    "desk": {},
    "paper": {("encoder", "hidden_dim"): 300, ("encoder", "num_layers"): 5},
}


class UsageError(ValueError):
    pass


class CheckFailure(RuntimeError):
    pass


DATA_ERRORS = (SmilesError, UnknownTaskName, InsufficientData, VersionMismatch,
               ShapeMismatch, CorruptFile, DegenerateLabels, OSError)


def default_config() -> dict[str, dict[str, object]]:
    return {section: {key: spec[1] for key, spec in keys.items()}
            for section, keys in SCHEMA.items()}


def _coerce(section: str, key: str, raw: str) -> object:
    if section not in SCHEMA or key not in SCHEMA[section]:
        raise UsageError(f"unknown config key [{section}] {key}")
    kind = SCHEMA[section][key][0]
    if kind is bool:
        lowered = raw.strip().lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise UsageError(f"[{section}] {key}: expected a boolean, got {raw!r}")
    try:
        return kind(raw)
    except ValueError:
        raise UsageError(f"[{section}] {key}: expected {kind.__name__}, got {raw!r}") from None


def load_config_file(path: str, config: dict) -> None:
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise UsageError(f"config file {path!r} not found or unreadable")
    for section in parser.sections():
        if section not in SCHEMA:
            raise UsageError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            config[section][key] = _coerce(section, key, raw)


def apply_overrides(config: dict, overrides: list[str]) -> None:
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        target, raw = item.split("=", 1)
        section, key = target.split(".", 1)
        config[section if section in SCHEMA else "?"]  # noqa: B018 — raises below if bad
        if section not in SCHEMA:
            raise UsageError(f"unknown config section [{section}]")
        config[section][key] = _coerce(section, key, raw)


def resolve_config(args) -> dict[str, dict[str, object]]:
    config = default_config()
    profile = getattr(args, "profile", "desk")
    for (section, key), value in PROFILES[profile].items():
        config[section][key] = value
    if getattr(args, "config", None):
        load_config_file(args.config, config)
    apply_overrides(config, getattr(args, "set", None) or [])
    if getattr(args, "seed", None) is not None:
        config["run"]["seed"] = args.seed
    if getattr(args, "threads", None) is not None:
        config["run"]["threads"] = args.threads
    if getattr(args, "k_shot", None) is not None:
        config["meta"]["k_shot"] = args.k_shot
    if getattr(args, "no_bond_loss", False):
        config["meta"]["use_bond_loss"] = False
    if getattr(args, "no_atom_loss", False):
        config["meta"]["use_atom_loss"] = False
    if getattr(args, "no_attention", False):
        config["meta"]["use_task_attention"] = False
    if getattr(args, "no_meta", False):
        config["meta"]["use_meta"] = False
    if getattr(args, "loss_weights", None) == "eq9":
        config["loss"]["w_label"] = 0.1
        config["loss"]["w_edge"] = 0.1
        config["loss"]["w_node"] = 1.0
    return config


def build_objects(config: dict) -> tuple[EncoderConfig, MetaConfig, LossWeights]:
    enc = config["encoder"]
    try:
        aggregator = Aggregator(enc["aggregator"])
    except ValueError:
        raise UsageError(f"unknown aggregator {enc['aggregator']!r}") from None
    enc_cfg = EncoderConfig(num_layers=enc["num_layers"], hidden_dim=enc["hidden_dim"],
                            leaky_slope=enc["leaky_slope"], aggregator=aggregator)
    m = config["meta"]
    try:
        mode = GradMode(m["meta_grad_mode"])
    except ValueError:
        raise UsageError(f"unknown meta_grad_mode {m['meta_grad_mode']!r}") from None
    s = config["ssl"]
    meta_cfg = MetaConfig(
        alpha=m["alpha"], beta=m["beta"],
        inner_steps_train=m["inner_steps_train"], inner_steps_test=m["inner_steps_test"],
        k_shot=m["k_shot"], query_size_per_class=m["query_size_per_class"],
        tasks_per_batch=m["tasks_per_batch"] or None,
        meta_grad_mode=mode, episode_budget=m["episode_budget"],
        threads=config["run"]["threads"],
        ablation=AblationFlags(use_meta=m["use_meta"], use_bond_loss=m["use_bond_loss"],
                               use_atom_loss=m["use_atom_loss"],
                               use_task_attention=m["use_task_attention"]),
        ssl=SslConfig(n_pos=s["n_pos"], n_neg=s["n_neg"],
                      context_fraction=s["context_fraction"], hops=s["hops"]))
    w = config["loss"]
    weights = LossWeights(w_label=w["w_label"], w_edge=w["w_edge"], w_node=w["w_node"])
    return enc_cfg, meta_cfg, weights


def write_resolved_config(config: dict, path: Path) -> None:
    parser = configparser.ConfigParser()
    for section in sorted(config):
        parser[section] = {key: str(value) for key, value in sorted(config[section].items())}
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)


def flat_config(config: dict) -> dict[str, object]:
    """Flatten for the checkpoint snapshot; execution details (worker count)
    are not part of the model configuration and would break bitwise identity
    across --threads settings."""
    return {f"{section}.{key}": value
            for section in sorted(config) for key, value in sorted(config[section].items())
            if (section, key) != ("run", "threads")}


def _derived_rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), stream]))


RNG_DATA, RNG_INIT, RNG_TRAIN, RNG_EVAL = 101, 202, 303, 404


def _load_any_dataset(args, config) -> MultiTaskDataset:
    if getattr(args, "synthetic", False):
        data_seed = args.data_seed if args.data_seed is not None else config["run"]["seed"]
        return generate_synthetic(args.synthetic_tasks, args.synthetic_size,
                                  _derived_rng(data_seed, RNG_DATA))
    if not getattr(args, "data", None):
        raise UsageError("either --data or --synthetic is required")
    dataset, report = load_dataset(args.data, smiles_column=args.smiles_column)
    print(f"loaded {report.retained} molecules from {args.data} "
          f"({len(report.parse_failures)} parse failures, "
          f"{report.all_missing_rows} all-missing rows, "
          f"{len(dataset.task_names)} task columns)")
    for line_no, smiles, error in report.parse_failures[:10]:
        print(f"  line {line_no}: {smiles!r}: {error}")
    return dataset


def _test_task_names(args, dataset: MultiTaskDataset) -> list[str]:
    if getattr(args, "test_tasks", None):
        return [name.strip() for name in args.test_tasks.split(",") if name.strip()]
    if getattr(args, "synthetic", False):
        return dataset.task_names[-2:]
    raise UsageError("--test-tasks is required for CSV datasets")


# ---------------------------------------------------------------------------
# subcommands


def cmd_parse(args) -> int:
    inputs: list[str]
    if args.file:
        with open(args.file, encoding="utf-8") as fh:
            inputs = [line.strip() for line in fh if line.strip()]
    else:
        inputs = [args.smiles]
    failures = 0
    for smiles in inputs:
        try:
            graph = parse_smiles(smiles)
        except SmilesError as exc:
            print(f"{smiles}: {type(exc).__name__}: {exc}")
            failures += 1
            continue
        summary = f"atoms: {graph.num_atoms}, bonds: {graph.num_bonds}"
        if args.file:
            print(f"{smiles}: {summary}")
        else:
            print(summary)
            atom_counts: dict[int, int] = {}
            chir_counts: dict[str, int] = {}
            for atom in graph.atoms:
                atom_counts[atom.atomic_number] = atom_counts.get(atom.atomic_number, 0) + 1
                chir_counts[atom.chirality.name] = chir_counts.get(atom.chirality.name, 0) + 1
            bt_counts = {bt.name: 0 for bt in BondType}
            bd_counts = {bd.name: 0 for bd in BondDirection}
            for bond in graph.bonds:
                bt_counts[bond.bond_type.name] += 1
                bd_counts[bond.direction.name] += 1
            print("atomic numbers: " + " ".join(
                f"{z}:{c}" for z, c in sorted(atom_counts.items())))
            print("chirality: " + " ".join(
                f"{name}:{c}" for name, c in sorted(chir_counts.items())))
            print("bond types: " + " ".join(
                f"{name}:{c}" for name, c in bt_counts.items() if c))
            print("bond directions: " + " ".join(
                f"{name}:{c}" for name, c in bd_counts.items() if c))
    return 2 if failures else 0


def cmd_train(args) -> int:
    config = resolve_config(args)
    enc_cfg, meta_cfg, weights = build_objects(config)
    seed = config["run"]["seed"]
    dataset = _load_any_dataset(args, config)
    test_names = _test_task_names(args, dataset)
    split = split_tasks(dataset, test_names)

    if args.init:
        params, _, _ = load_checkpoint(
            args.init,
            expected_shapes={name: t.shape for name, t in
                             init_params(enc_cfg, _derived_rng(seed, RNG_INIT)).items()})
        config["meta"]["use_pretrained"] = True
    else:
        params = init_params(enc_cfg, _derived_rng(seed, RNG_INIT))

    result = meta_train(params, dataset, split.train_task_ids, meta_cfg, enc_cfg,
                        weights, _derived_rng(seed, RNG_TRAIN))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.params, flat_config(config), out / "checkpoint.ckpt")
    write_resolved_config(config, out / "config.resolved.ini")
    (out / "train_log.tsv").write_text("\n".join(result.log_lines) + "\n", encoding="utf-8")
    print(f"trained on {len(split.train_task_ids)} tasks "
          f"({result.episodes_consumed} episodes); "
          f"checkpoint, resolved config, and log written to {out}")
    return 0


def cmd_eval(args) -> int:
    params, stored_config, _ = load_checkpoint(args.checkpoint)
    config = default_config()
    for flat_key, value in stored_config.items():
        if "." not in flat_key:
            continue
        section, key = flat_key.split(".", 1)
        if section in SCHEMA and key in SCHEMA[section]:
            config[section][key] = _coerce(section, key, str(value))
    apply_overrides(config, args.set or [])
    if args.seed is not None:
        config["run"]["seed"] = args.seed
    if args.k_shot is not None:
        config["meta"]["k_shot"] = args.k_shot
    enc_cfg, meta_cfg, weights = build_objects(config)
    seed = config["run"]["seed"]

    dataset = _load_any_dataset(args, config)
    test_names = _test_task_names(args, dataset)
    rng = _derived_rng(seed, RNG_EVAL)

    rows = []
    for name in test_names:
        task = dataset.task_index(name)
        aucs = []
        for _ in range(args.resamples):
            episode = build_episode(dataset, task, meta_cfg.k_shot, None, rng)
            scores = meta_test(params, [episode], meta_cfg, enc_cfg, weights, rng)[0]
            aucs.append(roc_auc(scores.probabilities, scores.labels))
        rows.append((name, float(np.mean(aucs)), len(aucs)))
    average = float(np.mean([auc for _, auc, _ in rows]))

    width = max(len(name) for name, _, _ in rows + [("Average", 0.0, 0)])
    print(f"{'task':<{width}}  mean_auc  resamples")
    for name, auc, n in rows:
        print(f"{name:<{width}}  {auc:8.4f}  {n:9d}")
    print(f"{'Average':<{width}}  {average:8.4f}")

    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        lines = ["task,mean_auc,resamples"]
        lines += [f"{name},{auc:.10g},{n}" for name, auc, n in rows]
        lines += [f"Average,{average:.10g},{sum(n for _, _, n in rows)}"]
        (out / "eval.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        print(f"wrote {out / 'eval.csv'}")
    return 0


def cmd_gradcheck(args) -> int:
    from .checks import run_gradient_checks

    quick = args.scale == "quick"
    results = run_gradient_checks(quick=quick)
    failed = 0
    for name, error, threshold in results:
        status = "PASS" if error < threshold else "FAIL"
        if status == "FAIL":
            failed += 1
        print(f"{name:<44s} max_rel={error:.3e}  threshold={threshold:.0e}  {status}")
    print(f"{len(results)} checks, {failed} failures")
    return 3 if failed else 0


def cmd_embed(args) -> int:
    params, stored_config, _ = load_checkpoint(args.checkpoint)
    config = default_config()
    for flat_key, value in stored_config.items():
        if "." in flat_key:
            section, key = flat_key.split(".", 1)
            if section in SCHEMA and key in SCHEMA[section]:
                config[section][key] = _coerce(section, key, str(value))
    enc_cfg, _, _ = build_objects(config)
    dataset = _load_any_dataset(args, config)
    task = dataset.task_index(args.task)
    molecules = [(dataset.molecules[i].mol_id, dataset.molecules[i].graph,
                  int(dataset.labels[i, task]))
                 for i in np.flatnonzero(dataset.labels[:, task] != -1)]
    count = export_embeddings(molecules, params, enc_cfg, args.output)
    print(f"wrote {count} embeddings to {args.output}")
    return 0


def cmd_synth(args) -> int:
    dataset = generate_synthetic(args.tasks, args.size, _derived_rng(args.seed, RNG_DATA))
    write_dataset_csv(dataset, args.output)
    positive_rates = []
    for t in range(dataset.num_tasks):
        pos, neg = dataset.task_pools(t)
        positive_rates.append(len(pos) / (len(pos) + len(neg)))
    print(f"wrote {len(dataset.molecules)} molecules x {dataset.num_tasks} tasks "
          f"to {args.output} (positive rates "
          f"{min(positive_rates):.2f}..{max(positive_rates):.2f})")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _schema_epilog() -> str:
    lines = ["configuration keys (config file sections / --set section.key=value):"]
    for section, keys in SCHEMA.items():
        for key, (kind, default, help_text) in keys.items():
            lines.append(f"  {section}.{key} ({kind.__name__}, default {default}): {help_text}")
    return "\n".join(lines)


def _add_common(sub, *, config=True):
    if config:
        sub.add_argument("--config", help="INI config file")
        sub.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                         help="override one config key (repeatable)")
        sub.add_argument("--profile", choices=sorted(PROFILES), default="desk",
                         help="named defaults profile")
    sub.add_argument("--seed", type=int, default=None, help="master seed")


def _add_dataset_args(sub):
    sub.add_argument("--data", help="dataset CSV path")
    sub.add_argument("--smiles-column", default="smiles", help="name of the SMILES column")
    sub.add_argument("--synthetic", action="store_true",
                     help="generate the planted-motif synthetic dataset instead")
    sub.add_argument("--synthetic-tasks", type=int, default=10)
    sub.add_argument("--synthetic-size", type=int, default=300,
                     help="molecules per synthetic task")
    sub.add_argument("--data-seed", type=int, default=None,
                     help="seed for synthetic data generation (default: master seed)")
    sub.add_argument("--test-tasks", help="comma-separated test task names "
                                          "(synthetic default: last two tasks)")


def make_parser() -> _Parser:
    parser = _Parser(prog="metamol",
                     description=__doc__,
                     epilog=_schema_epilog(),
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("parse", help="parse SMILES and print a graph summary")
    p.add_argument("smiles", nargs="?", help="one SMILES string")
    p.add_argument("--file", help="file with one SMILES per line")
    p.set_defaults(func=cmd_parse)

    p = subs.add_parser("train", help="meta-train and write a checkpoint",
                        epilog=_schema_epilog(),
                        formatter_class=argparse.RawDescriptionHelpFormatter)
    _add_common(p)
    _add_dataset_args(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--init", help="checkpoint to initialize from (pretrained weights)")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--k-shot", type=int, default=None)
    p.add_argument("--no-bond-loss", action="store_true")
    p.add_argument("--no-atom-loss", action="store_true")
    p.add_argument("--no-attention", action="store_true")
    p.add_argument("--no-meta", action="store_true")
    p.add_argument("--loss-weights", choices=["default", "eq9"], default="default")
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("eval", help="few-shot evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    _add_dataset_args(p)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.add_argument("--k-shot", type=int, default=None)
    p.add_argument("--resamples", type=int, default=20,
                   help="support resamples per test task")
    p.add_argument("--out", help="directory for the machine-readable CSV")
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--scale", choices=["quick", "full"], default="full")
    p.set_defaults(func=cmd_gradcheck)

    p = subs.add_parser("embed", help="export molecule embeddings as CSV")
    p.add_argument("--checkpoint", required=True)
    _add_dataset_args(p)
    p.add_argument("--task", required=True, help="task whose molecules to embed")
    p.add_argument("--output", required=True, help="destination CSV path")
    p.set_defaults(func=cmd_embed)

    p = subs.add_parser("synth", help="write a synthetic planted-motif dataset CSV")
    p.add_argument("--tasks", type=int, default=10)
    p.add_argument("--size", type=int, default=300, help="molecules per task")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DATA_ERRORS as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except CheckFailure as exc:
        print(f"check failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
