"""Command-line entry point.

Exit codes: 0 success, 1 usage or config error, 2 data or schema error,
3 I/O error. Data goes to stdout, diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import formats
from .adapters import LowRankPair, apply
from .errors import ConfigError, FormatError, RPEError, ShapeError
from .harness import GeneratorConfig, run_experiment
from .registry import Registry
from .representation import FeatureSet, mean_pool
from .weighting import METHODS, SolverConfig, run_pipeline

log = logging.getLogger("rpe")

EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_IO = 3

FEATURE_SUFFIXES = (".vec", ".npy", ".txt", ".csv", ".tsv")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _k_value(text: str):
    if text.lower() == "all":
        return None
    try:
        k = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"k must be a positive integer or 'all', got {text!r}")
    if k < 1:
        raise argparse.ArgumentTypeError(f"k must be positive, got {k}")
    return k


def _registry_path(args) -> Path:
    path = getattr(args, "registry", None) or os.environ.get("RPE_REGISTRY")
    if not path:
        raise UsageError("no registry given; pass --registry or set RPE_REGISTRY")
    return Path(path)


def _solver(args) -> SolverConfig:
    return SolverConfig(lambda1=args.lambda1, lambda2=args.lambda2)


def _emit(text: str, out: str | None = None) -> None:
    if out:
        formats.atomic_write(Path(out), text.encode("utf-8"))
    else:
        sys.stdout.write(text)


def _table(header, rows) -> str:
    rows = [tuple(str(c) for c in r) for r in rows]
    widths = [max([len(h)] + [len(r[i]) for r in rows]) for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip()]
    lines += ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
    return "\n".join(lines) + "\n"


# -- db -----------------------------------------------------------------


def cmd_db_init(args) -> int:
    path = _registry_path(args)
    Registry.init(path)
    log.info("initialized registry at %s", path)
    return 0


def _parse_meta(pairs) -> dict:
    meta = {}
    for item in pairs or ():
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise UsageError(f"metadata must look like key=value, got {item!r}")
        meta[key] = value
    return meta


def cmd_db_add(args) -> int:
    reg = Registry.open(_registry_path(args))
    vec = formats.read_vector(args.vec)
    adapter = formats.read_adapter(args.adp)
    reg.add_entry(args.id, vec, adapter, _parse_meta(args.meta))
    print(args.id)
    return 0


def cmd_db_list(args) -> int:
    reg = Registry.open(_registry_path(args))
    rows = [
        (e.id, e.insertion_index, json.dumps(dict(e.metadata), sort_keys=True))
        for e in reg
    ]
    sys.stdout.write(_table(("id", "index", "metadata"), rows))
    return 0


def cmd_db_inspect(args) -> int:
    reg = Registry.open(_registry_path(args))
    entry = reg.entry(args.id)
    adapter = reg.adapter(args.id)
    params = []
    for name, value in adapter.items():
        if isinstance(value, LowRankPair):
            params.append({"name": name, "kind": "low-rank", "shape": list(value.shape),
                           "rank": value.rank})
        else:
            params.append({"name": name, "kind": "dense", "shape": list(value.shape)})
    doc = {
        "id": entry.id,
        "insertion_index": entry.insertion_index,
        "dim": int(entry.representation.shape[0]),
        "metadata": dict(entry.metadata),
        "parameters": params,
    }
    sys.stdout.write(json.dumps(doc, indent=2) + "\n")
    return 0


# -- extract ------------------------------------------------------------


def _read_feature_file(path: Path) -> np.ndarray:
    suffix = path.suffix.lower()
    if suffix == ".vec":
        return formats.read_vector(path)[None, :]
    if suffix == ".npy":
        arr = np.load(path, allow_pickle=False)
    else:
        delimiter = "," if suffix == ".csv" else None
        try:
            arr = np.loadtxt(path, delimiter=delimiter, dtype=np.float64, ndmin=2)
        except ValueError as exc:
            raise FormatError(f"{path}: {exc}") from exc
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise FormatError(f"{path}: expected one vector per row, got shape {arr.shape}")
    return arr


def load_features(inputs) -> FeatureSet:
    files = []
    for raw in inputs:
        p = Path(raw)
        if p.is_dir():
            files += sorted(q for q in p.iterdir()
                            if q.is_file() and q.suffix.lower() in FEATURE_SUFFIXES)
        elif p.exists():
            files.append(p)
        else:
            raise FileNotFoundError(f"no such feature file or directory: {p}")
    if not files:
        raise UsageError("no feature files found")
    blocks = [_read_feature_file(f) for f in files]
    dims = sorted({b.shape[1] for b in blocks})
    if len(dims) > 1:
        raise ShapeError(f"feature vectors have mixed dimensions {dims}")
    return FeatureSet(np.concatenate(blocks, axis=0), source_id=str(inputs[0]))


def cmd_extract(args) -> int:
    features = load_features(args.inputs)
    z = mean_pool(features)
    if args.out:
        formats.write_vector(args.out, z)
        log.info("wrote %d-dim representation of %d items to %s", z.shape[0], len(features), args.out)
    else:
        sys.stdout.buffer.write(formats.encode_vector(z))
    return 0


# -- retrieve / weigh / merge ------------------------------------------


def _target(args):
    return formats.read_vector(args.target)


def cmd_retrieve(args) -> int:
    reg = Registry.open(_registry_path(args))
    hits = reg.retrieve(_target(args), k=args.k, exclude=args.exclude)
    rows = [(i, repr(float(d2)), repr(float(np.sqrt(d2)))) for i, d2 in hits]
    _emit(_table(("id", "squared_distance", "distance"), rows), args.out)
    return 0


def cmd_weigh(args) -> int:
    reg = Registry.open(_registry_path(args))
    config = _solver(args)
    weights, _ = run_pipeline(reg, _target(args), args.method, config, args.exclude, args.k)
    _emit(json.dumps(weights.report(config), indent=2) + "\n", args.out)
    return 0


def cmd_merge(args) -> int:
    if not args.out:
        raise UsageError("merge needs --out")
    reg = Registry.open(_registry_path(args))
    config = _solver(args)
    weights, delta = run_pipeline(reg, _target(args), args.method, config, args.exclude, args.k)
    result = apply(formats.read_base(args.base), delta) if args.base else delta
    formats.write_adapter(args.out, result)
    if args.weights_out:
        formats.atomic_write(
            Path(args.weights_out),
            (json.dumps(weights.report(config), indent=2) + "\n").encode("utf-8"),
        )
    sys.stdout.write(json.dumps(weights.report(config)) + "\n")
    return 0


# -- simulate -----------------------------------------------------------


def bundled_config(name: str) -> str | None:
    ref = resources.files("rpe") / "data" / name
    return ref.read_text(encoding="utf-8") if ref.is_file() else None


def load_simulation_config(source: str, seed: int | None = None) -> dict:
    path = Path(source)
    if path.is_file():
        text = path.read_text(encoding="utf-8")
    else:
        text = bundled_config(path.name if path.suffix else f"{source}.json")
        if text is None:
            raise FileNotFoundError(f"no such config file: {source}")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: invalid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be an object")
    unknown = set(raw) - {"generator", "methods", "solver", "include_self", "k", "workers"}
    if unknown:
        raise ConfigError(f"{source}: unknown fields {sorted(unknown)}")
    gen = dict(raw.get("generator", {}))
    if seed is not None:
        gen["seed"] = seed
    try:
        solver = SolverConfig(**raw.get("solver", {}))
    except TypeError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    methods = raw.get("methods", list(METHODS))
    if not isinstance(methods, list) or not methods:
        raise ConfigError(f"{source}: methods must be a non-empty list")
    return {
        "config": GeneratorConfig.from_dict(gen),
        "methods": methods,
        "solver": solver,
        "include_self": bool(raw.get("include_self", False)),
        "k": raw.get("k"),
        "workers": int(raw.get("workers", 1)),
    }


def cmd_simulate(args) -> int:
    try:
        spec = load_simulation_config(args.config, args.seed)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    report = run_experiment(**spec)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        formats.atomic_write(out / "report.json", report.to_json().encode("utf-8"))
        formats.atomic_write(out / "report.txt", report.to_table().encode("utf-8"))
        formats.atomic_write(out / "report.csv", report.to_csv().encode("utf-8"))
        log.info("wrote reports to %s", out)
    sys.stdout.write(report.to_table())
    return 0


# -- parser -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    # SUPPRESS keeps a subcommand's unset flag from clobbering one given before it
    common.add_argument("--registry", default=argparse.SUPPRESS,
                        help="registry directory (default: $RPE_REGISTRY)")
    common.add_argument("--log-level", default=argparse.SUPPRESS,
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    query = _Parser(add_help=False)
    query.add_argument("--target", required=True, help="target representation (.vec)")
    query.add_argument("--k", type=_k_value, default=None, help="neighbours to use, or 'all'")
    query.add_argument("--exclude", action="append", default=[], metavar="ID",
                       help="entry id to leave out (repeatable)")
    query.add_argument("--out", help="output file")

    solver = _Parser(add_help=False)
    solver.add_argument("--method", choices=METHODS, default="linear")
    solver.add_argument("--lambda1", type=float, default=SolverConfig.lambda1,
                        help="softmax temperature for 'similarity'")
    solver.add_argument("--lambda2", type=float, default=SolverConfig.lambda2,
                        help="l1 strength for 'linear_l1'")

    parser = _Parser(prog="rpe", description="Retrieval-based parameter ensembles",
                     parents=[common])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    db = sub.add_parser("db", help="manage a registry")
    db_sub = db.add_subparsers(dest="db_command", required=True, parser_class=_Parser)
    p = db_sub.add_parser("init", parents=[common], help="create an empty registry")
    p.set_defaults(func=cmd_db_init)
    p = db_sub.add_parser("add", parents=[common], help="add a .vec/.adp pair")
    p.add_argument("--id", required=True)
    p.add_argument("--vec", required=True)
    p.add_argument("--adp", required=True)
    p.add_argument("--meta", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_db_add)
    p = db_sub.add_parser("list", parents=[common], help="list entries")
    p.set_defaults(func=cmd_db_list)
    p = db_sub.add_parser("inspect", parents=[common], help="show one entry")
    p.add_argument("id")
    p.set_defaults(func=cmd_db_inspect)

    p = sub.add_parser("extract", parents=[common], help="mean-pool feature vectors into a .vec")
    p.add_argument("inputs", nargs="+", help="feature files or directories")
    p.add_argument("--out", help="output .vec (default: raw bytes on stdout)")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("retrieve", parents=[common, query], help="nearest registry entries")
    p.set_defaults(func=cmd_retrieve)
    p = sub.add_parser("weigh", parents=[common, query, solver], help="print ensemble weights")
    p.set_defaults(func=cmd_weigh)
    p = sub.add_parser("merge", parents=[common, query, solver], help="write the merged adapter")
    p.add_argument("--base", help="dense base parameters (.adp); output base + delta")
    p.add_argument("--weights-out", help="also write the weight report here")
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("simulate", parents=[common], help="run a synthetic experiment")
    p.add_argument("config", help="JSON config file, or the name of a bundled one (quickstart)")
    p.add_argument("--seed", type=int, default=None, help="override generator.seed")
    p.add_argument("--out", help="directory for report.json/.txt/.csv")
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, getattr(args, "log_level", "WARNING")),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"rpe: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RPEError, ValueError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"rpe: error: {msg}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"rpe: error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
