"""Seeded synthetic worlds for checking retrieval-based ensembling end to end.

Each task is a linear regression ``y = (W0 + delta) x + noise``. A task's
latent code ``u`` drives both its representation (``R u`` plus optional
feature noise, mean-pooled over a handful of items) and its true delta
(``M u``, optionally with a small ``tanh`` term). Fine-tuning is replaced by
closed-form least squares, so any gap between methods comes from the weights
alone.

Target tasks are built from mixtures of the reference latents, optionally
pushed off the references' affine hull by a fixed unit direction. Without
explicit targets every reference takes a turn as the target while the others
act as references.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .adapters import AdapterDelta, BaseParameters, apply
from .errors import ConfigError
from .registry import Registry
from .representation import FeatureSet, mean_pool
from .stats import spearman
from .weighting import METHODS, SolverConfig, run_pipeline, solve_affine_lsq

log = logging.getLogger(__name__)

PARAM = "weight"
HOLDOUT_FRACTION = 0.2


@dataclass(frozen=True)
class TargetSpec:
    mixture: tuple[float, ...]
    offset: float = 0.0
    sigma: float | None = None
    id: str | None = None


@dataclass(frozen=True)
class GeneratorConfig:
    latent_dim: int = 6
    representation_dim: int = 128
    in_dim: int = 16
    out_dim: int = 8
    num_references: int = 6
    sigma: float = 0.05
    num_samples: int = 400
    map_spec: str = "linear"
    nonlinearity: float = 0.1
    representation_noise: float = 0.0
    feature_items: int = 8
    targets: tuple[TargetSpec, ...] = ()
    seed: int = 0

    def __post_init__(self):
        for name in ("latent_dim", "representation_dim", "in_dim", "out_dim",
                     "num_samples", "feature_items"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.num_references < 2:
            raise ConfigError(f"num_references must be at least 2, got {self.num_references}")
        if self.map_spec not in ("linear", "mildly-nonlinear"):
            raise ConfigError(f"map_spec must be 'linear' or 'mildly-nonlinear', got {self.map_spec!r}")
        if self.sigma < 0 or self.representation_noise < 0:
            raise ConfigError("noise levels must be non-negative")
        if self.num_samples - _split(self.num_samples) < 1 or _split(self.num_samples) < 1:
            raise ConfigError(f"num_samples={self.num_samples} leaves an empty train or held-out split")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must fit in u64, got {self.seed}")
        targets = tuple(t if isinstance(t, TargetSpec) else TargetSpec(**t) for t in self.targets)
        for t in targets:
            if len(t.mixture) != self.num_references:
                raise ConfigError(
                    f"target mixture has {len(t.mixture)} coefficients, expected {self.num_references}"
                )
            if abs(sum(t.mixture) - 1.0) > 1e-9:
                raise ConfigError(f"target mixture must sum to 1, got {sum(t.mixture)}")
        object.__setattr__(self, "targets", targets)

    @classmethod
    def from_dict(cls, raw: dict) -> "GeneratorConfig":
        raw = dict(raw)
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown generator fields: {sorted(unknown)}")
        targets = []
        for t in raw.pop("targets", ()):
            t = dict(t)
            t["mixture"] = tuple(float(a) for a in t["mixture"])
            targets.append(TargetSpec(**t))
        try:
            return cls(targets=tuple(targets), **raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass(frozen=True)
class SyntheticTask:
    task_id: str
    latent: np.ndarray
    features: FeatureSet
    representation: np.ndarray
    true_delta: AdapterDelta
    inputs: np.ndarray
    outputs: np.ndarray
    sigma: float
    seed: int

    @property
    def split(self) -> int:
        return _split(self.inputs.shape[0])

    def train(self) -> tuple[np.ndarray, np.ndarray]:
        return self.inputs[: self.split], self.outputs[: self.split]

    def heldout(self) -> tuple[np.ndarray, np.ndarray]:
        return self.inputs[self.split :], self.outputs[self.split :]


@dataclass(frozen=True)
class World:
    base: BaseParameters
    references: list[SyntheticTask]
    targets: list[SyntheticTask]

    @property
    def tasks(self) -> list[SyntheticTask]:
        return self.references + self.targets


def _split(n: int) -> int:
    return int(round(n * (1.0 - HOLDOUT_FRACTION)))


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def _task_seed(seq: np.random.SeedSequence) -> int:
    return int(seq.generate_state(1, dtype=np.uint64)[0])


def make_task(
    task_id: str,
    latent: np.ndarray,
    maps: dict,
    base: BaseParameters,
    config: GeneratorConfig,
    sigma: float,
    seed: int,
) -> SyntheticTask:
    """Build one task from its latent code; the same ``seed`` gives the same data."""
    rng = np.random.default_rng(seed)
    delta = maps["M"] @ latent
    if config.map_spec == "mildly-nonlinear":
        # tanh argument is O(1); the term's norm is about `nonlinearity` times the linear part's
        scale = config.nonlinearity * np.sqrt(config.latent_dim / delta.shape[0])
        delta = delta + scale * np.tanh(maps["M2"] @ latent)
    delta = delta.reshape(config.out_dim, config.in_dim)

    center = maps["R"] @ latent
    items = center + config.representation_noise * rng.standard_normal(
        (config.feature_items, config.representation_dim)
    )
    features = FeatureSet(items, source_id=task_id)

    X = rng.standard_normal((config.num_samples, config.in_dim))
    W = base[PARAM] + delta
    Y = X @ W.T + sigma * rng.standard_normal((config.num_samples, config.out_dim))
    return SyntheticTask(
        task_id=task_id,
        latent=_readonly(np.array(latent, dtype=np.float64)),
        features=features,
        representation=mean_pool(features),
        true_delta=AdapterDelta({PARAM: delta}),
        inputs=_readonly(X),
        outputs=_readonly(Y),
        sigma=float(sigma),
        seed=seed,
    )


def _off_hull_direction(latents: np.ndarray, rng: np.random.Generator) -> np.ndarray | None:
    """Unit latent direction orthogonal to the affine hull of ``latents`` (rows)."""
    spans = (latents[1:] - latents[0]).T
    q, _ = np.linalg.qr(spans) if spans.size else (np.zeros((latents.shape[1], 0)), None)
    v = rng.standard_normal(latents.shape[1])
    v -= q @ (q.T @ v)
    norm = np.linalg.norm(v)
    if norm < 1e-10:
        return None
    return v / norm


def generate_world(config: GeneratorConfig) -> World:
    root = np.random.SeedSequence(config.seed)
    shared_seq, ref_seq, trg_seq = root.spawn(3)
    rng = np.random.default_rng(shared_seq)

    n_params = config.out_dim * config.in_dim
    maps = {
        "R": rng.standard_normal((config.representation_dim, config.latent_dim))
        / np.sqrt(config.representation_dim),
        "M": rng.standard_normal((n_params, config.latent_dim)) / np.sqrt(n_params),
        "M2": rng.standard_normal((n_params, config.latent_dim)) / np.sqrt(config.latent_dim),
    }
    base = BaseParameters(
        {PARAM: rng.standard_normal((config.out_dim, config.in_dim)) / np.sqrt(config.in_dim)}
    )
    latents = rng.standard_normal((config.num_references, config.latent_dim))
    direction = _off_hull_direction(latents, rng)

    references = [
        make_task(f"ref-{i:02d}", latents[i], maps, base, config, config.sigma, _task_seed(s))
        for i, s in enumerate(ref_seq.spawn(config.num_references))
    ]

    targets = []
    for j, (spec, s) in enumerate(zip(config.targets, trg_seq.spawn(len(config.targets)))):
        latent = np.asarray(spec.mixture) @ latents
        if spec.offset:
            if direction is None:
                raise ConfigError(
                    "target offset needs latent_dim > num_references - 1 "
                    "so that a direction off the references' hull exists"
                )
            latent = latent + spec.offset * direction
        sigma = config.sigma if spec.sigma is None else spec.sigma
        targets.append(
            make_task(spec.id or f"trg-{j:02d}", latent, maps, base, config, sigma, _task_seed(s))
        )
    ids = [t.task_id for t in references + targets]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"task ids are not unique: {ids}")
    return World(base, references, targets)


def fit_sft(base: BaseParameters, task: SyntheticTask, return_info: bool = False):
    """Least-squares delta on the task's training split (minimum norm if rank deficient)."""
    X, Y = task.train()
    resid = Y - X @ base[PARAM].T
    sol, _, rank, _ = np.linalg.lstsq(X, resid, rcond=None)
    delta = AdapterDelta({PARAM: sol.T})
    info = {"rank": int(rank), "rank_deficient": bool(rank < X.shape[1])}
    if info["rank_deficient"]:
        log.warning("%s: design matrix has rank %d < %d", task.task_id, rank, X.shape[1])
    return (delta, info) if return_info else delta


def evaluate(base: BaseParameters, delta: AdapterDelta, task: SyntheticTask) -> float:
    """Mean over held-out samples of the squared prediction error norm."""
    W = apply(base, delta)[PARAM]
    X, Y = task.heldout()
    err = Y - X @ W.T
    return float(np.mean(np.sum(err * err, axis=1)))


def best_affine_loss(base: BaseParameters, deltas: Sequence[AdapterDelta], task: SyntheticTask) -> float:
    """Lowest held-out loss over all merges ``sum w_i delta_i`` with ``sum(w) == 1``."""
    X, Y = task.heldout()
    target = (Y - X @ base[PARAM].T).ravel()
    cols = np.stack([(X @ d[PARAM].T).ravel() for d in deltas], axis=1)
    w, _ = solve_affine_lsq(cols, target)
    r = target - cols @ w
    return float(r @ r / X.shape[0])


# -- experiments ---------------------------------------------------------


@dataclass
class ExperimentReport:
    rows: list[dict] = field(default_factory=list)
    targets: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "rows": self.rows,
            "targets": self.targets,
            "summary": self.summary,
        }

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), indent=2, allow_nan=True) + "\n"

    def to_table(self) -> str:
        header = ("task", "method", "loss", "weights")
        lines = [
            (r["task_id"], r["method"], f"{r['loss']:.6e}",
             " ".join(f"{w:+.4f}" for w in r["weights"]))
            for r in self.rows
        ]
        widths = [max(len(h), *(len(l[i]) for l in lines)) if lines else len(h)
                  for i, h in enumerate(header)]
        out = ["  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip()]
        out.append("  ".join("-" * w for w in widths))
        out += ["  ".join(c.ljust(w) for c, w in zip(l, widths)).rstrip() for l in lines]
        out.append("")
        s = self.summary
        out.append(f"spearman rho (mean over targets): {s.get('spearman_rho', float('nan')):.4f}")
        for m, stats in s.get("methods", {}).items():
            out.append(
                f"{m:<12} mean {stats['mean']:.6e}  var {stats['variance']:.6e}  "
                f"win rate {stats['win_rate']:.3f}"
            )
        return "\n".join(out) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["task_id", "method", "loss", "ids", "weights"])
        for r in self.rows:
            writer.writerow([
                r["task_id"], r["method"], repr(r["loss"]),
                ";".join(r["ids"]), ";".join(repr(w) for w in r["weights"]),
            ])
        return buf.getvalue()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


def run_experiment(
    config: GeneratorConfig,
    methods: Sequence[str] = ("average", "similarity", "linear", "linear_l1", "top1"),
    solver: SolverConfig = SolverConfig(),
    include_self: bool = False,
    k: int | None = None,
    workers: int = 1,
) -> ExperimentReport:
    """Fit every task, build the registry, then ensemble for each target and method.

    With ``include_self`` the target's own fitted delta stays retrievable,
    mirroring the self-inclusion ablation. Per target the report also holds
    the Spearman correlation between reference distances and the held-out
    losses of each reference's delta used alone.
    """
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}; expected one of {METHODS}")
    world = generate_world(config)
    base = world.base
    sft = {t.task_id: fit_sft(base, t) for t in world.tasks}

    registry = Registry()
    for t in world.references:
        registry.add_entry(t.task_id, t.representation, sft[t.task_id], {"role": "reference"})
    loo = not world.targets
    targets = world.references if loo else world.targets
    if include_self and not loo:
        for t in world.targets:
            registry.add_entry(t.task_id, t.representation, sft[t.task_id], {"role": "target"})
    target_ids = {t.task_id for t in world.targets}

    def one_target(task: SyntheticTask):
        exclude = set(target_ids)
        if include_self:
            exclude.discard(task.task_id)
        else:
            exclude.add(task.task_id)
        rows = []
        for method in methods:
            weights, delta = run_pipeline(registry, task.features, method, solver, sorted(exclude), k)
            rows.append({
                "task_id": task.task_id,
                "method": method,
                "loss": evaluate(base, delta, task),
                "ids": list(weights.ids),
                "weights": [float(w) for w in weights.weights],
            })

        hits = registry.retrieve(task.representation, exclude=sorted(exclude | {task.task_id}))
        transfer = [evaluate(base, registry.adapter(i), task) for i in hits.ids]
        rho = spearman(hits.squared_distances, transfer)
        info = {
            "task_id": task.task_id,
            "sft_loss": evaluate(base, sft[task.task_id], task),
            "base_loss": evaluate(base, AdapterDelta({PARAM: np.zeros_like(base[PARAM])}), task),
            "spearman_rho": rho,
            "reference_ids": list(hits.ids),
            "squared_distances": [float(d) for d in hits.squared_distances],
            "transfer_losses": transfer,
        }
        return rows, info

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one_target, targets))
    else:
        results = [one_target(t) for t in targets]

    report = ExperimentReport(
        config={
            "generator": asdict(config),
            "methods": list(methods),
            "solver": asdict(solver),
            "include_self": include_self,
            "k": k,
        }
    )
    for rows, info in results:
        report.rows.extend(rows)
        report.targets.append(info)
    report.summary = summarize(report.rows, report.targets, methods)
    return report


def summarize(rows: list[dict], targets: list[dict], methods: Sequence[str]) -> dict:
    losses = {m: [] for m in methods}
    by_task: dict[str, dict[str, float]] = {}
    for r in rows:
        losses[r["method"]].append(r["loss"])
        by_task.setdefault(r["task_id"], {})[r["method"]] = r["loss"]
    wins = {m: 0 for m in methods}
    for per_method in by_task.values():
        best = min(per_method.values())
        for m, loss in per_method.items():
            if loss <= best:
                wins[m] += 1
    rhos = [t["spearman_rho"] for t in targets if np.isfinite(t["spearman_rho"])]
    n_tasks = max(len(by_task), 1)
    return {
        "spearman_rho": float(np.mean(rhos)) if rhos else float("nan"),
        "sft_mean_loss": float(np.mean([t["sft_loss"] for t in targets])) if targets else float("nan"),
        "methods": {
            m: {
                "mean": float(np.mean(v)),
                "variance": float(np.var(v)),
                "win_rate": wins[m] / n_tasks,
            }
            for m, v in losses.items()
        },
    }
