"""Run orchestration shared by the train and sweep commands, plus manifests.

A run directory holds metrics.csv, alpha.csv, run_manifest.txt, and a
checkpoint/ subdirectory. The manifest pins every resolved setting plus the
dataset fingerprint, so a run can be replayed byte-for-byte (timestamps and
the wall-clock epoch_ms column excluded, by definition of wall clocks).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, fields, replace
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .checkpoint import save_checkpoint
from .errors import ConfigError, IntegrityError, NumericError
from .manifest import read_kv, require_keys, write_kv
from .metrics import ComputeCounter
from .model import ComposedGcn
from .objectives import ObjectiveConfig
from .routing import RoutingConfig, alpha_csv_lines, route
from .synth import dataset_fingerprint, load_dataset, split_dataset
from .training import TrainConfig, metrics_csv_lines, pretrain_backbone, train

SWEEP_AXES = {
    "tau": "temperature",
    "theta": "threshold",
    "lambda": "consistency_weight",
    "rho": "relation_weight",
}

METRICS_FILE = "metrics.csv"
ALPHA_FILE = "alpha.csv"
RUN_MANIFEST_FILE = "run_manifest.txt"
CHECKPOINT_DIR = "checkpoint"
SWEEP_FILE = "sweep.csv"


@dataclass(frozen=True)
class RunSettings:
    """Every knob of one training run, fully resolved (no implicit defaults)."""

    data_dir: str
    epochs: int = 100
    batch_size: int = 8
    learning_rate: float = 3e-3
    seed: int = 1
    optimizer: str = "adam"
    freeze_backbone: bool = True
    temperature: float = 0.1
    threshold: float = 0.15
    consistency_weight: float = 0.1
    relation_weight: float = 1e-3
    rank: int = 4
    num_adapters: int = 3
    depth: int = 3
    d_hidden: int = 64
    insertion_layers: str = "all"
    inner_relu: bool = False
    pretrain_epochs: int = 15
    split_fraction: float = 0.75

    def routing_cfg(self) -> RoutingConfig:
        return RoutingConfig(self.temperature, self.threshold)

    def objective_cfg(self) -> ObjectiveConfig:
        return ObjectiveConfig(self.consistency_weight, self.relation_weight)

    def train_cfg(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            seed=self.seed,
            optimizer=self.optimizer,
            freeze_backbone=self.freeze_backbone,
        )

    def insertion(self) -> tuple[int, ...]:
        if self.insertion_layers == "all":
            return tuple(range(self.depth))
        try:
            layers = tuple(int(s) for s in self.insertion_layers.split(","))
        except ValueError:
            raise ConfigError(f"bad insertion layer list {self.insertion_layers!r}") from None
        if any(not 0 <= l < self.depth for l in layers):
            raise ConfigError(f"insertion layers {layers} outside depth {self.depth}")
        return layers


_BOOL_FIELDS = {"freeze_backbone", "inner_relu"}


def settings_to_manifest(s: RunSettings) -> dict[str, str]:
    out: dict[str, str] = {}
    for f in fields(RunSettings):
        v = getattr(s, f.name)
        if f.name in _BOOL_FIELDS:
            out[f.name] = str(int(v))
        elif isinstance(v, float):
            out[f.name] = repr(v)
        else:
            out[f.name] = str(v)
    return out


def settings_from_manifest(entries: dict[str, str]) -> RunSettings:
    require_keys(entries, [f.name for f in fields(RunSettings)], "run manifest")
    kwargs = {}
    for f in fields(RunSettings):
        raw = entries[f.name]
        if f.name in _BOOL_FIELDS:
            kwargs[f.name] = bool(int(raw))
        elif f.type == "int":
            kwargs[f.name] = int(raw)
        elif f.type == "float":
            kwargs[f.name] = float(raw)
        else:
            kwargs[f.name] = raw
    return RunSettings(**kwargs)


@dataclass
class JobResult:
    settings: RunSettings
    rows: list
    diverged: bool
    model: ComposedGcn | None
    counter: ComputeCounter
    out_dir: Path


def run_training_job(settings: RunSettings, out_dir, expected_fingerprint: str | None = None) -> JobResult:
    """Load data, pretrain, fine-tune, and write the run directory."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    started = datetime.now(timezone.utc).isoformat()

    ds = load_dataset(settings.data_dir)
    fingerprint = dataset_fingerprint(settings.data_dir)
    if expected_fingerprint is not None and fingerprint != expected_fingerprint:
        raise IntegrityError(
            f"dataset at {settings.data_dir} has fingerprint {fingerprint[:12]}..., "
            f"manifest expects {expected_fingerprint[:12]}..."
        )
    train_graphs, eval_graphs = split_dataset(ds, settings.split_fraction)
    d_in = ds.graphs[0].x.cols

    model = ComposedGcn.build(
        d_in=d_in,
        d_hidden=settings.d_hidden,
        depth=settings.depth,
        num_tasks=ds.num_tasks,
        num_adapters=settings.num_adapters,
        rank=settings.rank,
        routing_cfg=settings.routing_cfg(),
        seed=settings.seed,
        insertion_layers=settings.insertion(),
        inner_relu=settings.inner_relu,
    )
    if settings.pretrain_epochs > 0:
        pretrain_backbone(
            model.backbone,
            train_graphs,
            ds.num_tasks,
            epochs=settings.pretrain_epochs,
            seed=settings.seed,
        )
    counter = ComputeCounter()
    result = train(
        model,
        train_graphs,
        settings.train_cfg(),
        eval_graphs=eval_graphs,
        cluster_map=ds.cluster_map,
        objective=settings.objective_cfg(),
        counter=counter,
    )

    (out_dir / METRICS_FILE).write_text("\n".join(metrics_csv_lines(result.rows)) + "\n")
    manifest = settings_to_manifest(settings)
    manifest.update(
        {
            "artifact_version": __version__,
            "dataset_fingerprint": fingerprint,
            "started_at": started,
            "finished_at": datetime.now(timezone.utc).isoformat(),
            "diverged": str(int(result.diverged)),
        }
    )
    write_kv(out_dir / RUN_MANIFEST_FILE, manifest)
    if result.diverged:
        # weights are not finite; only the metrics rows are worth keeping
        return JobResult(settings, result.rows, True, None, counter, out_dir)

    outcome = route(model.relation, model.routing_cfg)
    (out_dir / ALPHA_FILE).write_text("\n".join(alpha_csv_lines(outcome)) + "\n")
    save_checkpoint(model, out_dir / CHECKPOINT_DIR)
    return JobResult(settings, result.rows, False, model, counter, out_dir)


# -- sweep ---------------------------------------------------------------------


def parse_grid(spec: str) -> list[tuple[str, list[float]]]:
    """``tau=0.1,0.5|theta=0,0.1`` -> [("tau", [...]), ("theta", [...])].

    One or two axes; rows iterate in the order given, inner axis fastest.
    """
    axes: list[tuple[str, list[float]]] = []
    if not spec.strip():
        raise ConfigError("empty sweep grid")
    for part in spec.split("|"):
        name, eq, values = part.partition("=")
        name = name.strip()
        if not eq or name not in SWEEP_AXES:
            raise ConfigError(f"bad grid axis {part!r}; axes: {sorted(SWEEP_AXES)}")
        if any(name == seen for seen, _ in axes):
            raise ConfigError(f"axis {name!r} given twice")
        try:
            vals = [float(v) for v in values.split(",") if v.strip() != ""]
        except ValueError:
            raise ConfigError(f"bad grid values in {part!r}") from None
        if not vals:
            raise ConfigError(f"axis {name!r} has no values")
        axes.append((name, vals))
    if not 1 <= len(axes) <= 2:
        raise ConfigError(f"sweeps take one or two axes, got {len(axes)}")
    return axes


def sweep_csv_header(axes) -> str:
    from .training import METRICS_HEADER

    return ",".join([name for name, _ in axes]) + "," + METRICS_HEADER


def run_sweep(base: RunSettings, axes, out_dir) -> tuple[Path, list[JobResult]]:
    """Retrain from the same seed/init at every grid point; one row per point
    holding the final epoch's metrics."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [sweep_csv_header(axes)]
    results = []
    names = [name for name, _ in axes]
    for idx, values in enumerate(itertools.product(*[vals for _, vals in axes])):
        overrides = {SWEEP_AXES[name]: value for name, value in zip(names, values)}
        settings = replace(base, **overrides)
        point_dir = out_dir / ("point_" + "_".join(f"{n}{v:g}" for n, v in zip(names, values)))
        job = run_training_job(settings, point_dir)
        results.append(job)
        if job.diverged or not job.rows:
            # keep the rows finished so far so the partial sweep is inspectable
            (out_dir / SWEEP_FILE).write_text("\n".join(lines) + "\n")
            raise NumericError(f"sweep point {dict(zip(names, values))} diverged")
        final = job.rows[-1]
        lines.append(",".join([repr(float(v)) for v in values] + final.csv_cells()))
    sweep_path = out_dir / SWEEP_FILE
    sweep_path.write_text("\n".join(lines) + "\n")
    return sweep_path, results


def load_run_manifest(path) -> tuple[RunSettings, dict[str, str]]:
    entries = read_kv(path)
    return settings_from_manifest(entries), entries
