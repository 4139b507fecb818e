"""Synthetic benchmark: random graphs with labels planted on five structural
statistics, grouped so that tasks in one cluster share a statistic."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, IntegrityError, ParseError
from .graphs import Graph, adjacency
from .manifest import read_kv, require_keys, write_kv
from .tensor import Tensor

Array = np.ndarray

# ordered and fixed; a cluster's statistic is STATISTICS[cluster_id]
STATISTIC_NAMES = (
    "edges_per_node",
    "triangles_per_node",
    "max_degree_ratio",
    "mean_clustering",
    "degree_variance_per_node",
)

FEATURE_BUCKETS = 5  # degree one-hot buckets 0,1,2,3,>=4

GRAPHS_FILE = "graphs.csv"
EDGES_FILE = "edges.csv"
LABELS_FILE = "labels.csv"
META_FILE = "meta.txt"
DATASET_FILES = (GRAPHS_FILE, EDGES_FILE, LABELS_FILE, META_FILE)


@dataclass(frozen=True)
class SynthSpec:
    num_graphs: int = 800
    n_min: int = 10
    n_max: int = 30
    edge_prob: float = 0.2
    num_tasks: int = 6
    num_clusters: int = 3
    cluster_map: tuple[int, ...] = ()
    label_noise: float = 0.05
    missing_prob: float = 0.1
    seed: int = 7

    def __post_init__(self):
        if self.num_graphs < 1:
            raise ContractError(f"need at least one graph, got {self.num_graphs}")
        if not 1 <= self.n_min <= self.n_max:
            raise ContractError(f"bad node range [{self.n_min}, {self.n_max}]")
        if not 0.0 <= self.edge_prob <= 1.0:
            raise ContractError(f"edge probability {self.edge_prob} outside [0, 1]")
        if self.num_tasks < 1:
            raise ContractError("need at least one task")
        if not 1 <= self.num_clusters <= len(STATISTIC_NAMES):
            raise ContractError(
                f"clusters must be 1..{len(STATISTIC_NAMES)} (one statistic each), got {self.num_clusters}"
            )
        if self.num_clusters > self.num_tasks:
            raise ContractError("more clusters than tasks")
        cmap = self.cluster_map or default_cluster_map(self.num_tasks, self.num_clusters)
        cmap = tuple(int(c) for c in cmap)
        if len(cmap) != self.num_tasks:
            raise ContractError(f"cluster map has {len(cmap)} entries for {self.num_tasks} tasks")
        if set(cmap) != set(range(self.num_clusters)):
            raise ContractError("cluster map must use every cluster id 0..C-1")
        object.__setattr__(self, "cluster_map", cmap)
        if not 0.0 <= self.label_noise <= 1.0 or not 0.0 <= self.missing_prob <= 1.0:
            raise ContractError("label_noise and missing_prob must lie in [0, 1]")


def default_cluster_map(num_tasks: int, num_clusters: int) -> tuple[int, ...]:
    """Contiguous blocks, e.g. 6 tasks over 3 clusters -> (0,0,1,1,2,2)."""
    return tuple(t * num_clusters // num_tasks for t in range(num_tasks))


@dataclass(frozen=True)
class Dataset:
    graphs: tuple[Graph, ...]
    num_tasks: int
    cluster_map: tuple[int, ...] | None
    meta: dict[str, str]


def graph_statistics(g: Graph) -> Array:
    """The five planted statistics, in STATISTIC_NAMES order."""
    a = adjacency(g)
    deg = a.sum(axis=1)
    n = g.n
    a3_diag = np.diag(a @ a @ a)
    triangles = a3_diag.sum() / 6.0
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = deg * (deg - 1.0)
        local = np.where(denom > 0.0, a3_diag / denom, 0.0)
    return np.array([
        len(g.edges) / n,
        triangles / n,
        deg.max() / n,
        local.mean(),
        deg.var() / n,
    ])


def degree_features(g: Graph) -> Array:
    deg = adjacency(g).sum(axis=1).astype(np.int64)
    buckets = np.minimum(deg, FEATURE_BUCKETS - 1)
    x = np.zeros((g.n, FEATURE_BUCKETS))
    x[np.arange(g.n), buckets] = 1.0
    return x


def _random_graph(spec: SynthSpec, graph_id: int) -> tuple[int, tuple[tuple[int, int], ...]]:
    rng = np.random.default_rng([spec.seed, graph_id])
    n = int(rng.integers(spec.n_min, spec.n_max + 1))
    pairs = [(u, v) for u in range(n) for v in range(u + 1, n)]
    draws = rng.random(len(pairs))
    edges = tuple(p for p, d in zip(pairs, draws) if d < spec.edge_prob)
    return n, edges


def generate(spec: SynthSpec) -> Dataset:
    """Deterministic in the seed; each graph draws from its own derived stream,
    so generation order cannot matter."""
    skeletons = [_random_graph(spec, g) for g in range(spec.num_graphs)]
    bare = [
        Graph(n, edges, Tensor(np.zeros((n, FEATURE_BUCKETS))), np.full(spec.num_tasks, np.nan))
        for n, edges in skeletons
    ]
    stats = np.stack([graph_statistics(g) for g in bare])
    medians = np.median(stats, axis=0)

    graphs = []
    for gid, (n, edges) in enumerate(skeletons):
        label_rng = np.random.default_rng([spec.seed, gid, 1])
        flips = label_rng.random(spec.num_tasks) < spec.label_noise
        misses = label_rng.random(spec.num_tasks) < spec.missing_prob
        y = np.empty(spec.num_tasks)
        for t in range(spec.num_tasks):
            stat_idx = spec.cluster_map[t]
            raw = stats[gid, stat_idx] > medians[stat_idx]
            val = (not raw) if flips[t] else raw
            y[t] = np.nan if misses[t] else float(val)
        g = Graph(n, edges, Tensor(degree_features(bare[gid])), y)
        graphs.append(g)

    meta = {
        "format_version": "1",
        "num_graphs": str(spec.num_graphs),
        "num_tasks": str(spec.num_tasks),
        "num_clusters": str(spec.num_clusters),
        "cluster_map": ",".join(str(c) for c in spec.cluster_map),
        "seed": str(spec.seed),
        "n_min": str(spec.n_min),
        "n_max": str(spec.n_max),
        "edge_prob": repr(spec.edge_prob),
        "label_noise": repr(spec.label_noise),
        "missing_prob": repr(spec.missing_prob),
    }
    return Dataset(tuple(graphs), spec.num_tasks, spec.cluster_map, meta)


# -- files --------------------------------------------------------------------


def save_dataset(ds: Dataset, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if not ds.graphs:
        raise ContractError("refusing to save an empty dataset")

    glines = ["graph_id,n"]
    elines = ["graph_id,u,v"]
    header = ["graph_id"] + [f"task_{t}" for t in range(ds.num_tasks)]
    llines = [",".join(header)]
    for gid, g in enumerate(ds.graphs):
        glines.append(f"{gid},{g.n}")
        for u, v in g.edges:
            elines.append(f"{gid},{u},{v}")
        cells = [str(gid)]
        for t in range(ds.num_tasks):
            cells.append("" if np.isnan(g.y[t]) else str(int(g.y[t])))
        llines.append(",".join(cells))

    (directory / GRAPHS_FILE).write_text("\n".join(glines) + "\n")
    (directory / EDGES_FILE).write_text("\n".join(elines) + "\n")
    (directory / LABELS_FILE).write_text("\n".join(llines) + "\n")
    write_kv(directory / META_FILE, ds.meta)
    return directory


def _parse_int(cell: str, what: str, line_no: int) -> int:
    try:
        return int(cell)
    except ValueError:
        raise ParseError(f"{what}: expected an integer, got {cell!r}", line_no) from None


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    for fname in DATASET_FILES:
        if not (directory / fname).exists():
            raise FileNotFoundError(f"{directory / fname} not found; not a dataset directory")

    meta = read_kv(directory / META_FILE)
    require_keys(meta, ["num_tasks"], META_FILE)
    num_tasks = int(meta["num_tasks"])
    cluster_map = None
    if "cluster_map" in meta and meta["cluster_map"]:
        cluster_map = tuple(int(c) for c in meta["cluster_map"].split(","))
        if len(cluster_map) != num_tasks:
            raise IntegrityError(
                f"cluster map lists {len(cluster_map)} tasks, meta says {num_tasks}"
            )

    sizes: dict[int, int] = {}
    glines = (directory / GRAPHS_FILE).read_text().splitlines()
    if not glines or glines[0] != "graph_id,n":
        raise ParseError(f"{GRAPHS_FILE}: bad or missing header", 1)
    for line_no, line in enumerate(glines[1:], start=2):
        cells = line.split(",")
        if len(cells) != 2:
            raise ParseError(f"{GRAPHS_FILE}: expected 2 cells, got {len(cells)}", line_no)
        gid = _parse_int(cells[0], GRAPHS_FILE, line_no)
        if gid in sizes:
            raise IntegrityError(f"{GRAPHS_FILE}: duplicate graph id {gid}")
        sizes[gid] = _parse_int(cells[1], GRAPHS_FILE, line_no)
    if not sizes:
        raise ContractError(f"{GRAPHS_FILE}: dataset has no graphs")
    if sorted(sizes) != list(range(len(sizes))):
        raise IntegrityError(f"{GRAPHS_FILE}: graph ids must be 0..{len(sizes) - 1}")

    edges: dict[int, list[tuple[int, int]]] = {gid: [] for gid in sizes}
    elines = (directory / EDGES_FILE).read_text().splitlines()
    if not elines or elines[0] != "graph_id,u,v":
        raise ParseError(f"{EDGES_FILE}: bad or missing header", 1)
    for line_no, line in enumerate(elines[1:], start=2):
        cells = line.split(",")
        if len(cells) != 3:
            raise ParseError(f"{EDGES_FILE}: expected 3 cells, got {len(cells)}", line_no)
        gid = _parse_int(cells[0], EDGES_FILE, line_no)
        u = _parse_int(cells[1], EDGES_FILE, line_no)
        v = _parse_int(cells[2], EDGES_FILE, line_no)
        if gid not in sizes:
            raise IntegrityError(f"{EDGES_FILE}: edge for unknown graph id {gid} (line {line_no})")
        if not (0 <= u < sizes[gid] and 0 <= v < sizes[gid]):
            raise IntegrityError(
                f"{EDGES_FILE}: edge ({u},{v}) dangles outside graph {gid} of size {sizes[gid]} (line {line_no})"
            )
        edges[gid].append((u, v))

    labels: dict[int, Array] = {}
    llines = (directory / LABELS_FILE).read_text().splitlines()
    want_header = ",".join(["graph_id"] + [f"task_{t}" for t in range(num_tasks)])
    if not llines or llines[0] != want_header:
        raise ParseError(f"{LABELS_FILE}: bad or missing header", 1)
    for line_no, line in enumerate(llines[1:], start=2):
        cells = line.split(",")
        if len(cells) != num_tasks + 1:
            raise ParseError(f"{LABELS_FILE}: expected {num_tasks + 1} cells, got {len(cells)}", line_no)
        gid = _parse_int(cells[0], LABELS_FILE, line_no)
        if gid not in sizes:
            raise IntegrityError(f"{LABELS_FILE}: labels for unknown graph id {gid} (line {line_no})")
        if gid in labels:
            raise IntegrityError(f"{LABELS_FILE}: duplicate labels for graph {gid}")
        row = np.empty(num_tasks)
        for t, cell in enumerate(cells[1:]):
            if cell == "":
                row[t] = np.nan
            elif cell in ("0", "1"):
                row[t] = float(cell)
            else:
                raise ParseError(f"{LABELS_FILE}: label must be 0, 1, or empty, got {cell!r}", line_no)
        labels[gid] = row
    missing_rows = [gid for gid in sizes if gid not in labels]
    if missing_rows:
        raise IntegrityError(f"{LABELS_FILE}: no labels for graphs {missing_rows[:5]}")

    graphs = []
    for gid in range(len(sizes)):
        g = Graph(sizes[gid], tuple(edges[gid]), Tensor(np.zeros((sizes[gid], FEATURE_BUCKETS))), labels[gid])
        graphs.append(Graph(g.n, g.edges, Tensor(degree_features(g)), g.y))
    return Dataset(tuple(graphs), num_tasks, cluster_map, meta)


def dataset_fingerprint(directory) -> str:
    """SHA-256 over the dataset files in fixed order; pins runs to their data."""
    directory = Path(directory)
    h = hashlib.sha256()
    for fname in DATASET_FILES:
        h.update(fname.encode())
        h.update(b"\0")
        h.update((directory / fname).read_bytes())
    return h.hexdigest()


def split_dataset(ds: Dataset, train_fraction: float) -> tuple[list[Graph], list[Graph]]:
    """First floor(f*G) graphs train, the rest held out; generation order is
    already randomized by the seed, so the prefix is an unbiased sample."""
    if not 0.0 < train_fraction < 1.0:
        raise ContractError(f"train fraction must be in (0, 1), got {train_fraction}")
    cut = int(len(ds.graphs) * train_fraction)
    if cut == 0 or cut == len(ds.graphs):
        raise ContractError(f"split leaves one side empty ({cut}/{len(ds.graphs)})")
    return list(ds.graphs[:cut]), list(ds.graphs[cut:])
