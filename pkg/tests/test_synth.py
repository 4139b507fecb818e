"""Synthetic benchmark generator and its file round trip.

Structural statistics are cross-checked against networkx, which the engine
itself never imports.
"""

import numpy as np
import networkx as nx
import pytest

from grafter.errors import ContractError, IntegrityError, ParseError
from grafter.graphs import Graph
from grafter.synth import (
    SynthSpec,
    dataset_fingerprint,
    default_cluster_map,
    degree_features,
    generate,
    graph_statistics,
    load_dataset,
    save_dataset,
    split_dataset,
)
from grafter.tensor import Tensor


SMALL = SynthSpec(num_graphs=60, n_min=6, n_max=12, seed=3)


@pytest.fixture(scope="module")
def small_ds():
    return generate(SMALL)


def _graph(n, edges, tasks=1):
    return Graph(n=n, edges=tuple(edges), x=Tensor(np.zeros((n, 5))), y=np.full(tasks, np.nan))


# ----------------------------------------------------------------- spec rules


def test_spec_validation():
    with pytest.raises(ContractError):
        SynthSpec(num_graphs=0)
    with pytest.raises(ContractError):
        SynthSpec(n_min=10, n_max=5)
    with pytest.raises(ContractError):
        SynthSpec(edge_prob=1.5)
    with pytest.raises(ContractError):
        SynthSpec(num_clusters=6)  # only five planted statistics exist
    with pytest.raises(ContractError):
        SynthSpec(num_tasks=2, num_clusters=3)
    with pytest.raises(ContractError):
        SynthSpec(cluster_map=(0, 0, 0, 1, 1, 1), num_clusters=3)  # cluster 2 unused
    with pytest.raises(ContractError):
        SynthSpec(label_noise=-0.1)


def test_default_cluster_map_blocks():
    assert default_cluster_map(6, 3) == (0, 0, 1, 1, 2, 2)
    assert default_cluster_map(5, 2) == (0, 0, 0, 1, 1)
    assert default_cluster_map(3, 3) == (0, 1, 2)


# ------------------------------------------------------------ statistics


def test_triangle_statistic_on_known_graphs():
    tri = _graph(3, [(0, 1), (1, 2), (0, 2)])
    path4 = _graph(4, [(0, 1), (1, 2), (2, 3)])
    assert graph_statistics(tri)[1] == pytest.approx(1 / 3)  # one triangle, n=3
    assert graph_statistics(path4)[1] == 0.0


def test_statistics_match_networkx(small_ds):
    for g in small_ds.graphs[:25]:
        nxg = nx.Graph()
        nxg.add_nodes_from(range(g.n))
        nxg.add_edges_from(g.edges)
        s = graph_statistics(g)
        assert s[0] == pytest.approx(nxg.number_of_edges() / g.n)
        assert s[1] == pytest.approx(sum(nx.triangles(nxg).values()) / 3 / g.n)
        degs = np.array([d for _, d in nxg.degree()])
        assert s[2] == pytest.approx(degs.max() / g.n)
        assert s[3] == pytest.approx(np.mean(list(nx.clustering(nxg).values())))
        assert s[4] == pytest.approx(degs.var() / g.n)


def test_degree_features_one_hot_buckets():
    g = _graph(6, [(0, 1), (0, 2), (0, 3), (0, 4), (0, 5)])  # star: hub degree 5
    x = degree_features(g)
    assert x.shape == (6, 5)
    np.testing.assert_array_equal(x.sum(axis=1), np.ones(6))
    assert x[0, 4] == 1.0  # degree >= 4 bucket
    assert x[1, 1] == 1.0  # leaves have degree 1


# ------------------------------------------------------------- generation


def test_generation_is_deterministic():
    a = generate(SMALL)
    b = generate(SMALL)
    for ga, gb in zip(a.graphs, b.graphs):
        assert ga.n == gb.n and ga.edges == gb.edges
        np.testing.assert_array_equal(ga.y, gb.y, strict=True)


def test_noise_free_labels_agree_within_a_cluster():
    spec = SynthSpec(num_graphs=40, n_min=6, n_max=10, label_noise=0.0, missing_prob=0.0, seed=1)
    ds = generate(spec)
    for g in ds.graphs:
        # tasks 0,1 share cluster 0; 2,3 share cluster 1; 4,5 share cluster 2
        assert g.y[0] == g.y[1]
        assert g.y[2] == g.y[3]
        assert g.y[4] == g.y[5]


def test_noise_free_labels_recomputable_from_statistics():
    spec = SynthSpec(num_graphs=50, n_min=6, n_max=10, label_noise=0.0, missing_prob=0.0, seed=2)
    ds = generate(spec)
    stats = np.stack([graph_statistics(g) for g in ds.graphs])
    medians = np.median(stats, axis=0)
    for gid, g in enumerate(ds.graphs):
        for t in range(spec.num_tasks):
            c = spec.cluster_map[t]
            assert g.y[t] == float(stats[gid, c] > medians[c])


def test_median_split_balances_labels():
    spec = SynthSpec(num_graphs=1000, n_min=8, n_max=16, label_noise=0.0, missing_prob=0.0, seed=5)
    ds = generate(spec)
    y = np.stack([g.y for g in ds.graphs])
    rates = y.mean(axis=0)
    assert np.all(np.abs(rates - 0.5) < 0.05)


def test_noise_and_missing_rates_are_plausible():
    spec = SynthSpec(num_graphs=600, n_min=6, n_max=10, label_noise=0.2, missing_prob=0.25, seed=6)
    clean = SynthSpec(num_graphs=600, n_min=6, n_max=10, label_noise=0.0, missing_prob=0.0, seed=6)
    noisy_y = np.stack([g.y for g in generate(spec).graphs])
    clean_y = np.stack([g.y for g in generate(clean).graphs])
    n_cells = noisy_y.size
    missing_rate = np.isnan(noisy_y).mean()
    # binomial 3-sigma bands
    assert abs(missing_rate - 0.25) < 3 * np.sqrt(0.25 * 0.75 / n_cells)
    seen = ~np.isnan(noisy_y)
    flip_rate = (noisy_y[seen] != clean_y[seen]).mean()
    assert abs(flip_rate - 0.2) < 3 * np.sqrt(0.2 * 0.8 / seen.sum())


def test_custom_cluster_map_controls_the_planted_statistic():
    spec = SynthSpec(
        num_graphs=40, n_min=6, n_max=10, num_tasks=2, num_clusters=2,
        cluster_map=(1, 0), label_noise=0.0, missing_prob=0.0, seed=8,
    )
    ds = generate(spec)
    stats = np.stack([graph_statistics(g) for g in ds.graphs])
    medians = np.median(stats, axis=0)
    for gid, g in enumerate(ds.graphs):
        assert g.y[0] == float(stats[gid, 1] > medians[1])  # task 0 -> statistic 1
        assert g.y[1] == float(stats[gid, 0] > medians[0])


# ----------------------------------------------------------------- files


def test_round_trip_is_exact(tmp_path, small_ds):
    d = save_dataset(small_ds, tmp_path / "ds")
    back = load_dataset(d)
    assert back.num_tasks == small_ds.num_tasks
    assert back.cluster_map == small_ds.cluster_map
    for ga, gb in zip(small_ds.graphs, back.graphs):
        assert ga.n == gb.n and ga.edges == gb.edges
        np.testing.assert_array_equal(ga.x.data, gb.x.data)
        np.testing.assert_array_equal(ga.y, gb.y)  # NaN == NaN under array_equal


def test_saved_files_are_byte_stable(tmp_path, small_ds):
    d1 = save_dataset(small_ds, tmp_path / "a")
    d2 = save_dataset(small_ds, tmp_path / "b")
    assert dataset_fingerprint(d1) == dataset_fingerprint(d2)


def test_fingerprint_reacts_to_any_file(tmp_path, small_ds):
    d = save_dataset(small_ds, tmp_path / "ds")
    before = dataset_fingerprint(d)
    p = d / "labels.csv"
    p.write_text(p.read_text().replace("task_0", "task_0 "))
    assert dataset_fingerprint(d) != before


def test_missing_labels_survive_round_trip(tmp_path):
    spec = SynthSpec(num_graphs=30, n_min=5, n_max=8, missing_prob=0.5, seed=9)
    ds = generate(spec)
    assert any(np.isnan(g.y).any() for g in ds.graphs)
    back = load_dataset(save_dataset(ds, tmp_path / "ds"))
    for ga, gb in zip(ds.graphs, back.graphs):
        np.testing.assert_array_equal(np.isnan(ga.y), np.isnan(gb.y))


def test_loader_error_taxonomy(tmp_path, small_ds):
    def fresh(name):
        d = save_dataset(small_ds, tmp_path / name)
        return d

    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "nowhere")

    d = fresh("bad_header")
    (d / "graphs.csv").write_text("id,n\n0,3\n")
    with pytest.raises(ParseError):
        load_dataset(d)

    d = fresh("bad_int")
    (d / "graphs.csv").write_text("graph_id,n\nzero,3\n")
    with pytest.raises(ParseError) as exc:
        load_dataset(d)
    assert "2" in str(exc.value)  # names the offending line

    d = fresh("dangling_edge")
    with (d / "edges.csv").open("a") as f:
        f.write("0,0,9999\n")
    with pytest.raises(IntegrityError):
        load_dataset(d)

    d = fresh("unknown_graph_edge")
    with (d / "edges.csv").open("a") as f:
        f.write("4242,0,1\n")
    with pytest.raises(IntegrityError):
        load_dataset(d)

    d = fresh("bad_label")
    lines = (d / "labels.csv").read_text().splitlines()
    lines[1] = lines[1].rsplit(",", 1)[0] + ",2"
    (d / "labels.csv").write_text("\n".join(lines) + "\n")
    with pytest.raises(ParseError):
        load_dataset(d)

    d = fresh("duplicate_graph")
    with (d / "graphs.csv").open("a") as f:
        f.write("0,5\n")
    with pytest.raises(IntegrityError):
        load_dataset(d)

    d = fresh("missing_label_row")
    lines = (d / "labels.csv").read_text().splitlines()
    (d / "labels.csv").write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(IntegrityError):
        load_dataset(d)


def test_empty_dataset_rejected(tmp_path, small_ds):
    from grafter.synth import Dataset

    with pytest.raises(ContractError):
        save_dataset(Dataset((), 2, None, {"num_tasks": "2"}), tmp_path / "empty")
    d = save_dataset(small_ds, tmp_path / "gutted")
    (d / "graphs.csv").write_text("graph_id,n\n")
    with pytest.raises(ContractError):
        load_dataset(d)


# ----------------------------------------------------------------- splitting


def test_split_sizes(small_ds):
    train, test = split_dataset(small_ds, 0.75)
    assert len(train) == 45 and len(test) == 15
    assert train[0] is small_ds.graphs[0]


def test_split_validation(small_ds):
    with pytest.raises(ContractError):
        split_dataset(small_ds, 0.0)
    with pytest.raises(ContractError):
        split_dataset(small_ds, 1.0)
    tiny = generate(SynthSpec(num_graphs=2, n_min=3, n_max=4, seed=0))
    with pytest.raises(ContractError):
        split_dataset(tiny, 0.01)  # floor would empty the train side
