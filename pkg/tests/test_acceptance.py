"""Acceptance gate: one test per shipped claim, each printing a verdict line.

These exercise the package end to end — real datasets, real training runs —
so the module is far slower than the unit suite. The relation-weight sweep
alone retrains the reference benchmark fifteen times; expect roughly half an
hour for the whole file on one desktop core.
"""

import time
from dataclasses import replace

import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import average_precision_score
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from grafter.adapters import AdapterBank
from grafter.backbone import GcnLayer, layer_forward
from grafter.checkpoint import load_checkpoint, save_checkpoint
from grafter.errors import IntegrityError
from grafter.graphs import Graph, make_batch, normalize_adjacency
from grafter.harness import ALPHA_FILE, CHECKPOINT_DIR, METRICS_FILE, RunSettings, run_training_job
from grafter.metrics import ComputeCounter
from grafter.model import ComposedGcn
from grafter.objectives import (
    CoactivationWeights,
    ObjectiveConfig,
    beta_from_alpha,
    consistency_reg,
    relation_reg,
    task_loss,
    total_loss,
)
from grafter.routing import RelationMatrix, RoutingConfig, compose, route, routing_entropy
from grafter.synth import SynthSpec, generate, graph_statistics, save_dataset, split_dataset
from grafter.tensor import (
    Tensor,
    add,
    add_bias,
    concat_cols,
    masked_bce_mean,
    matmul,
    reduce_mean,
    reduce_sum,
    relu,
    row_slice,
    row_softmax,
    scale,
    segment_mean,
    sq_frobenius,
    sub,
    weighted_sum,
)
from grafter.training import evaluate

from helpers import check_gradients


def _verdict(capfd, num: int, ok: bool, detail: str) -> None:
    # pytest's fd-level capture swallows prints even to sys.__stdout__ when the
    # test passes; suspend it so one pass/fail line per criterion reaches the log
    with capfd.disabled():
        print(f"\n[acceptance] criterion {num}: {'PASS' if ok else 'FAIL'} — {detail}",
              flush=True)
    assert ok, f"criterion {num}: {detail}"


@pytest.fixture(scope="module")
def ref_dataset(tmp_path_factory):
    """The reference benchmark: 800 graphs, 6 tasks in 3 planted clusters."""
    ds = generate(SynthSpec())
    d = tmp_path_factory.mktemp("refdata")
    save_dataset(ds, d)
    return str(d), ds


@pytest.fixture(scope="module")
def default_run(ref_dataset, tmp_path_factory):
    """One training run with every setting at its default, and its wall time."""
    path, _ = ref_dataset
    out = tmp_path_factory.mktemp("refrun")
    t0 = time.monotonic()
    job = run_training_job(RunSettings(data_dir=path), out)
    return job, time.monotonic() - t0


# -- 1: gradients -----------------------------------------------------------------


def test_criterion_01_gradient_checks(capfd):
    """Finite differences agree with the tape: each op to 1e-6, the full
    combined loss on a small model to 1e-4, all inside a minute."""
    t0 = time.monotonic()
    rng = np.random.default_rng(9)

    def t(*shape):
        return Tensor(rng.normal(size=shape), requires_grad=True)

    x_relu = rng.normal(size=(3, 4))
    x_relu += np.sign(x_relu) * 0.2  # keep clear of the kink
    mask = np.ones((4, 5), dtype=bool)
    mask[0, 1:] = False
    mask[2, ::2] = False
    targets = (rng.random((4, 3)) < 0.5).astype(float)
    valid = rng.random((4, 3)) < 0.8
    valid[0] = True

    a, b = t(3, 4), t(3, 4)
    m1, m2 = t(3, 4), t(4, 2)
    xb, bias = t(4, 3), t(1, 3)
    xr = Tensor(x_relu, requires_grad=True)
    xs, xs_masked = t(4, 5), t(4, 5)
    xsl = t(5, 3)
    c1, c2, c3 = t(4, 1), t(4, 1), t(4, 1)
    w_items = [t(2, 3), t(2, 3), t(2, 3)]
    w_weights = t(1, 3)
    xseg = t(6, 3)
    logits = t(4, 3)

    per_op = [
        ("matmul", lambda: sq_frobenius(matmul(m1, m2)), [m1, m2]),
        ("add", lambda: sq_frobenius(add(a, b)), [a, b]),
        ("sub", lambda: sq_frobenius(sub(a, b)), [a, b]),
        ("scale", lambda: sq_frobenius(scale(a, 1.7)), [a]),
        ("add_bias", lambda: sq_frobenius(add_bias(xb, bias)), [xb, bias]),
        ("relu", lambda: sq_frobenius(relu(xr)), [xr]),
        ("row_softmax", lambda: sq_frobenius(row_softmax(xs)), [xs]),
        ("row_softmax masked", lambda: sq_frobenius(row_softmax(xs_masked, mask)), [xs_masked]),
        ("row_slice", lambda: sq_frobenius(row_slice(xsl, 2)), [xsl]),
        ("concat_cols", lambda: sq_frobenius(concat_cols([c1, c2, c3])), [c1, c2, c3]),
        ("reduce_sum", lambda: reduce_sum(a), [a]),
        ("reduce_mean", lambda: reduce_mean(a), [a]),
        ("sq_frobenius", lambda: sq_frobenius(a), [a]),
        ("weighted_sum", lambda: sq_frobenius(weighted_sum(w_items, w_weights)),
         w_items + [w_weights]),
        ("segment_mean", lambda: sq_frobenius(segment_mean(xseg, [0, 0, 1, 1, 1, 2], 3)), [xseg]),
        ("masked_bce_mean", lambda: masked_bce_mean(logits, targets, valid), [logits]),
    ]
    for name, loss_fn, params in per_op:
        check_gradients(loss_fn, params, tol=1e-6)

    # combined loss on a real (tiny) model: depth 2, width 8, 3 adapters,
    # 4 tasks, one batch of 4 graphs with at most 8 nodes each
    ds = generate(SynthSpec(num_graphs=4, n_min=4, n_max=8, num_tasks=4,
                            num_clusters=2, seed=5))
    batch = make_batch(list(ds.graphs))
    model = ComposedGcn.build(d_in=5, d_hidden=8, depth=2, num_tasks=4,
                              num_adapters=3, rank=2,
                              routing_cfg=RoutingConfig(0.7, 0.0), seed=1)
    model.relation.scores.data += rng.normal(size=(4, 3)) * 0.5
    for ps in model.bank.adapters.values():
        for p in ps:
            p.v.data += rng.normal(size=p.v.shape) * 0.1
    cfg = ObjectiveConfig(consistency_weight=0.3, relation_weight=0.01)
    params = [p for _, p in model.parameters()]
    # the pair weights are gradient-stopped by design, so the numeric oracle
    # must hold them constant as well (the stop has its own unit test)
    frozen_beta = beta_from_alpha(route(model.relation, model.routing_cfg))

    def combined():
        fwd = model.forward(batch)
        return total_loss(
            task_loss(fwd.logits, batch.y, batch.mask),
            ComposedGcn._consistency_over_events(fwd.events, frozen_beta),
            relation_reg(model.relation),
            cfg,
        )[0]

    check_gradients(combined, params, tol=1e-4)
    elapsed = time.monotonic() - t0
    _verdict(capfd, 1, elapsed <= 60.0,
             f"{len(per_op)} ops at 1e-6 + combined loss over {len(params)} tensors "
             f"at 1e-4 in {elapsed:.1f}s (limit 60s)")


# -- 2: dense oracles ---------------------------------------------------------------


def test_criterion_02_dense_oracle_equivalence(capfd):
    rng = np.random.default_rng(42)
    worst_layer = 0.0
    for _ in range(50):
        n = int(rng.integers(2, 9))
        edges = tuple((u, v) for u in range(n) for v in range(u + 1, n)
                      if rng.random() < 0.4)
        g = Graph(n=n, edges=edges, x=Tensor(rng.normal(size=(n, 3))), y=np.zeros(1))
        w = Tensor(rng.normal(size=(3, 4)))
        got = layer_forward(GcnLayer(w, "relu"), normalize_adjacency(g), g.x).data

        adj = np.zeros((n, n))
        for u, v in edges:
            adj[u, v] = adj[v, u] = 1.0
        deg = adj.sum(axis=1)
        inv_sqrt = np.where(deg > 0, deg, 1.0) ** -0.5 * (deg > 0)
        d_half = np.diag(inv_sqrt)
        want = np.maximum(d_half @ adj @ d_half @ g.x.data @ w.data, 0.0)
        worst_layer = max(worst_layer, float(np.max(np.abs(got - want))))

    worst_compose = 0.0
    for _ in range(20):
        k = int(rng.integers(2, 5))
        outs = [Tensor(rng.normal(size=(6, 3))) for _ in range(k)]
        active = rng.random(k) < 0.7
        active[int(rng.integers(k))] = True
        raw = np.where(active, rng.random(k), 0.0)
        alpha = Tensor((raw / raw.sum()).reshape(1, k))
        got = compose(outs, alpha, active).data
        want = sum(alpha.data[0, i] * outs[i].data for i in range(k) if active[i])
        worst_compose = max(worst_compose, float(np.max(np.abs(got - want))))

    ok = worst_layer <= 1e-12 and worst_compose <= 1e-12
    _verdict(capfd, 2, ok, f"50 graphs: max layer dev {worst_layer:.2e}; "
                    f"20 mixes: max compose dev {worst_compose:.2e} (limit 1e-12)")


# -- 3: routing invariants ------------------------------------------------------------


def test_criterion_03_routing_invariants(capfd):
    rng = np.random.default_rng(321)
    scores = rng.normal(size=(1000, 6))
    taus = [1e-4, 0.05, 0.5, 1.0, 5.0]
    thetas = [0.0, 0.05, 0.15, 0.3]
    rel = RelationMatrix(Tensor(scores, requires_grad=True))

    worst_sum = 0.0
    fallback_ok = True
    outcomes = {}
    for tau in taus:
        for theta in thetas:
            o = route(rel, RoutingConfig(tau, theta))
            outcomes[tau, theta] = o
            worst_sum = max(worst_sum, float(np.max(np.abs(o.alpha.data.sum(axis=1) - 1.0))))
            fallback_ok &= bool((o.active.sum(axis=1) >= 1).all())

    # mixing entropy rises with temperature (read before any gating)
    entropy_ok = True
    prev = None
    for tau in taus:
        ent = routing_entropy(outcomes[tau, 0.0])
        if prev is not None:
            entropy_ok &= bool((ent - prev >= -1e-12).all())
        prev = ent

    # a harsher threshold can only deactivate
    active_ok = True
    for tau in taus:
        counts = [outcomes[tau, th].active.sum(axis=1) for th in thetas]
        active_ok &= all(bool((nxt <= cur).all()) for cur, nxt in zip(counts, counts[1:]))

    # near-zero temperature routes one-hot wherever the top two scores differ
    gap = np.sort(scores, axis=1)
    sharp_rows = gap[:, -1] - gap[:, -2] >= 0.1
    sharp = outcomes[1e-4, 0.0].alpha.data.max(axis=1)[sharp_rows]
    sharp_ok = bool((sharp >= 1.0 - 1e-3).all()) and sharp_rows.sum() > 800

    ok = worst_sum <= 1e-12 and fallback_ok and entropy_ok and active_ok and sharp_ok
    _verdict(capfd, 3, ok, f"1000 rows x {len(taus) * len(thetas)} (tau, theta) pairs: "
                    f"max |sum-1| {worst_sum:.2e}, fallback {fallback_ok}, "
                    f"entropy monotone {entropy_ok}, active monotone {active_ok}, "
                    f"one-hot at tau=1e-4 on {int(sharp_rows.sum())} rows {sharp_ok}")


# -- 4: consistency term --------------------------------------------------------------


def test_criterion_04_consistency_semantics(capfd):
    beta = np.array([[0.0, 0.4, 0.7], [0.4, 0.0, 0.2], [0.7, 0.2, 0.0]])
    same = Tensor([[0.3, -0.7, 1.1]])
    zero = consistency_reg([same, same, same], CoactivationWeights(beta)).item()

    pair = CoactivationWeights(np.array([[0.0, 0.5], [0.5, 0.0]]))
    outs = [Tensor([[1.0, 0.0]]), Tensor([[0.0, 1.0]])]
    fixture = consistency_reg(outs, pair).item()

    ok = zero == 0.0 and abs(fixture - 2.0) <= 1e-12
    _verdict(capfd, 4, ok, f"equal outputs -> {zero!r} (exactly 0.0); "
                    f"two unit-apart outputs at weight 0.5 -> {fixture!r} (2.0 ± 1e-12)")


# -- 5: planted recovery ---------------------------------------------------------------


def test_criterion_05_planted_recovery(ref_dataset, default_run, capfd):
    """A logistic model on the five generator statistics gates the benchmark
    (if structure can't predict the labels, the generator is at fault); the
    default run then has to recover both label quality and the planted
    task-to-cluster layout."""
    _, ds = ref_dataset
    stats = np.stack([graph_statistics(g) for g in ds.graphs])
    labels = np.stack([g.y for g in ds.graphs])
    n_train = 600
    oracle_aps = []
    for t in range(ds.num_tasks):
        tr = ~np.isnan(labels[:n_train, t])
        ev = ~np.isnan(labels[n_train:, t])
        clf = make_pipeline(StandardScaler(), LogisticRegression(C=1e4, max_iter=5000))
        clf.fit(stats[:n_train][tr], labels[:n_train, t][tr])
        oracle_aps.append(average_precision_score(
            labels[n_train:, t][ev], clf.decision_function(stats[n_train:][ev])))
    oracle_ap = float(np.mean(oracle_aps))

    job, wall = default_run
    final = job.rows[-1]
    awa = -1.0 if final.awa is None else final.awa
    ok = (oracle_ap >= 0.9 and not job.diverged and job.settings.epochs <= 100
          and wall <= 300.0 and final.ap_mean >= 0.70 and awa >= 0.90)
    _verdict(capfd, 5, ok, f"oracle AP {oracle_ap:.4f} (gate 0.9); default run: "
                    f"{job.settings.epochs} epochs in {wall:.0f}s (limit 300s), "
                    f"AP {final.ap_mean:.4f} (floor 0.70), AWA {awa:.3f} (floor 0.90)")


# -- 6: relation-weight sweep shape ---------------------------------------------------


def test_criterion_06_relation_weight_sweep_shape(ref_dataset, tmp_path_factory, capfd):
    """Quality should peak at a moderate relation penalty and fall off toward
    both the unconstrained and the over-constrained ends."""
    path, _ = ref_dataset
    grid = [0.0, 1e-4, 1e-3, 1e-2, 1e-1]
    seeds = [0, 1, 2]
    t0 = time.monotonic()
    means = []
    for rho in grid:
        aps = []
        for s in seeds:
            out = tmp_path_factory.mktemp(f"rho{rho:g}_s{s}")
            job = run_training_job(
                RunSettings(data_dir=path, relation_weight=rho, seed=s), out)
            assert not job.diverged, f"rho={rho} seed={s} diverged"
            aps.append(job.rows[-1].ap_mean)
        means.append(float(np.mean(aps)))
    wall = time.monotonic() - t0
    interior = max(means[1:4])
    ok = interior >= means[0] and interior >= means[4] and wall <= 5400.0
    table = ", ".join(f"{r:g}: {m:.4f}" for r, m in zip(grid, means))
    _verdict(capfd, 6, ok, f"mean AP over 3 seeds {{{table}}}; interior best {interior:.4f} "
                    f"vs ends {means[0]:.4f}/{means[4]:.4f}; wall {wall:.0f}s (limit 5400s)")


# -- 7: threshold prunes compute --------------------------------------------------------


def test_criterion_07_threshold_prunes_compute(ref_dataset, default_run, capfd):
    _, ds = ref_dataset
    job, _ = default_run
    model = load_checkpoint(job.out_dir / CHECKPOINT_DIR)
    _, eval_graphs = split_dataset(ds, job.settings.split_fraction)
    ops = []
    for theta in (0.0, 0.05, 0.1, 0.2, 0.3):
        model.routing_cfg = RoutingConfig(model.routing_cfg.temperature, theta)
        counter = ComputeCounter()
        evaluate(model, eval_graphs, cluster_map=ds.cluster_map, counter=counter)
        ops.append(counter.composition_ops)
    ok = all(nxt <= cur for cur, nxt in zip(ops, ops[1:]))
    _verdict(capfd, 7, ok, f"composition ops over thresholds 0..0.3: {ops} (non-increasing)")


# -- 8: determinism -----------------------------------------------------------------------


def test_criterion_08_determinism(ref_dataset, default_run, tmp_path_factory, capfd):
    """Identical settings replay to identical artifacts. The one exclusion is
    the epoch_ms metrics column, which records honest wall time."""
    path, _ = ref_dataset
    job, _ = default_run
    out2 = tmp_path_factory.mktemp("rerun")
    run_training_job(RunSettings(data_dir=path), out2)

    def stripped(p):
        return [line.rsplit(",", 1)[0] for line in (p / METRICS_FILE).read_text().splitlines()]

    metrics_same = stripped(job.out_dir) == stripped(out2)
    alpha_same = (job.out_dir / ALPHA_FILE).read_bytes() == (out2 / ALPHA_FILE).read_bytes()
    first = sorted((job.out_dir / CHECKPOINT_DIR).iterdir())
    second = sorted((out2 / CHECKPOINT_DIR).iterdir())
    ckpt_same = ([p.name for p in first] == [p.name for p in second]
                 and all(x.read_bytes() == y.read_bytes() for x, y in zip(first, second)))
    ok = metrics_same and alpha_same and ckpt_same
    _verdict(capfd, 8, ok, f"repeat default run: metrics (wall-clock column aside) {metrics_same}, "
                    f"alpha.csv bytes {alpha_same}, {len(first)} checkpoint files bytes {ckpt_same}")


# -- 9: adapter identities ---------------------------------------------------------------


def test_criterion_09_adapter_identities(tmp_path, capfd):
    rng = np.random.default_rng(17)
    bank = AdapterBank.build([0, 1], width=8, num_adapters=3, rank=2, seed=0)
    z = Tensor(rng.normal(size=(10, 8)))
    identity_ok = all(np.array_equal(out.data, z.data)
                      for _, out in bank.forward_selected(0, z, [0, 1, 2]))

    for ps in bank.adapters.values():
        for p in ps:
            p.u.data[:] = rng.normal(size=p.u.shape)
            p.v.data[:] = rng.normal(size=p.v.shape)
    sigmas = []
    for _, out in bank.forward_selected(1, z, [0, 1, 2]):
        sigmas.append(np.linalg.svd(out.data - z.data, compute_uv=False))
    rank_ok = all(s[2] <= 1e-9 for s in sigmas)  # rank 2 -> third value vanishes

    model = ComposedGcn.build(d_in=5, d_hidden=8, depth=2, num_tasks=3,
                              num_adapters=3, rank=2, seed=0)
    ck = tmp_path / "ck"
    save_checkpoint(model, ck)
    (ck / "adapter.1.2.tensors").unlink()
    try:
        load_checkpoint(ck)
        missing_ok = False
    except IntegrityError as exc:
        missing_ok = "adapter.1.2" in str(exc)

    ok = identity_ok and rank_ok and missing_ok
    _verdict(capfd, 9, ok, f"fresh adapters identical to input {identity_ok}; residual rank <= 2 "
                    f"(third singular value <= 1e-9) {rank_ok}; missing file detected {missing_ok}")
