import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from n1gin import nn
from n1gin.flow import compute_features
from n1gin.gin import (
    CheckpointError, DivergenceError, EmbeddingState, FeatureScaler, GinConfig, GinModel, GraphBatch,
    Pooling, aggregate, combine, edge_update, embed_inputs, forward, load_checkpoint, readout,
    save_checkpoint, train,
)
from n1gin.grid import FeatureSet, LabeledSample, Provenance, make_grid
from n1gin.nn import Mode, Var
from oracles import random_small_grid


def sample_of(grid, label=0, sid=""):
    return LabeledSample(grid, compute_features(grid), label, Provenance.GENERATED, sid)


def path_grid(n):
    return make_grid(n, [(i, i + 1) for i in range(n - 1)], loads=[0] + [10.0 * i for i in range(1, n)])


def make_identity(mlp):
    """Identity weights and no normalisation: the MLP becomes ReLU(ReLU(x))."""
    for d in mlp.dense:
        d.weight.value = np.eye(*d.weight.value.shape)
        if d.bias is not None:
            d.bias.value[:] = 0
    mlp.norm = [None] * len(mlp.norm)


def identity_model(k, dim=4):
    m = GinModel(GinConfig(k=k, dim=dim))
    for mlp in [m.mlp1, m.mlp2, *m.mlp3, *m.mlp4]:
        make_identity(mlp)
    return m


def random_model(k, seed=0, pooling=Pooling.SUM, warm=None):
    m = GinModel(GinConfig(k=k, pooling=pooling, seed=seed))
    if warm is not None:
        m.scaler = FeatureScaler.fit(warm)
        m.forward(GraphBatch.from_samples(warm, m.scaler))  # non-trivial running statistics
    m.set_mode(Mode.EVAL)
    return m


def batch_of(nf, ef, ends):
    return GraphBatch.from_arrays([(np.asarray(nf, float), np.asarray(ef, float), np.asarray(ends))])


@pytest.fixture(scope="module")
def toy_samples():
    rng = np.random.default_rng(5)
    out = []
    while len(out) < 8:
        g = random_small_grid(rng)
        if g.n_nodes >= 4:
            out.append(sample_of(g, len(out) % 2, f"t{len(out)}"))
    return out


# --- configuration -------------------------------------------------------------------

def test_config_defaults_and_validation():
    c = GinConfig()
    assert (c.k, c.dim, c.pooling, c.lr) == (15, 16, Pooling.SUM, 1e-4)
    assert GinConfig.from_dict(GinConfig(k=5, pooling="Max").to_dict()) == GinConfig(k=5, pooling=Pooling.MAX)
    with pytest.raises(ValueError):
        GinConfig(k=0)
    with pytest.raises(ValueError):
        GinConfig(lr=0.0)


def test_model_shapes():
    m = GinModel(GinConfig(k=3))
    assert len(m.mlp3) == len(m.mlp4) == len(m.eps1) == len(m.eps2) == 3
    assert m.head.n_in == 4 * 16 and m.head.n_out == 1
    assert all(float(e.value) == 0.0 for e in m.eps1 + m.eps2)


# --- layer 0 ------------------------------------------------------------------------

def test_embed_sums_neighbour_features():
    m = identity_model(1)
    nf = [[0, 0, 0, 0], [1, 0, 0, 0], [0, 1, 0, 0]]
    b = batch_of(nf, np.ones((2, 4)), [(0, 1), (0, 2)])
    state = embed_inputs(m, b)
    np.testing.assert_array_equal(state.h[0].value[0], [1, 1, 0, 0])
    np.testing.assert_array_equal(state.h[0].value[1], [0, 0, 0, 0])


def test_isolated_node_embeds_to_zero():
    m = random_model(1)
    b = batch_of(np.ones((2, 4)), np.zeros((0, 4)), np.zeros((0, 2)))
    np.testing.assert_array_equal(embed_inputs(m, b).h[0].value, 0.0)


def test_zero_weight_edge_mlp_gives_equal_rows():
    m = random_model(1)
    for d in m.mlp2.dense:
        d.weight.value[:] = 0
    b = batch_of(np.ones((3, 4)), np.random.default_rng(0).normal(size=(2, 4)), [(0, 1), (1, 2)])
    g0 = embed_inputs(m, b).g[0].value
    np.testing.assert_array_equal(g0[0], g0[1])


def test_embedding_follows_node_permutation(toy_samples):
    m = random_model(1, warm=toy_samples)
    s = toy_samples[0]
    nf, ef = m.scaler.transform(s.features)
    ends = s.grid.endpoints
    perm = np.random.default_rng(1).permutation(s.grid.n_nodes)  # old id -> new id
    nf_p = np.empty_like(nf)
    nf_p[perm] = nf
    h = embed_inputs(m, GraphBatch.from_arrays([(nf, ef, ends)])).h[0].value
    hp = embed_inputs(m, GraphBatch.from_arrays([(nf_p, ef, perm[ends])])).h[0].value
    np.testing.assert_allclose(hp[perm], h, rtol=0, atol=1e-12)


# --- per-layer updates ---------------------------------------------------------------

def test_edge_update_examples():
    m = identity_model(1)
    g = np.array([[1.0, 2.0, 0.0, 3.0]])
    state = EmbeddingState([Var(np.zeros((2, 4)))], [Var(g)])
    np.testing.assert_array_equal(edge_update(m, 1, state).value, g)
    m.eps1[0].value = np.array(1.0)
    state = EmbeddingState([Var(np.zeros((2, 4)))], [Var(g)])
    np.testing.assert_array_equal(edge_update(m, 1, state).value, 2 * g)


def test_edge_update_is_per_edge():
    m = random_model(1)
    rng = np.random.default_rng(2)
    g = rng.normal(size=(5, 16))
    base = edge_update(m, 1, EmbeddingState([], [Var(g)])).value
    g2 = g.copy()
    g2[3] += 1.0
    out = edge_update(m, 1, EmbeddingState([], [Var(g2)])).value
    changed = np.any(out != base, axis=1)
    assert list(changed) == [False, False, False, True, False]


def test_aggregate_single_neighbour():
    b = batch_of(np.zeros((2, 2)), np.zeros((1, 2)), [(0, 1)])
    h = np.array([[0.0, 0.0], [1.0, -2.0]])
    state = EmbeddingState([Var(h)], [Var(np.array([[0.0, 1.0]]))])
    a = aggregate(b, state, 1).value
    np.testing.assert_array_equal(a[0], [1.0, 0.0])
    np.testing.assert_array_equal(a[1], [0.0, 1.0])


def test_aggregate_two_equal_neighbours():
    b = batch_of(np.zeros((3, 2)), np.zeros((2, 2)), [(0, 1), (0, 2)])
    h = np.array([[0.0, 0.0], [0.5, -1.0], [0.5, -1.0]])
    g = np.array([[1.0, 3.0], [1.0, 3.0]])
    a = aggregate(b, EmbeddingState([Var(h)], [Var(g)]), 1).value
    np.testing.assert_array_equal(a[0], 2 * np.maximum(h[1] + g[0], 0))


@given(st.integers(0, 2**32 - 1))
def test_aggregate_independent_of_edge_order(seed):
    rng = np.random.default_rng(seed)
    g = random_small_grid(rng)
    ends = g.endpoints
    h = rng.normal(size=(g.n_nodes, 3))
    e = rng.normal(size=(g.n_edges, 3))
    perm = rng.permutation(g.n_edges)
    a1 = aggregate(batch_of(np.zeros((g.n_nodes, 1)), e, ends), EmbeddingState([Var(h)], [Var(e)]), 1).value
    a2 = aggregate(batch_of(np.zeros((g.n_nodes, 1)), e[perm], ends[perm]),
                   EmbeddingState([Var(h)], [Var(e[perm])]), 1).value
    np.testing.assert_allclose(a1, a2, rtol=0, atol=1e-12)
    expected = np.zeros_like(h)
    for (u, v), ee in zip(ends, e):
        expected[v] += np.maximum(h[u] + ee, 0)
        expected[u] += np.maximum(h[v] + ee, 0)
    np.testing.assert_allclose(a1, expected, rtol=0, atol=1e-12)


def test_combine_examples():
    m = identity_model(1)
    h = np.array([[1.0, 0.5, 0.0, 2.0]])
    state = EmbeddingState([Var(h)], [])
    np.testing.assert_array_equal(combine(m, 1, state, Var(np.zeros_like(h))).value, h)
    m = random_model(1)
    state = EmbeddingState([Var(np.zeros((3, 16)))], [])
    out = combine(m, 1, state, Var(np.zeros((3, 16)))).value
    np.testing.assert_array_equal(out, np.tile(out[0], (3, 1)))


def test_identity_network_is_iterated_neighbour_sum():
    k = 3
    m = identity_model(k)
    n = 6
    rng = np.random.default_rng(4)
    nf = rng.uniform(0, 1, (n, 4))
    ef = rng.uniform(0, 1, (n - 1, 4))
    ends = [(i, i + 1) for i in range(n - 1)]
    state = embed_inputs(m, batch_of(nf, ef, ends))
    b = batch_of(nf, ef, ends)
    for layer in range(1, k + 1):
        a = aggregate(b, state, layer)
        edge_update(m, layer, state)
        combine(m, layer, state, a)
    # dense reference: h0 = A x, a_v = sum_u (h_u + g_uv), h_k = h_{k-1} + a
    adj = np.zeros((n, n))
    inc = np.zeros((n, n - 1))
    for e, (u, v) in enumerate(ends):
        adj[u, v] = adj[v, u] = 1
        inc[u, e] = inc[v, e] = 1
    h = adj @ nf
    for layer in range(1, k + 1):
        h = h + adj @ h + inc @ ef
        np.testing.assert_allclose(state.h[layer].value, h, rtol=1e-12)


@pytest.mark.parametrize("k", [1, 2, 3])
def test_k_hop_locality(k):
    n = 10
    g = path_grid(n)
    s = sample_of(g)
    m = random_model(k, seed=k, warm=[s])
    nf, ef = m.scaler.transform(s.features)

    def h_last(nf_, ef_):
        b = GraphBatch.from_arrays([(nf_, ef_, g.endpoints)])
        state = embed_inputs(m, b)
        for layer in range(1, k + 1):
            a = aggregate(b, state, layer)
            edge_update(m, layer, state)
            combine(m, layer, state, a)
        return state.h[k].value

    base = h_last(nf, ef)
    # layer 0 already sums neighbour features, so node 0 sees k + 1 hops
    far = k + 2
    nf2, ef2 = nf.copy(), ef.copy()
    nf2[far:] += 5.0
    ef2[far:] -= 3.0  # cable far joins nodes far and far + 1
    assert np.array_equal(h_last(nf2, ef2)[0], base[0])
    nf3 = nf.copy()
    nf3[k + 1] += 5.0
    assert not np.array_equal(h_last(nf3, ef)[0], base[0])


# --- readout and forward ---------------------------------------------------------------

def test_readout_examples():
    b = batch_of(np.zeros((2, 1)), np.zeros((1, 1)), [(0, 1)])
    state = EmbeddingState([Var(np.array([[1.0, 2.0], [3.0, 4.0]]))], [])
    np.testing.assert_array_equal(readout(state, b, Pooling.SUM).value, [[4.0, 6.0]])
    np.testing.assert_array_equal(readout(state, b, Pooling.MEAN).value, [[2.0, 3.0]])
    np.testing.assert_array_equal(readout(state, b, Pooling.MAX).value, [[3.0, 4.0]])
    row = np.array([[0.5, -1.5]])
    b3 = batch_of(np.zeros((3, 1)), np.zeros((2, 1)), [(0, 1), (1, 2)])
    state = EmbeddingState([Var(np.repeat(row, 3, axis=0))], [])
    np.testing.assert_array_equal(readout(state, b3, Pooling.MEAN).value, row)
    np.testing.assert_array_equal(readout(state, b3, Pooling.SUM).value, 3 * row)


def test_sum_separates_multisets_mean_and_max_do_not():
    x, y = np.array([1.0, 0.0]), np.array([0.0, 2.0])
    big = GraphBatch.from_arrays([(np.zeros((4, 1)), np.zeros((3, 1)), [(0, 1), (1, 2), (2, 3)]),
                                  (np.zeros((2, 1)), np.zeros((1, 1)), [(0, 1)])])
    h = np.vstack([x, x, y, y, x, y])
    out = {p: readout(EmbeddingState([Var(h)], []), big, p).value for p in Pooling}
    assert np.array_equal(out[Pooling.MEAN][0], out[Pooling.MEAN][1])
    assert np.array_equal(out[Pooling.MAX][0], out[Pooling.MAX][1])
    assert not np.array_equal(out[Pooling.SUM][0], out[Pooling.SUM][1])


def test_readout_concatenates_all_layers(toy_samples):
    m = random_model(2, warm=toy_samples)
    b = GraphBatch.from_samples(toy_samples[:3], m.scaler)
    state = embed_inputs(m, b)
    for layer in (1, 2):
        a = aggregate(b, state, layer)
        edge_update(m, layer, state)
        combine(m, layer, state, a)
    assert readout(state, b, Pooling.SUM).value.shape == (3, 3 * 16)


def relabel(sample, rng):
    g = sample.grid
    perm = rng.permutation(g.n_nodes)  # old -> new
    eperm = rng.permutation(g.n_edges)  # new -> old
    inv = np.argsort(perm)
    edges = [(int(perm[g.edges[e].endpoints[0]]), int(perm[g.edges[e].endpoints[1]])) for e in eperm]
    new_of_old_edge = np.argsort(eperm)
    grid = make_grid(
        g.n_nodes, edges, sources=[int(perm[s]) for s in g.sources], loads=g.loads[inv],
        impedance=g.impedances[eperm], nominal_current=g.nominal_currents[eperm],
        normally_open=[int(new_of_old_edge[e]) for e in g.normally_open],
        nominal_voltage=float(g.nominal_voltages[0]),
    )
    fs = FeatureSet(sample.features.node_features[inv], sample.features.edge_features[eperm])
    return LabeledSample(grid, fs, sample.label, sample.provenance)


@pytest.mark.parametrize("pooling", list(Pooling))
def test_forward_permutation_invariant(toy_samples, pooling):
    m = random_model(3, pooling=pooling, warm=toy_samples)
    rng = np.random.default_rng(7)
    for s in toy_samples:
        p = forward(m, s)
        assert 0.0 < p < 1.0
        assert abs(forward(m, relabel(s, rng)) - p) <= 1e-9


def test_duplicate_batch_matches_single(toy_samples):
    m = random_model(2, warm=toy_samples)
    s = toy_samples[2]
    single = m.predict([s])[0]
    dup = m.predict([s, s, s])
    assert dup[0] == dup[1] == dup[2]
    assert abs(dup[0] - single) <= 1e-12


@pytest.mark.parametrize("pooling", list(Pooling))
def test_gradient_check_toy(toy_samples, pooling):
    m = GinModel(GinConfig(k=2, pooling=pooling, seed=3))
    m.scaler = FeatureScaler.fit(toy_samples)
    b = GraphBatch.from_samples(toy_samples[:6], m.scaler)

    def loss(tape):
        return nn.bce_loss(m.forward(b, tape), b.labels.reshape(-1, 1), tape)

    assert nn.grad_check(loss, m.parameters(), n_samples=100) <= 1e-4


# --- training ----------------------------------------------------------------------------

def separable(n=20):
    rng = np.random.default_rng(8)
    out = []
    for i in range(n):
        g = random_small_grid(rng)
        s = sample_of(g, i % 2, f"sep{i}")
        nf = s.features.node_features.copy()
        nf[:, 0] = 1.0 if s.label else -1.0
        out.append(LabeledSample(g, FeatureSet(nf, s.features.edge_features), s.label, s.provenance, s.sample_id))
    return out


def test_separable_task_is_learned():
    data = separable()
    cfg = GinConfig(k=1, lr=1e-2, epochs=200, batch_size=10, seed=1)
    res = train(GinModel(cfg), data)
    accs = [r.accuracy for r in res.history if r.split == "train"]
    assert max(accs) == 1.0


def test_training_is_reproducible():
    data = separable(12)
    cfg = GinConfig(k=2, lr=1e-2, epochs=3, batch_size=4, seed=5)
    a = train(GinModel(cfg), data[:8], data[8:])
    b = train(GinModel(cfg), data[:8], data[8:])
    assert a.history_csv() == b.history_csv()
    assert a.history_csv().splitlines()[0] == "epoch,split,loss,accuracy,auc"
    assert {r.split for r in a.history} == {"train", "val"}
    assert 1 <= a.best_epoch <= 3


def test_training_rejects_overlap_and_divergence():
    data = separable(6)
    cfg = GinConfig(k=1, epochs=1, batch_size=3)
    with pytest.raises(ValueError):
        train(GinModel(cfg), data, data[:2])
    m = GinModel(cfg)
    m.head.dense[-1].weight.value[:] = np.nan
    with pytest.raises(DivergenceError):
        train(m, data)


def test_batch_log_sees_every_training_sample():
    data = separable(6)
    seen = []
    train(GinModel(GinConfig(k=1, epochs=2, batch_size=4)), data, batch_log=seen.append)
    assert len(seen) == 4
    assert sorted(sum(seen[:2], [])) == sorted(s.sample_id for s in data)


# --- checkpoints -------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, toy_samples):
    m = random_model(3, warm=toy_samples)
    path = tmp_path / "m.json"
    save_checkpoint(m, path, adam=nn.AdamState(), rng_state={"x": 1})
    back = load_checkpoint(path)
    np.testing.assert_array_equal(back.predict(toy_samples), m.predict(toy_samples))
    save_checkpoint(back, tmp_path / "again.json", adam=nn.AdamState(), rng_state={"x": 1})
    assert (tmp_path / "again.json").read_bytes() == path.read_bytes()


def test_checkpoint_errors(tmp_path):
    m = GinModel(GinConfig(k=5))
    path = tmp_path / "m.json"
    save_checkpoint(m, path)
    text = path.read_text()
    (tmp_path / "cut.json").write_text(text[: len(text) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "cut.json")
    with pytest.raises(CheckpointError):
        load_checkpoint(path, GinConfig(k=15))
    (tmp_path / "v.json").write_text(text.replace('"version": 1', '"version": 99'))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "v.json")


def test_scaler_round_trip(toy_samples):
    sc = FeatureScaler.fit(toy_samples)
    back = FeatureScaler.from_dict(sc.to_dict())
    for a, b in zip(sc.transform(toy_samples[0].features), back.transform(toy_samples[0].features)):
        np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        FeatureScaler.fit([])
