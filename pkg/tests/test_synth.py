import filecmp

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from n1gin.flow import compute_features, label_n1
from n1gin.grid import LabeledSample, Provenance, k_hop_neighborhood, make_grid, validate_grid
from n1gin.synth import (
    Action, AugmentationRecord, GeneratorConfig, NoCandidatesError, augment, build_dataset,
    default_locations, generate_grid, load_dataset, select_candidates,
)

SMALL = GeneratorConfig(location="small", n_samples=6, node_count_range=(12, 18), sources_range=(1, 2))


def sample_of(grid, sid="s0"):
    return LabeledSample(grid, compute_features(grid), label_n1(grid).label, Provenance.GENERATED, sid, "x")


@pytest.fixture(scope="module")
def generated():
    return [generate_grid(SMALL, s, target_label=s % 2) for s in range(8)]


def same_dirs(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.diff_files or cmp.funny_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors and all(same_dirs(a / d, b / d) for d in cmp.common_dirs)


# --- configuration ---------------------------------------------------------------

def test_config_rejects_empty_ranges():
    with pytest.raises(ValueError):
        GeneratorConfig(node_count_range=(10, 5))
    with pytest.raises(ValueError):
        GeneratorConfig(balance=1.0)
    with pytest.raises(ValueError):
        GeneratorConfig(sources_range=(0, 1))


def test_config_round_trip():
    for cfg in default_locations(10, seed=3):
        assert GeneratorConfig.from_dict(cfg.to_dict()) == cfg


# --- generation -------------------------------------------------------------------

def test_generation_is_deterministic():
    a, b = generate_grid(SMALL, 42), generate_grid(SMALL, 42)
    assert a.grid == b.grid and a.label == b.label
    np.testing.assert_array_equal(a.features.node_features, b.features.node_features)


def test_generated_grids_are_valid_and_labelled(generated):
    for i, s in enumerate(generated):
        assert validate_grid(s.grid).ok
        assert s.label == i % 2 == label_n1(s.grid).label
        assert SMALL.node_count_range[0] <= s.grid.n_nodes <= SMALL.node_count_range[1] + 2 * 3


def test_no_ties_means_not_n1():
    cfg = GeneratorConfig(node_count_range=(12, 18), sources_range=(1, 1), tie_switch_count=(0, 0))
    for seed in range(6):
        s = generate_grid(cfg, seed)
        assert not s.grid.normally_open and s.label == 0


def test_ample_capacity_means_n1():
    cfg = GeneratorConfig(node_count_range=(12, 18), sources_range=(1, 2), capacity_margin=(10, 10),
                          impedance_ohm=(0.01, 0.02), extra_ties=(1, 2))
    for seed in range(6):
        s = generate_grid(cfg, seed)
        assert s.label == 1 == label_n1(s.grid).label


# --- candidates --------------------------------------------------------------------

def test_triangle_every_edge_splittable(triangle):
    s = sample_of(triangle)
    assert s.label == 1
    assert {c.index for c in select_candidates(s) if c.kind == "split"} == {0, 1, 2}


def test_sole_station_feeders_have_no_candidates(star):
    s = sample_of(star)
    assert s.label == 0
    with pytest.raises(NoCandidatesError):
        select_candidates(s)


def test_label0_candidates_are_leaves(generated):
    for s in generated:
        if s.label:
            continue
        for c in select_candidates(s):
            assert c.kind == "remove"
            assert not s.grid.nodes[c.index].is_source


# --- augmentation ---------------------------------------------------------------------

def test_remove_leaf_keeps_other_rows():
    g = make_grid(3, [(0, 1), (1, 2)], loads=[0, 50, 60])
    s = sample_of(g)
    out, rec = augment(s, 0)
    assert rec.action is Action.REMOVE_NODES and rec.affected == (2,)
    assert out.grid.n_nodes == 2 and out.label == 0 and rec.label_verified
    np.testing.assert_array_equal(out.features.node_features[:, :3], s.features.node_features[:2, :3])
    np.testing.assert_array_equal(out.features.edge_features, s.features.edge_features[:1])
    assert out.features.node_features[1, 3] == 1


def test_split_uniform_impedance(triangle):
    g = make_grid(3, [(0, 1), (1, 2), (0, 2)], loads=[0, 105, 105], impedance=0.5, normally_open={2})
    s = sample_of(g)
    for seed in range(5):
        out, rec = augment(s, seed)
        assert rec.action is Action.ADD_NODES
        np.testing.assert_allclose(out.grid.impedances, 0.5)
        np.testing.assert_allclose(out.features.edge_features[:, 0], 0.5)


def test_zero_load_leaf_keeps_n1():
    g = make_grid(3, [(0, 1), (1, 2), (0, 2)], loads=[0, 0, 105], normally_open={2})
    s = sample_of(g)
    assert any(c.kind == "attach" and c.index == 1 for c in select_candidates(s))
    for seed in range(10):
        out, rec = augment(s, seed)
        assert rec.label_verified and label_n1(out.grid).label == 1


def test_record_needs_affected_nodes():
    with pytest.raises(ValueError):
        AugmentationRecord("x", Action.ADD_NODES, (), True)


@settings(max_examples=30)
@given(st.integers(0, 7), st.integers(0, 2**32 - 1))
def test_augmentation_invariants(generated, idx, seed):
    s = generated[idx]
    out, rec = augment(s, seed)
    g0, g1 = s.grid, out.grid
    assert validate_grid(g1).ok
    assert out.provenance is Provenance.AUGMENTED and out.label == s.label
    np.testing.assert_array_equal(out.features.node_features[:, 3], g1.degrees)
    if s.label == 1:
        assert rec.action is Action.ADD_NODES
        assert g1.n_nodes == g0.n_nodes + len(rec.affected)
        assert sum(st_.load for st_ in g1.nodes) == sum(st_.load for st_ in g0.nodes)
        nf = out.features.node_features
        lo, hi = s.features.node_features.min(axis=0), s.features.node_features.max(axis=0)
        for x in rec.affected:
            assert np.all(nf[x, :3] >= lo[:3] - 1e-9) and np.all(nf[x, :3] <= hi[:3] + 1e-9)
        if len(rec.affected) == 1:
            x = rec.affected[0]
            ball, _ = k_hop_neighborhood(g1, x, 2)
            pool = nf[sorted(ball - {x}), :3]
            assert np.all(nf[x, :3] >= pool.min(axis=0) - 1e-9)
            assert np.all(nf[x, :3] <= pool.max(axis=0) + 1e-9)
    else:
        assert rec.action is Action.REMOVE_NODES
        assert g1.n_nodes == g0.n_nodes - len(rec.affected)
        keep = [v for v in range(g0.n_nodes) if v not in rec.affected]
        np.testing.assert_array_equal(out.features.node_features[:, :3], s.features.node_features[keep, :3])


def test_augmentation_is_deterministic(generated):
    a, ra = augment(generated[1], 9)
    b, rb = augment(generated[1], 9)
    assert a.grid == b.grid and ra == rb


# --- datasets -----------------------------------------------------------------------------

@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    cfgs = [GeneratorConfig(location="a", n_samples=10, node_count_range=(10, 14), sources_range=(1, 1)),
            GeneratorConfig(location="b", n_samples=10, node_count_range=(14, 18), sources_range=(1, 2))]
    manifest, samples = build_dataset(cfgs, root / "one", seed=5)
    return cfgs, root, manifest, samples


def test_dataset_shape(dataset):
    _, _, manifest, samples = dataset
    assert len(manifest.entries) == len(samples) == 40
    aug = [e for e in manifest.entries if e.provenance is Provenance.AUGMENTED]
    assert len(aug) == 20
    assert np.mean([e.label for e in manifest.entries]) == 0.5
    test = [e for e in manifest.entries if e.split == "test"]
    assert test and all(e.provenance is Provenance.GENERATED for e in test)
    test_ids = {e.id for e in test}
    for e in aug:
        assert (e.split == "excluded") == (e.source_id in test_ids)
    assert "label histogram: n-1 0.50" in manifest.summary_table()


def test_dataset_files_and_reload(dataset):
    _, root, manifest, samples = dataset
    d = root / "one"
    assert (d / "manifest.json").exists() and (d / "labels.csv").exists()
    header = (d / "labels.csv").read_text().splitlines()[0]
    assert header == "id,label,provenance"
    m2, loaded = load_dataset(d)
    assert [e.id for e in m2.entries] == [e.id for e in manifest.entries]
    for s in samples:
        t = loaded[s.sample_id]
        assert t.grid == s.grid and t.label == s.label
        np.testing.assert_array_equal(t.features.edge_features, s.features.edge_features)


def test_dataset_bytes_reproducible(dataset):
    cfgs, root, _, _ = dataset
    build_dataset(cfgs, root / "two", seed=5)
    assert same_dirs(root / "one", root / "two")


def test_workers_do_not_change_output(dataset):
    cfgs, root, _, _ = dataset
    build_dataset(cfgs, root / "par", seed=5, workers=2)
    assert same_dirs(root / "one", root / "par")
