import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kgfewshot.evalkit import metrics as M
from kgfewshot.evalkit import world as W

import oracles


def _instance(rng, n=20, m=8, ties=True):
    scores = rng.random((n, m))
    if ties:
        scores = np.round(scores, 1)
    truths = (rng.random((n, m)) < 0.3).astype(float)
    return scores, truths


def test_worked_example():
    ap = M.average_precision([0.9, 0.8, 0.7], [1, 0, 1])
    assert ap == pytest.approx(0.5 * (1 + 2 / 3), abs=1e-12)
    assert round(ap, 4) == 0.8333


def test_perfect_ranking_scores_one():
    s = np.array([[0.9, 0.1], [0.8, 0.7], [0.1, 0.9]])
    t = np.array([[1, 0], [1, 1], [0, 1]], float)
    assert M.mean_ap(s, t) == 1.0 and M.macro_ap(s, t) == 1.0
    assert M.top_k(s, t, 1) == 1.0


def test_ties_break_by_index():
    # the positive at index 1 loses the tie to index 0
    assert M.average_precision([0.5, 0.5], [0, 1]) == 0.5
    assert M.average_precision([0.5, 0.5], [1, 0]) == 1.0


def test_undefined_ap_excluded():
    s = np.array([[0.3, 0.2], [0.1, 0.9]])
    t = np.array([[1, 0], [0, 0]], float)
    assert np.isnan(M.per_label_ap(s, t)[1])
    assert M.mean_ap(s, t) == 1.0
    with pytest.raises(M.MetricError):
        M.average_precision([0.1], [0])
    rep = M.evaluate(s, t, ["a", "b"])
    assert rep.undefined == ["b"] and "b\tundefined" in rep.to_text()


def test_topk_pads_missing_slots():
    s = np.array([[0.9, 0.1]])
    t = np.array([[1, 1]], float)
    assert M.top_k(s, t, 4) == 0.5


def test_input_validation():
    with pytest.raises(M.MetricError):
        M.mean_ap(np.ones((2, 2)), np.ones((2, 3)))
    with pytest.raises(M.MetricError):
        M.mean_ap(np.ones((2, 2)), np.full((2, 2), 0.5))
    with pytest.raises(M.MetricError):
        M.top_k(np.ones((1, 2)), np.ones((1, 2)), 0)


@pytest.mark.parametrize("seed", range(20))
def test_metrics_match_rank_scan(seed):
    rng = np.random.default_rng(seed)
    s, t = _instance(rng)
    groups = [j % 3 for j in range(s.shape[1])]
    assert M.mean_ap(s, t) == pytest.approx(oracles.oracle_mean_ap(s.tolist(), t.tolist()), abs=1e-9)
    assert M.macro_ap(s, t, groups) == pytest.approx(
        oracles.oracle_macro_ap(s.tolist(), t.tolist(), groups), abs=1e-9)
    for k in (1, 3, 10):
        assert M.top_k(s, t, k) == pytest.approx(oracles.oracle_top_k(s.tolist(), t.tolist(), k), abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0]), st.booleans()), min_size=1, max_size=12))
def test_ap_property(pairs):
    scores = [p[0] for p in pairs]
    truths = [float(p[1]) for p in pairs]
    ref = oracles.rank_scan_ap(scores, truths)
    if ref is None:
        with pytest.raises(M.MetricError):
            M.average_precision(scores, truths)
    else:
        assert M.average_precision(scores, truths) == pytest.approx(ref, abs=1e-12)
        assert 0.0 < ref <= 1.0


# --- synthetic world ----------------------------------------------------------------

SMALL = W.SyntheticWorldSpec(n_objects=8, n_attributes=4, n_affordances=2, n_contexts=2,
                             n_train=30, n_val=5, n_test=10, n_holdout=2)


def test_spec_validation():
    with pytest.raises(W.WorldSpecError):
        W.SyntheticWorldSpec(n_objects=0).validate()
    with pytest.raises(W.WorldSpecError):
        W.SyntheticWorldSpec(recall=0.0).validate()
    with pytest.raises(W.WorldSpecError):
        W.SyntheticWorldSpec(n_objects=3, n_contexts=4).validate()


@pytest.mark.parametrize("seed", range(25))
def test_world_invariants(seed):
    w = W.generate_world(SMALL.with_overrides(seed=seed))
    g = w.graph
    g.validate()
    assert all(not g.nodes[s].ntype.is_leaf for s, _ in g.edges)
    assert len(w.novel) == 2 and all(not g.node(n).ntype.is_leaf for n in w.novel)
    for b in w.splits["train"]:
        assert set(b.detections) <= set(b.labels)
        assert not set(b.detections) & set(w.novel)
        assert oracles.closure_oracle(g, b.labels) == set(b.labels)
        assert np.all(np.isfinite(b.e_img)) and b.patches.shape == (SMALL.n_patches, SMALL.latent_width)
    assert all(not set(w.novel) & set(b.labels) for b in w.base_split("train"))
    assert all(not set(w.novel) & set(b.labels) for b in w.clean_split("train"))
    assert len(w.base_split("train")) == SMALL.n_train
    assert len(w.base_graph()) == len(g) - 2


def test_noise_free_detector_sees_every_object():
    w = W.generate_world(SMALL.with_overrides(noise=0.0, recall=1.0, n_holdout=0, seed=3))
    for b in w.splits["train"]:
        objs = {n for n in b.labels if not w.graph.node(n).ntype.is_leaf}
        assert set(b.detections) == objs


def test_label_closure_matches_oracle(rng):
    w = W.generate_world(SMALL.with_overrides(seed=11))
    names = w.graph.names()
    for _ in range(50):
        seeds = list(rng.choice(names, size=int(rng.integers(1, 4)), replace=False))
        assert W.label_closure(w.graph, seeds) == oracles.closure_oracle(w.graph, seeds)


def test_generation_is_deterministic(tmp_path):
    a = W.generate_world(SMALL.with_overrides(seed=5))
    b = W.generate_world(SMALL.with_overrides(seed=5))
    pa, pb = W.save_world(a, tmp_path / "a"), W.save_world(b, tmp_path / "b")
    for key in pa:
        assert open(pa[key], "rb").read() == open(pb[key], "rb").read()


def test_world_round_trip(tmp_path):
    w = W.generate_world(SMALL.with_overrides(seed=2))
    W.save_world(w, tmp_path, header="# test header\n")
    back = W.load_world(tmp_path)
    assert back.novel == w.novel and back.graph.serialize() == w.graph.serialize()
    for split in w.splits:
        for x, y in zip(w.splits[split], back.splits[split]):
            assert x.to_json() == y.to_json()


def test_pool_prefers_bundles_without_other_novel_concepts():
    w = W.generate_world(SMALL.with_overrides(seed=4))
    for c in w.novel:
        flags = [bool((set(w.novel) - {c}) & set(b.labels)) for b in w.pool("train", c)]
        assert flags == sorted(flags)


def test_bad_bundle_file(tmp_path):
    w = W.generate_world(SMALL.with_overrides(seed=1))
    path = tmp_path / "b.jsonl"
    b = w.splits["train"][0]
    broken = W.FeatureBundle(b.id, b.e_img, b.detections, [b.labels[0]] if len(b.labels) > 1 else [], b.patches)
    W.save_bundles(path, [broken])
    if W.label_closure(w.graph, broken.labels) != set(broken.labels) or set(broken.detections) - set(broken.labels):
        with pytest.raises(W.BundleFormatError):
            W.load_bundles(path, w.graph)
    path.write_text("{not json\n")
    with pytest.raises(W.BundleFormatError):
        W.load_bundles(path)
