import numpy as np
import pytest

from kgfewshot import _kernels, gsnn
from kgfewshot import numcore as nc
from kgfewshot.kgraph import KnowledgeGraph

import checks
from conftest import gsnn_store, random_graph, tiny_gsnn


def chain(n=4):
    g = KnowledgeGraph()
    for i in range(n):
        g.add_node(f"c{i}", "object", np.zeros(2))
    for i in range(n - 1):
        g.add_edge(i, i + 1)
    return g


def _set_importance(store, cfg, bias):
    for wn, bn in nc.mlp_param_names(cfg.importance_spec, "gsnn.imp"):
        store[wn].data[:] = 0.0
        store[bn].data[:] = 0.0
    store[bn].data[:] = bias


def test_config_validation():
    with pytest.raises(ValueError):
        gsnn.GsnnConfig(steps=0)
    with pytest.raises(ValueError):
        gsnn.GsnnConfig(gamma_imp=1.0)


def test_initial_hidden_carries_normalised_id():
    g = chain(4)
    h = gsnn.initial_hidden(g, [0, 3], 3)
    assert h.tolist() == [[0.0, 0, 0], [0.75, 0, 0]]


@pytest.mark.parametrize("steps", [1, 2, 3])
def test_chain_depth_matches_bfs_layers(steps):
    g = chain(5)
    cfg = tiny_gsnn(steps=steps)
    store = gsnn_store(g, cfg)
    _set_importance(store, cfg, 10.0)  # always expand
    with nc.no_grad():
        state, _ = gsnn.expand(g, np.ones((1, 3)), [0], store, cfg)
    assert sorted(state.active) == list(range(steps + 1))
    assert all(state.trace.step_of[i] == i for i in state.active)


def test_threshold_ties_are_not_expanded():
    g = chain(3)
    cfg = tiny_gsnn()
    store = gsnn_store(g, cfg)
    _set_importance(store, cfg, 0.0)  # every score exactly 0.5
    with nc.no_grad():
        state, _ = gsnn.expand(g, np.ones((1, 3)), [1], store, cfg)
    ids, scores = state.history[0].candidates, state.history[0].scores
    assert ids == [0, 2] and np.all(scores.data == 0.5)
    assert state.active == [1]


def test_no_neighbours_keeps_detections_only():
    g = KnowledgeGraph()
    g.add_node("a", "object", [0.0])
    g.add_node("b", "object", [0.0])
    cfg = tiny_gsnn(steps=1)
    with nc.no_grad():
        state, o = gsnn.expand(g, np.ones((1, 3)), ["a"], gsnn_store(g, cfg), cfg)
    assert state.active == [0] and o.shape == (1, cfg.out_width)


def test_max_over_parents(rng):
    g = KnowledgeGraph()
    for n in ("p", "q", "c"):
        g.add_node(n, "object", [0.0])
    g.add_edge(0, 2)
    g.add_edge(1, 2)
    cfg = tiny_gsnn()
    store = gsnn_store(g, cfg, seed=3)
    state = gsnn.init_state(g, [0, 1], cfg)
    state = gsnn.propagate_step(state, g, rng.normal(size=(1, 3)), store)
    ids, scores, parents = gsnn.importance_scores(state, g, store, cfg)
    assert ids == [2] and parents[2] == [0, 1]
    per_parent = []
    for p in (0, 1):
        feats = nc.concat_cols([nc.gather_rows(state.H, [state.row_of(p)]), gsnn.node_features(g, store, [2])])
        per_parent.append(nc.mlp_forward(cfg.importance_spec, store, feats, "gsnn.imp").item())
    assert scores.item() == max(per_parent)


def test_gated_update_matches_straight_line_oracle(rng):
    """Three nodes, width 4: one propagation step recomputed by hand."""
    g = random_graph(rng, n_obj=3, n_leaf=0, p=0.8)
    cfg = tiny_gsnn(hidden=4)
    store = gsnn_store(g, cfg, seed=5)
    for name in store.names("gsnn."):
        store[name].data[:] = rng.normal(size=store[name].shape)
    e = rng.normal(size=(1, cfg.image_width))
    state = gsnn.init_state(g, [0, 1, 2], cfg)
    out = gsnn.propagate_step(state, g, e, store)

    p = {n: store[f"gsnn.{n}"].data for n in gsnn.PROPAGATION_PARAMS}
    sig = lambda x: 1 / (1 + np.exp(-x))
    H = gsnn.initial_hidden(g, [0, 1, 2], 4)
    A = np.zeros((3, 3))
    for i in range(3):
        for j in g.neighbors(i, "both"):
            A[i, j] = 1.0
    a = A @ H + p["agg_bias"]
    z = sig(a @ p["Wz_a"] + H @ p["Wz_h"] + p["bz"])
    r = sig(a @ p["Wr_a"] + H @ p["Wr_h"] + p["br"])
    u = np.tanh(a @ p["Wu_a"] + (r * H) @ p["Wu_h"] + e @ p["We"] + p["bu"])
    np.testing.assert_allclose(out.H.data, (1 - z) * H + z * u, rtol=0, atol=1e-12)


@pytest.mark.parametrize("gate_bias", [-800.0, 800.0])
def test_update_gate_extremes(rng, gate_bias):
    """z = 0 keeps h; z = 1 replaces it with the candidate u."""
    g = random_graph(rng, n_obj=3, n_leaf=1)
    cfg = tiny_gsnn()
    store = gsnn_store(g, cfg)
    store["gsnn.Wz_a"].data[:] = 0
    store["gsnn.Wz_h"].data[:] = 0
    store["gsnn.bz"].data[:] = gate_bias
    e = rng.normal(size=(1, 3))
    state = gsnn.init_state(g, [0, 1], cfg)
    out = gsnn.propagate_step(state, g, e, store)
    if gate_bias < 0:
        np.testing.assert_array_equal(out.H.data, state.H.data)
    else:
        a = gsnn.neighborhood_vector(state, g, store).data
        ub = e @ store["gsnn.We"].data + store["gsnn.bu"].data
        p = {n: store[f"gsnn.{n}"].data for n in gsnn.PROPAGATION_PARAMS}
        _, _, _, u = _kernels.get_backend(_kernels.BACKEND).gated_forward(
            a, state.H.data, ub, p["Wz_a"], p["Wz_h"], p["bz"], p["Wr_a"], p["Wr_h"], p["br"],
            p["Wu_a"], p["Wu_h"])
        np.testing.assert_array_equal(out.H.data, u)


def test_expand_is_deterministic(rng):
    g = random_graph(rng)
    cfg = tiny_gsnn()
    e = rng.normal(size=(1, 3))
    runs = []
    for _ in range(2):
        store = gsnn_store(g, cfg, seed=9)
        with nc.no_grad():
            state, o = gsnn.expand(g, e, [0, 2], store, cfg)
        runs.append((list(state.active), state.trace.export(g), o.data.tobytes()))
    assert runs[0] == runs[1]


def test_image_conditioning_changes_output(rng):
    g = random_graph(rng)
    cfg = tiny_gsnn()
    store = gsnn_store(g, cfg)
    sched = [[], [], []]
    with nc.no_grad():
        _, o1 = gsnn.expand(g, rng.normal(size=(1, 3)), [0], store, cfg, schedule=sched)
        _, o2 = gsnn.expand(g, rng.normal(size=(1, 3)), [0], store, cfg, schedule=sched)
    assert np.max(np.abs(o1.data - o2.data)) > 0


def test_forced_node_joins_step_zero(rng):
    g = random_graph(rng)
    cfg = tiny_gsnn()
    with nc.no_grad():
        state, _ = gsnn.expand(g, rng.normal(size=(1, 3)), [0], gsnn_store(g, cfg), cfg, forced=[len(g) - 1])
    assert state.trace.step_of[len(g) - 1] == 0


def test_teacher_activates_labelled_candidates():
    g = chain(4)
    cfg = tiny_gsnn(steps=3)
    store = gsnn_store(g, cfg)
    _set_importance(store, cfg, -10.0)  # never expand on score alone
    with nc.no_grad():
        state, _ = gsnn.expand(g, np.ones((1, 3)), [0], store, cfg, teacher={1, 2})
    assert sorted(state.active) == [0, 1, 2]


def test_schedule_replay_reproduces_expansion(rng):
    g = random_graph(rng, n_obj=5, n_leaf=3, p=0.5)
    cfg = tiny_gsnn()
    store = gsnn_store(g, cfg, seed=4)
    e = rng.normal(size=(1, 3))
    with nc.no_grad():
        state, o = gsnn.expand(g, e, [0], store, cfg)
        replay, o2 = gsnn.expand(g, e, [0], store, cfg, schedule=gsnn.activation_schedule(state, cfg.steps))
    assert replay.active == state.active
    np.testing.assert_array_equal(o.data, o2.data)


@pytest.mark.parametrize("seed", [0, 1])
def test_gradients_of_search_and_classifier(seed):
    report = checks.gsnn_classifier_check(seed, steps=3, hidden=6)
    assert report.passed, str(report)


def test_invariants_small_battery():
    totals = checks.invariant_battery(60, start=5000)
    assert totals == dict.fromkeys(checks.INVARIANTS, 0)
