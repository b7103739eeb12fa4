"""Image-conditioned graph search network.

Alternates a gated propagation over the active subgraph with an importance
gate that activates neighbouring nodes, for ``steps`` rounds, then maps
every active node through the context network.

Conventions: hidden states are rows (``|active| x hidden``); a node's
feature block is ``[id / |N|, node bias, one-hot type]``; the importance of
a candidate with several active parents is the max over parents; ties at
the threshold are not expanded; nodes activated in round ``t`` are first
propagated in round ``t + 1``.
"""

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .kgraph import PartialGraph

NODE_FEATURES = 5
BIAS_PARAM = "kg.node_bias"


@dataclass(frozen=True)
class GsnnConfig:
    hidden: int = 8
    image_width: int = 16
    steps: int = 3
    gamma_imp: float = 0.5
    out_width: int = 8
    importance_hidden: int = 32
    context_hidden: int = 16

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if min(self.hidden, self.image_width, self.out_width,
               self.importance_hidden, self.context_hidden) < 1:
            raise ValueError("widths must be >= 1")
        if not 0.0 < self.gamma_imp < 1.0:
            raise ValueError("gamma_imp must lie in (0, 1)")

    @property
    def importance_spec(self):
        return nc.MlpSpec((self.hidden + NODE_FEATURES, self.importance_hidden, 1), "tanh", "sigmoid")

    @property
    def context_spec(self):
        return nc.MlpSpec((self.hidden + NODE_FEATURES, self.context_hidden, self.out_width), "tanh", "tanh")


PROPAGATION_PARAMS = ("agg_bias", "Wz_a", "Wz_h", "bz", "Wr_a", "Wr_h", "br",
                      "Wu_a", "Wu_h", "bu", "We")


def propagation_param_names():
    return [f"gsnn.{n}" for n in PROPAGATION_PARAMS]


def init_params(store, cfg, n_nodes, rng, node_bias=None):
    F, v = cfg.hidden, cfg.image_width
    store.add("gsnn.agg_bias", np.zeros((1, F)))
    for gate in ("z", "r", "u"):
        store.add(f"gsnn.W{gate}_a", nc.uniform_init(rng, F, (F, F)))
        store.add(f"gsnn.W{gate}_h", nc.uniform_init(rng, F, (F, F)))
        store.add(f"gsnn.b{gate}", nc.uniform_init(rng, F, (1, F)))
    store.add("gsnn.We", nc.uniform_init(rng, v, (v, F)))
    nc.mlp_init(cfg.importance_spec, store, "gsnn.imp", rng)
    nc.mlp_init(cfg.context_spec, store, "gsnn.ctx", rng)
    bias = np.zeros((n_nodes, 1)) if node_bias is None else np.asarray(node_bias, dtype=np.float64).reshape(-1, 1)
    store.add(BIAS_PARAM, bias)


@dataclass
class ImportanceRecord:
    step: int
    candidates: list
    scores: object  # Tensor (len(candidates) x 1) or None
    parents: dict


@dataclass
class ExpansionState:
    active: list
    H: object  # Tensor
    trace: PartialGraph
    step: int = 0
    history: list = field(default_factory=list)
    last_gates: tuple = ()

    def row_of(self, nid):
        return self.active.index(nid)


def node_features(g, store, ids):
    """``[id/|N|, b_n, one-hot type]`` rows for ``ids``; bias is differentiable."""
    ids = list(ids)
    n = max(len(g), 1)
    xv = np.array([[i / n] for i in ids]).reshape(len(ids), 1)
    types = np.zeros((len(ids), 3))
    for k, i in enumerate(ids):
        types[k] = g.nodes[i].ntype.one_hot
    bias = nc.gather_rows(store[BIAS_PARAM], ids)
    return nc.concat_cols([nc.Tensor(xv), bias, nc.Tensor(types)])


def initial_hidden(g, ids, width):
    h = np.zeros((len(ids), width))
    n = max(len(g), 1)
    for k, i in enumerate(ids):
        h[k, 0] = i / n
    return h


def init_state(g, detections, cfg, forced=()):
    ids = sorted({g.id_of(d) if isinstance(d, str) else int(d) for d in detections}
                 | {g.id_of(d) if isinstance(d, str) else int(d) for d in forced})
    trace = PartialGraph()
    for nid in ids:
        trace.activate(nid, 0)
    return ExpansionState(active=ids, H=nc.Tensor(initial_hidden(g, ids, cfg.hidden)), trace=trace)


def neighborhood_vector(state, g, store):
    adj = nc.Tensor(g.adjacency_rows(state.active))
    return nc.add(nc.matmul(adj, state.H), store["gsnn.agg_bias"])


def propagate_step(state, g, e_img, store):
    if not state.active:
        return state
    e_img = nc.as_tensor(e_img)
    a = neighborhood_vector(state, g, store)
    ub = nc.add(nc.matmul(e_img, store["gsnn.We"]), store["gsnn.bu"])
    p = {n: store[f"gsnn.{n}"] for n in PROPAGATION_PARAMS}
    h_new, z, r = nc.gated_update(a, state.H, ub, p["Wz_a"], p["Wz_h"], p["bz"],
                                  p["Wr_a"], p["Wr_h"], p["br"], p["Wu_a"], p["Wu_h"])
    return ExpansionState(active=list(state.active), H=h_new, trace=state.trace,
                          step=state.step, history=state.history, last_gates=(z, r))


def importance_scores(state, g, store, cfg, score_active=()):
    """Score every inactive neighbour of the active set.

    ``score_active`` lists active nodes to score as well (against their other
    active neighbours); used to give forcibly activated nodes a target.
    Returns ``(ids, scores, parents)`` with ids ascending.
    """
    active_pos = {nid: i for i, nid in enumerate(state.active)}
    cand_parents = {}
    for nid in state.active:
        for other in g.neighbors(nid, "both"):
            if other not in active_pos:
                cand_parents.setdefault(other, []).append(nid)
    for nid in score_active:
        parents = [p for p in g.neighbors(nid, "both") if p in active_pos and p != nid]
        if parents:
            cand_parents[nid] = parents
    ids = sorted(cand_parents)
    if not ids:
        return [], None, {}
    parent_rows, cand_rows, seg = [], [], []
    for k, c in enumerate(ids):
        ps = sorted(cand_parents[c])
        cand_parents[c] = ps
        for p in ps:
            parent_rows.append(active_pos[p])
            cand_rows.append(c)
            seg.append(k)
    feats = nc.concat_cols([nc.gather_rows(state.H, parent_rows), node_features(g, store, cand_rows)])
    pair_scores = nc.mlp_forward(cfg.importance_spec, store, feats, "gsnn.imp")
    scores = nc.segment_max(pair_scores, seg, len(ids))
    return ids, scores, {c: cand_parents[c] for c in ids}


def activate(state, g, cfg, new_ids, parents, step):
    new_ids = [n for n in sorted(set(new_ids)) if n not in state.trace.step_of]
    if not new_ids:
        return state
    for nid in new_ids:
        state.trace.activate(nid, step, parents.get(nid, ()))
    H = nc.concat_rows([state.H, nc.Tensor(initial_hidden(g, new_ids, cfg.hidden))])
    return ExpansionState(active=state.active + new_ids, H=H, trace=state.trace, step=state.step,
                          history=state.history, last_gates=state.last_gates)


def context_output(state, g, store, cfg):
    feats = nc.concat_cols([state.H, node_features(g, store, state.active)])
    return nc.mlp_forward(cfg.context_spec, store, feats, "gsnn.ctx")


def expand(g, e_img, detections, store, cfg, forced=(), teacher=None, schedule=None, steps=None):
    """Run the full search; returns ``(state, O_final)``.

    ``forced`` nodes join the step-0 set. ``teacher`` (a set of node ids)
    additionally activates every candidate it contains. ``schedule`` replays
    a fixed list of per-round activations instead of thresholding, which
    makes the computation smooth in all parameters (used by gradient checks).
    """
    steps = cfg.steps if steps is None else steps
    state = init_state(g, detections, cfg, forced)
    forced_ids = sorted({g.id_of(f) if isinstance(f, str) else int(f) for f in forced})
    for t in range(1, steps + 1):
        state = propagate_step(state, g, e_img, store)
        state.step = t
        ids, scores, parents = importance_scores(state, g, store, cfg,
                                                 score_active=forced_ids if t == 1 else ())
        state.history.append(ImportanceRecord(t, ids, scores, parents))
        if schedule is not None:
            chosen = list(schedule[t - 1]) if t - 1 < len(schedule) else []
        else:
            chosen = []
            if ids:
                vals = scores.data[:, 0]
                chosen = [c for c, s in zip(ids, vals) if s > cfg.gamma_imp]
                if teacher is not None:
                    chosen += [c for c in ids if c in teacher]
        chosen = [c for c in chosen if c not in state.trace.step_of]
        state = activate(state, g, cfg, chosen, parents, t)
    return state, context_output(state, g, store, cfg)


def activation_schedule(state, steps):
    """Per-round activations of a finished expansion, for replay."""
    return [state.trace.nodes_at(t) for t in range(1, steps + 1)]
