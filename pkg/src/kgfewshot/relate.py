"""Relation prediction transformer.

A concept's word embedding queries a sequence built from image patches
(a CLS position followed by one projected patch per row). After ``layers``
pre-norm cross-attention + MLP blocks, the layer-normalised CLS row is the
concept's image-conditioned embedding. A pair MLP over concatenated
embeddings gives a directed edge likelihood.

Several concepts can be embedded against the same patches at once; their
sequences are stacked row-wise (``m * (P + 1)`` rows).
"""

import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .numcore.tensor import _result, softmax_np


class MissingPatchesError(ValueError):
    pass


@dataclass(frozen=True)
class RelateConfig:
    layers: int = 1
    heads: int = 2
    n_patches: int = 4
    patch_width: int = 16
    latent: int = 32
    beta: int = 2
    word_width: int = 16
    mlp_hidden: int = 64
    pair_hidden: int = 64
    gamma_rel: float = 0.5
    k_object: int = 0  # 0 = unlimited
    k_leaf: int = 3

    def __post_init__(self):
        if self.layers < 1 or self.heads < 1:
            raise ValueError("layers and heads must be >= 1")
        if self.latent % self.beta:
            raise ValueError("latent width must be divisible by beta")
        if not 0.0 < self.gamma_rel < 1.0:
            raise ValueError("gamma_rel must lie in (0, 1)")

    @property
    def head_dim(self):
        return self.latent // self.beta

    @property
    def mlp_spec(self):
        return nc.MlpSpec((self.latent, self.mlp_hidden, self.latent), "tanh", "identity")

    @property
    def pair_spec(self):
        return nc.MlpSpec((2 * self.latent, self.pair_hidden, 1), "tanh", "sigmoid")

    def k_for(self, ntype):
        k = self.k_leaf if ntype.is_leaf else self.k_object
        return None if k <= 0 else k


@dataclass(frozen=True)
class EdgeProposal:
    source: int
    target: int
    likelihood: float


def init_params(store, cfg, rng):
    Fl, hd = cfg.latent, cfg.head_dim * cfg.heads
    store.add("relate.E", nc.uniform_init(rng, cfg.patch_width, (cfg.patch_width, Fl)))
    store.add("relate.P", rng.normal(0.0, 0.02, size=(cfg.n_patches + 1, Fl)))
    for l in range(cfg.layers):
        p = f"relate.l{l}"
        store.add(f"{p}.ln1_g", np.ones((1, Fl)))
        store.add(f"{p}.ln1_b", np.zeros((1, Fl)))
        store.add(f"{p}.Wkv", nc.uniform_init(rng, Fl, (Fl, 2 * hd)))
        store.add(f"{p}.Wq", nc.uniform_init(rng, cfg.word_width, (cfg.word_width, hd)))
        store.add(f"{p}.Wo", nc.uniform_init(rng, hd, (hd, Fl)))
        store.add(f"{p}.ln2_g", np.ones((1, Fl)))
        store.add(f"{p}.ln2_b", np.zeros((1, Fl)))
        nc.mlp_init(cfg.mlp_spec, store, f"{p}.mlp", rng)
    store.add("relate.lnf_g", np.ones((1, Fl)))
    store.add("relate.lnf_b", np.zeros((1, Fl)))
    nc.mlp_init(cfg.pair_spec, store, "relate.rel", rng)


def embed_patches(patches, store, cfg):
    """``(P+1) x F_l`` sequence: CLS = positional row 0, then ``I_P[i] E + P[i+1]``."""
    patches = nc.as_tensor(patches)
    if patches.shape != (cfg.n_patches, cfg.patch_width):
        raise nc.DimensionError(f"patches {patches.shape} != ({cfg.n_patches}, {cfg.patch_width})")
    proj = nc.matmul(patches, store["relate.E"])
    pos = store["relate.P"]
    cls = nc.gather_rows(pos, [0])
    rest = nc.add(proj, nc.gather_rows(pos, list(range(1, cfg.n_patches + 1))))
    return nc.concat_rows([cls, rest])


def attention_weights_np(q, k, head_dim):
    """Softmax weights of one query row against key rows."""
    return softmax_np((q @ k.T) / math.sqrt(head_dim))


def grouped_cross_attention(q, kv, heads, head_dim, seq_len):
    """Multi-head attention of query ``g`` against sequence ``g``.

    ``q``: ``m x (heads*D)``; ``kv``: ``(m*seq_len) x (2*heads*D)`` with keys
    in the first half. Returns ``(m x heads*D, weights m x heads x seq_len)``.
    """
    m = q.rows
    qd = q.data.reshape(m, heads, head_dim)
    kvd = kv.data.reshape(m, seq_len, 2, heads, head_dim)
    k = kvd[:, :, 0]  # m, s, h, D
    v = kvd[:, :, 1]
    scale = 1.0 / math.sqrt(head_dim)
    logits = np.einsum("mhd,mshd->mhs", qd, k) * scale
    logits -= logits.max(axis=2, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=2, keepdims=True)
    out = np.einsum("mhs,mshd->mhd", w, v).reshape(m, heads * head_dim)

    def bw(g):
        gd = g.reshape(m, heads, head_dim)
        dw = np.einsum("mhd,mshd->mhs", gd, v)
        dv = np.einsum("mhs,mhd->mshd", w, gd)
        dlog = w * (dw - (dw * w).sum(axis=2, keepdims=True)) * scale
        dq = np.einsum("mhs,mshd->mhd", dlog, k).reshape(m, heads * head_dim)
        dk = np.einsum("mhs,mhd->mshd", dlog, qd)
        dkv = np.stack([dk, dv], axis=2).reshape(m * seq_len, 2 * heads * head_dim)
        return (dq, dkv)

    return _result(out, (q, kv), bw), w


def cross_attention_block(Z, words, store, cfg, layer):
    """One block for ``m`` stacked sequences; ``words`` is ``m x F_w``."""
    p = f"relate.l{layer}"
    words = nc.as_tensor(words)
    seq = cfg.n_patches + 1
    normed = nc.layernorm(Z, store[f"{p}.ln1_g"], store[f"{p}.ln1_b"])
    kv = nc.matmul(normed, store[f"{p}.Wkv"])
    q = nc.matmul(words, store[f"{p}.Wq"])
    att, weights = grouped_cross_attention(q, kv, cfg.heads, cfg.head_dim, seq)
    merged = nc.matmul(att, store[f"{p}.Wo"])
    Z1 = nc.add(Z, nc.repeat_rows(merged, seq))
    h = nc.layernorm(Z1, store[f"{p}.ln2_g"], store[f"{p}.ln2_b"])
    Z2 = nc.add(Z1, nc.mlp_forward(cfg.mlp_spec, store, h, f"{p}.mlp"))
    return Z2, weights


def concept_embeddings(patches, words, store, cfg):
    """Embeddings ``m x F_l`` for the ``m`` word vectors against one image."""
    words = nc.as_tensor(words)
    m = words.rows
    seq = cfg.n_patches + 1
    base = embed_patches(patches, store, cfg)
    Z = nc.concat_rows([base] * m) if m > 1 else base
    for layer in range(cfg.layers):
        Z, _ = cross_attention_block(Z, words, store, cfg, layer)
    cls = nc.gather_rows(Z, [i * seq for i in range(m)])
    return nc.layernorm(cls, store["relate.lnf_g"], store["relate.lnf_b"])


def concept_embedding(patches, word, store, cfg):
    return concept_embeddings(patches, nc.as_tensor(word), store, cfg)


def edge_likelihood(e_src, e_dst, store, cfg):
    """Likelihood rows for paired embedding rows (source first)."""
    return nc.mlp_forward(cfg.pair_spec, store, nc.concat_cols([e_src, e_dst]), "relate.rel")


def candidate_pairs(g, novel_id, pool):
    """Direction-legal (src, dst) pairs between the novel node and ``pool``."""
    novel = g.nodes[novel_id]
    pairs = []
    for nid in sorted(set(pool)):
        if nid == novel_id:
            continue
        if g.nodes[nid].ntype.is_leaf is False:
            pairs.append((nid, novel_id))
        if not novel.ntype.is_leaf:
            pairs.append((novel_id, nid))
    return pairs


def score_pairs_in_bundle(g, pairs, patches, store, cfg):
    """Likelihood of each pair given one image's patches."""
    if not pairs:
        return np.zeros(0)
    ids = sorted({i for p in pairs for i in p})
    pos = {nid: k for k, nid in enumerate(ids)}
    words = np.stack([g.nodes[i].embedding for i in ids])
    with nc.no_grad():
        emb = concept_embeddings(patches, words, store, cfg)
        src = nc.gather_rows(emb, [pos[s] for s, _ in pairs])
        dst = nc.gather_rows(emb, [pos[d] for _, d in pairs])
        return edge_likelihood(src, dst, store, cfg).data[:, 0].copy()


def select_proposals(scores, cfg, k):
    """Threshold and truncate a ``{(src, dst): p}`` map deterministically."""
    kept = [EdgeProposal(s, d, p) for (s, d), p in scores.items() if p > cfg.gamma_rel]
    kept.sort(key=lambda e: (-e.likelihood, e.source, e.target))
    return kept if k is None else kept[:k]


def propose_edges(g, novel_id, bundles, pools, store, cfg, k="auto"):
    """Edge proposals for a node already added to ``g``.

    ``pools[i]`` is the set of node ids in bundle ``i``'s partial graph.
    Pair likelihoods are max-aggregated across bundles.
    """
    best = {}
    for bundle, pool in zip(bundles, pools):
        if bundle.patches is None:
            raise MissingPatchesError(f"bundle {bundle.id!r} has no patch matrix")
        pairs = candidate_pairs(g, novel_id, pool)
        for pair, p in zip(pairs, score_pairs_in_bundle(g, pairs, bundle.patches, store, cfg)):
            if p > best.get(pair, -1.0):
                best[pair] = float(p)
    if k == "auto":
        k = cfg.k_for(g.nodes[novel_id].ntype)
    return select_proposals(best, cfg, k)


def export_proposals(g, proposals):
    lines = ["# source\ttarget\tlikelihood"]
    for e in sorted(proposals, key=lambda e: (-e.likelihood, e.source, e.target)):
        lines.append(f"{g.nodes[e.source].name}\t{g.nodes[e.target].name}\t{e.likelihood!r}")
    return "\n".join(lines) + "\n"


# --- training ---------------------------------------------------------------

def relate_param_names(store):
    return store.names("relate.")


def episode_pairs(g, label_ids, rng):
    """Positive co-observed edges and an equal number of sampled non-edges.

    Negatives come from co-observed direction-legal non-edges when there are
    enough, topped up with uniform non-edges over the whole graph.
    """
    labels = sorted(set(label_ids))
    lab = set(labels)
    pos = sorted((s, d) for s in labels for d in g.neighbors(s, "out") if d in lab)
    if not pos:
        return [], []
    local = [(s, d) for s in labels if not g.nodes[s].ntype.is_leaf
             for d in labels if d != s and not g.has_edge(s, d)]
    n_neg = len(pos)
    if len(local) >= n_neg:
        pick = rng.choice(len(local), size=n_neg, replace=False)
        neg = [local[i] for i in sorted(pick)]
    else:
        neg = list(local)
        sources = [n.id for n in g.nodes if not n.ntype.is_leaf]
        guard = 0
        while len(neg) < n_neg and guard < 100 * n_neg:
            guard += 1
            s = int(rng.choice(sources))
            d = int(rng.integers(len(g)))
            if d != s and not g.has_edge(s, d) and (s, d) not in neg:
                neg.append((s, d))
    return pos, neg


def episode_loss(g, bundle_patches, pos, neg, store, cfg):
    pairs = pos + neg
    ids = sorted({i for p in pairs for i in p})
    at = {nid: k for k, nid in enumerate(ids)}
    words = np.stack([g.nodes[i].embedding for i in ids])
    emb = concept_embeddings(bundle_patches, words, store, cfg)
    src = nc.gather_rows(emb, [at[s] for s, _ in pairs])
    dst = nc.gather_rows(emb, [at[d] for _, d in pairs])
    probs = edge_likelihood(src, dst, store, cfg)
    targets = np.array([1.0] * len(pos) + [0.0] * len(neg))
    return nc.bce(probs, targets), len(pairs)


def train_relate(g, bundles, store, cfg, epochs=40, lr=5e-2, batch_size=8, seed=0, log=None, clip_norm=1.0):
    """Link-prediction training over bundles; returns per-epoch mean loss."""
    names = relate_param_names(store)
    opt = nc.SGD(store, names, lr=lr, momentum=0.9, clip_norm=clip_norm)
    bundles = [b for b in bundles if b.patches is not None]
    series = []
    for epoch in range(epochs):
        rng = np.random.default_rng([seed, 7, epoch])
        order = rng.permutation(len(bundles))
        total, count = 0.0, 0
        for start in range(0, len(order), batch_size):
            store.zero_grad()
            n_pairs = 0
            batch_loss = 0.0
            for i in order[start:start + batch_size]:
                b = bundles[i]
                pos, neg = episode_pairs(g, [g.id_of(n) for n in b.labels if n in g], rng)
                if not pos:
                    continue
                loss, n = episode_loss(g, b.patches, pos, neg, store, cfg)
                batch_loss += loss.item()
                nc.backward(loss)
                n_pairs += n
            if n_pairs:
                opt.step(1.0 / n_pairs)
                total += batch_loss
                count += n_pairs
        series.append(total / max(count, 1))
        if log:
            log(f"relate epoch {epoch + 1}/{epochs} loss {series[-1]:.4f}")
    return series
