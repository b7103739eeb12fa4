"""Synthetic stand-in for an annotated image corpus.

Concepts are grouped into contexts that occupy contiguous id blocks. Within a
context the objects form a random tree (plus optional extra forward edges)
and every attribute/affordance hangs off one to three objects. Each concept
gets a unit latent vector drifting from its context direction, and each
bundle is a noisy rendering of a label set closed under out-edges.
"""

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from ..kgraph import KnowledgeGraph, NodeType, load_embedding_table, save_embedding_table


class WorldSpecError(ValueError):
    pass


class BundleFormatError(ValueError):
    pass


@dataclass
class FeatureBundle:
    id: str
    e_img: np.ndarray
    detections: list
    labels: list
    patches: np.ndarray = None

    def to_json(self):
        rec = {"id": self.id, "e_img": [float(x) for x in self.e_img],
               "detections": sorted(self.detections), "labels": sorted(self.labels)}
        if self.patches is not None:
            rec["patches"] = [[float(x) for x in row] for row in self.patches]
        return json.dumps(rec, ensure_ascii=False)

    @classmethod
    def from_json(cls, line):
        rec = json.loads(line)
        patches = rec.get("patches")
        return cls(rec["id"], np.array(rec["e_img"], dtype=np.float64), list(rec["detections"]),
                   list(rec["labels"]), None if patches is None else np.array(patches, dtype=np.float64))

    def replace_labels(self, labels):
        return FeatureBundle(self.id, self.e_img, list(self.detections), sorted(labels), self.patches)


SEPARABLE = dict(recall=1.0, noise=0.2, word_noise=0.05, max_seeds=4, seed_depth_bias=-1.0)


@dataclass(frozen=True)
class SyntheticWorldSpec:
    n_objects: int = 24
    n_attributes: int = 10
    n_affordances: int = 6
    n_contexts: int = 4
    edge_density: float = 0.1
    cross_context: float = 0.05
    latent_width: int = 16
    latent_spread: float = 0.6
    depth_signal: float = 0.6
    noise: float = 0.5
    word_noise: float = 0.1
    n_patches: int = 4
    n_train: int = 500
    n_val: int = 100
    n_test: int = 200
    max_seeds: int = 2
    recall: float = 0.7
    visibility: float = 1.0
    seed_depth_bias: float = 1.0
    n_holdout: int = 4
    seed: int = 0

    def validate(self):
        for name in ("n_objects", "n_attributes", "n_affordances", "n_contexts", "latent_width",
                     "n_patches", "max_seeds"):
            if getattr(self, name) < 1:
                raise WorldSpecError(f"{name} must be >= 1")
        if self.n_contexts > self.n_objects:
            raise WorldSpecError("every context needs at least one object")
        if not 0.0 < self.recall <= 1.0 or not 0.0 < self.visibility <= 1.0:
            raise WorldSpecError("recall and visibility must lie in (0, 1]")
        if not 0.0 <= self.edge_density <= 1.0 or not 0.0 <= self.cross_context <= 1.0:
            raise WorldSpecError("probabilities must lie in [0, 1]")
        if min(self.noise, self.word_noise, self.latent_spread, self.depth_signal) < 0:
            raise WorldSpecError("noise scales must be >= 0")
        if min(self.n_train, self.n_val, self.n_test, self.n_holdout) < 0:
            raise WorldSpecError("split sizes must be >= 0")
        if self.n_holdout and self.n_objects - self.n_contexts < self.n_holdout:
            raise WorldSpecError("not enough non-root objects to hold out")

    @property
    def n_concepts(self):
        return self.n_objects + self.n_attributes + self.n_affordances

    def with_overrides(self, **kw):
        return SyntheticWorldSpec(**{**asdict(self), **kw})

    @classmethod
    def separable(cls, **kw):
        """Low-noise world with a perfect detector and shallow seeding.

        Scenes are richer (more seeds, seeded near the roots) so each image's
        partial graph holds most of a concept's neighbours.
        """
        return cls(**{**SEPARABLE, **kw})


@dataclass
class World:
    spec: SyntheticWorldSpec
    graph: KnowledgeGraph
    splits: dict
    latents: np.ndarray
    context_of: list
    novel: list = field(default_factory=list)

    @property
    def embeddings(self):
        return {n.name: n.embedding for n in self.graph.nodes}

    def base_graph(self):
        g = self.graph.copy()
        for name in sorted(self.novel, key=g.id_of, reverse=True):
            g.remove_node(g.id_of(name))
        return g

    def base_split(self, split):
        """Every bundle of ``split`` with the held-out concepts removed from its labels.

        Held-out concepts stay visible in the features: the base system sees
        them as unnamed scene content, the way a deployed model meets things
        outside its vocabulary.
        """
        novel = set(self.novel)
        return [b.replace_labels(set(b.labels) - novel) if novel & set(b.labels) else b
                for b in self.splits[split]]

    def clean_split(self, split):
        """Bundles of ``split`` that contain none of the held-out concepts.

        This is the corpus a base model would have been built from before the
        new concepts existed; curated anti-forgetting data is drawn from it.
        """
        novel = set(self.novel)
        return [b for b in self.splits[split] if not novel & set(b.labels)]

    def pool(self, split, concept):
        """Bundles labelled with ``concept``; ones without other novel concepts first."""
        novel = set(self.novel) - {concept}
        hits = [b for b in self.splits[split] if concept in b.labels]
        return sorted(hits, key=lambda b: (bool(novel & set(b.labels)), b.id))

    def closure(self, seeds):
        return label_closure(self.graph, seeds)


def label_closure(g, seeds):
    """Names reachable from ``seeds`` along out-edges (seeds included)."""
    seen = set()
    stack = [g.id_of(s) if isinstance(s, str) else int(s) for s in seeds]
    while stack:
        nid = stack.pop()
        if nid in seen:
            continue
        seen.add(nid)
        stack.extend(g.neighbors(nid, "out") - seen)
    return {g.nodes[i].name for i in seen}


def _split_counts(total, parts):
    base, extra = divmod(total, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


def _unit(v):
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def generate_world(spec):
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    v = spec.latent_width
    C = spec.n_contexts
    g = KnowledgeGraph()
    context_of = []
    latents = []
    contexts = [_unit(rng.normal(size=v)) for _ in range(C)]
    # latents carry their hierarchy depth along one shared axis, which makes
    # edge direction recoverable from a pair of embeddings
    depth_axis = _unit(rng.normal(size=v))
    per = {t: _split_counts(n, C) for t, n in (("object", spec.n_objects),
                                                 ("attribute", spec.n_attributes),
                                                 ("affordance", spec.n_affordances))}
    objects_in = []
    counters = {"object": 0, "attribute": 0, "affordance": 0}
    prefix = {"object": "obj", "attribute": "attr", "affordance": "aff"}

    semantic = []
    depth = []

    def new_node(kind, ctx, sem, level):
        name = f"{prefix[kind]}{counters[kind]:02d}"
        counters[kind] += 1
        latent = sem + spec.depth_signal * level * depth_axis
        word = latent + spec.word_noise * rng.normal(size=v) / np.sqrt(v)
        nid = g.add_node(name, kind, word)
        context_of.append(ctx)
        semantic.append(sem)
        latents.append(latent)
        depth.append(level)
        return nid

    def drift(base):
        return _unit(base + spec.latent_spread * rng.normal(size=v) / np.sqrt(v))

    for ctx in range(C):
        objs = []
        for k in range(per["object"][ctx]):
            if k == 0:
                nid = new_node("object", ctx, drift(contexts[ctx]), 0)
            else:
                parent = objs[int(rng.integers(len(objs)))]
                nid = new_node("object", ctx, drift(semantic[parent]), depth[parent] + 1)
                g.add_edge(parent, nid)
                for other in objs:
                    if other != parent and rng.random() < spec.edge_density:
                        g.add_edge(other, nid)
            objs.append(nid)
        objects_in.append(objs)
        for kind in ("attribute", "affordance"):
            for _ in range(per[kind][ctx]):
                n_par = int(rng.integers(1, min(3, len(objs)) + 1))
                parents = sorted(int(p) for p in rng.choice(objs, size=n_par, replace=False))
                sem = drift(_unit(np.mean([semantic[p] for p in parents], axis=0)))
                nid = new_node(kind, ctx, sem, max(depth[p] for p in parents) + 1)
                for p in parents:
                    g.add_edge(p, nid)
    latents = np.array(latents)
    # an occasional leaf also hangs off an object from another context
    if C > 1 and spec.cross_context > 0:
        for nid, node in enumerate(g.nodes):
            if node.ntype.is_leaf and rng.random() < spec.cross_context:
                ctx = context_of[nid]
                others = [o for c, os in enumerate(objects_in) if c != ctx for o in os]
                if others:
                    g.add_edge(int(rng.choice(others)), nid)

    novel = _pick_holdout(g, objects_in, spec, rng)
    splits = {}
    for split, count in (("train", spec.n_train), ("val", spec.n_val), ("test", spec.n_test)):
        splits[split] = [_render_bundle(f"{split}-{i:05d}", g, latents, objects_in, spec, rng, set(novel))
                         for i in range(count)]
    g.validate()
    return World(spec, g, splits, latents, context_of, novel)


def _pick_holdout(g, objects_in, spec, rng):
    """One non-root object per context (round robin) until ``n_holdout`` are picked."""
    pools = [list(objs[1:]) for objs in objects_in]
    for p in pools:
        rng.shuffle(p)
    chosen = []
    ctx = 0
    while len(chosen) < spec.n_holdout:
        if pools[ctx]:
            chosen.append(g.nodes[pools[ctx].pop()].name)
        ctx = (ctx + 1) % len(pools)
    return sorted(chosen)


def _depth(g, nid):
    depth, frontier = 0, {nid}
    while True:
        frontier = {p for f in frontier for p in g.neighbors(f, "in")}
        if not frontier:
            return depth
        depth += 1


def _render_bundle(bid, g, latents, objects_in, spec, rng, undetectable=frozenset()):
    v, P = spec.latent_width, spec.n_patches
    ctx = int(rng.integers(len(objects_in)))
    objs = objects_in[ctx]
    n_seeds = int(rng.integers(1, min(spec.max_seeds, len(objs)) + 1))
    # deeper objects are likelier seeds, which keeps label sets small
    weight = np.array([(_depth(g, o) + 1.0) ** spec.seed_depth_bias for o in objs])
    seeds = [int(s) for s in rng.choice(objs, size=n_seeds, replace=False, p=weight / weight.sum())]
    names = label_closure(g, seeds)
    ids = sorted(g.id_of(n) for n in names)
    # each present concept is visible with some probability; hidden ones stay
    # labelled but leave no trace in the image features or detections
    seen = [i for i in ids if rng.random() < spec.visibility]
    if not seen:
        seen = [ids[int(rng.integers(len(ids)))]]
    e_img = _unit(latents[seen].sum(axis=0)) + spec.noise * rng.normal(size=v) / np.sqrt(v)
    visible_objs = [i for i in seen if not g.nodes[i].ntype.is_leaf]
    order = [visible_objs[i] for i in rng.permutation(len(visible_objs))][:P]
    patches = spec.noise * rng.normal(size=(P, v)) / np.sqrt(v)
    for row, nid in enumerate(order):
        patches[row] += latents[nid]
    keep = rng.random(len(visible_objs)) < spec.recall
    # held-out concepts are unknown to the detector
    detections = sorted(g.nodes[i].name for i, k in zip(visible_objs, keep)
                        if k and g.nodes[i].name not in undetectable)
    return FeatureBundle(bid, e_img, detections, sorted(names), patches)


# --- files ------------------------------------------------------------------

def save_bundles(path, bundles, header=None):
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write(header)
        for b in bundles:
            fh.write(b.to_json() + "\n")


def load_bundles(path, graph=None):
    """Read a bundle file; with ``graph`` given, labels are re-checked for closure."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for no, line in enumerate(fh, start=1):
            if not line.strip() or line.startswith("#"):
                continue
            try:
                b = FeatureBundle.from_json(line)
            except (KeyError, ValueError, TypeError) as exc:
                raise BundleFormatError(f"{path}:{no}: {exc}") from None
            if not np.all(np.isfinite(b.e_img)):
                raise BundleFormatError(f"{path}:{no}: non-finite image embedding")
            if graph is not None:
                check_bundle(b, graph, where=f"{path}:{no}")
            out.append(b)
    return out


def check_bundle(b, graph, where=""):
    known = [n for n in b.labels if n in graph]
    closed = label_closure(graph, known)
    if not closed <= set(b.labels):
        missing = sorted(closed - set(b.labels))
        raise BundleFormatError(f"{where} bundle {b.id}: labels not closed, missing {missing}")
    if not set(b.detections) <= set(b.labels):
        raise BundleFormatError(f"{where} bundle {b.id}: detection outside labels")


def world_meta(world):
    return {"spec": asdict(world.spec), "novel": list(world.novel),
            "context_of": list(world.context_of)}


def save_world(world, out_dir, header=""):
    """Write graph, embeddings, bundle splits and metadata; returns the paths."""
    import os
    os.makedirs(out_dir, exist_ok=True)
    paths = {"graph": os.path.join(out_dir, "graph.kg"),
             "embeddings": os.path.join(out_dir, "embeddings.tsv"),
             "meta": os.path.join(out_dir, "world.json")}
    with open(paths["graph"], "wb") as fh:
        fh.write(header.encode("utf-8") + world.graph.serialize())
    save_embedding_table(paths["embeddings"], world.graph.names(), [n.embedding for n in world.graph.nodes])
    for split, bundles in world.splits.items():
        paths[split] = os.path.join(out_dir, f"{split}.jsonl")
        save_bundles(paths[split], bundles, header)
    meta = world_meta(world)
    meta["latents"] = [[float(x) for x in row] for row in world.latents]
    with open(paths["meta"], "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return paths


def load_world(out_dir):
    import os
    g = KnowledgeGraph.load(os.path.join(out_dir, "graph.kg"))
    with open(os.path.join(out_dir, "world.json"), encoding="utf-8") as fh:
        meta = json.load(fh)
    table = load_embedding_table(os.path.join(out_dir, "embeddings.tsv"))
    for node in g.nodes:
        if node.name in table:
            node.embedding = table[node.name]
    splits = {}
    for split in ("train", "val", "test"):
        path = os.path.join(out_dir, f"{split}.jsonl")
        if os.path.exists(path):
            splits[split] = load_bundles(path, g)
    return World(SyntheticWorldSpec(**meta["spec"]), g, splits, np.array(meta["latents"]),
                 meta["context_of"], meta["novel"])


__all__ = ["FeatureBundle", "SyntheticWorldSpec", "World", "WorldSpecError", "BundleFormatError",
           "generate_world", "label_closure", "save_bundles", "load_bundles", "check_bundle",
           "save_world", "load_world", "NodeType"]
