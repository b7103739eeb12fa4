"""Typed concept graph with the leaf constraint, plus partial-graph traces.

Graph file format (UTF-8, one record per line, canonical order)::

    # kgraph v1
    node {"id": 0, "name": "car", "type": "object", "bias": 0.1, "embedding": [...]}
    edge {"src": 0, "dst": 3}

Nodes are sorted by id and edges by ``(src, dst)``, so serialisation is
byte-deterministic. Floats are written with ``repr`` and round-trip exactly.
"""

import enum
import json
from dataclasses import dataclass, field

import numpy as np

HEADER = "# kgraph v1"


class NodeType(str, enum.Enum):
    OBJECT = "object"
    ATTRIBUTE = "attribute"
    AFFORDANCE = "affordance"

    @property
    def one_hot(self):
        vec = np.zeros(3)
        vec[_TYPE_ORDER.index(self)] = 1.0
        return vec

    @property
    def is_leaf(self):
        return self is not NodeType.OBJECT


_TYPE_ORDER = [NodeType.OBJECT, NodeType.ATTRIBUTE, NodeType.AFFORDANCE]


class GraphError(ValueError):
    pass


class DuplicateNameError(GraphError):
    pass


class UnknownNodeError(GraphError, KeyError):
    pass


class LeafConstraintError(GraphError):
    pass


class SelfLoopError(GraphError):
    pass


class GraphFormatError(GraphError):
    def __init__(self, line_no, message):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass
class ConceptNode:
    id: int
    name: str
    ntype: NodeType
    bias: float = 0.0
    embedding: np.ndarray = field(default_factory=lambda: np.zeros(0))


class KnowledgeGraph:
    def __init__(self):
        self.nodes = []
        self._by_name = {}
        self._out = []
        self._in = []

    # --- queries ----------------------------------------------------------

    def __len__(self):
        return len(self.nodes)

    def __contains__(self, name):
        return name in self._by_name

    @property
    def edges(self):
        return {(s, d) for s, outs in enumerate(self._out) for d in outs}

    def sorted_edges(self):
        return sorted(self.edges)

    def n_edges(self):
        return sum(len(o) for o in self._out)

    def id_of(self, name):
        try:
            return self._by_name[name]
        except KeyError:
            raise UnknownNodeError(f"unknown concept {name!r}") from None

    def node(self, ref):
        nid = self.id_of(ref) if isinstance(ref, str) else int(ref)
        self._check_id(nid)
        return self.nodes[nid]

    def names(self):
        return [n.name for n in self.nodes]

    def has_edge(self, src, dst):
        return dst in self._out[src]

    def neighbors(self, nid, mode="both"):
        self._check_id(nid)
        if mode == "out":
            return set(self._out[nid])
        if mode == "in":
            return set(self._in[nid])
        if mode == "both":
            return self._out[nid] | self._in[nid]
        raise ValueError(f"unknown neighbor mode {mode!r}")

    def adjacency_rows(self, active):
        """0/1 matrix over ``active`` (in the given order) with undirected edges."""
        active = list(active)
        pos = {nid: i for i, nid in enumerate(active)}
        mat = np.zeros((len(active), len(active)))
        for i, nid in enumerate(active):
            for other in self._out[nid] | self._in[nid]:
                j = pos.get(other)
                if j is not None:
                    mat[i, j] = 1.0
        return mat

    def type_vector(self):
        return np.array([_TYPE_ORDER.index(n.ntype) for n in self.nodes], dtype=np.intp)

    def embedding_matrix(self):
        if not self.nodes:
            return np.zeros((0, 0))
        return np.stack([n.embedding for n in self.nodes])

    def biases(self):
        return np.array([n.bias for n in self.nodes], dtype=np.float64)

    def validate(self):
        for n in self.nodes:
            if n.ntype.is_leaf and self._out[n.id]:
                raise LeafConstraintError(f"{n.ntype.value} {n.name!r} has outgoing edges")
            if not np.isfinite(n.bias) or not np.all(np.isfinite(n.embedding)):
                raise GraphError(f"node {n.name!r} has non-finite values")

    # --- mutation ---------------------------------------------------------

    def _check_id(self, nid):
        if not 0 <= nid < len(self.nodes):
            raise UnknownNodeError(f"unknown node id {nid}")

    def add_node(self, name, ntype, embedding=None, bias=0.0):
        if name in self._by_name:
            raise DuplicateNameError(f"concept {name!r} already exists")
        ntype = NodeType(ntype)
        emb = np.zeros(0) if embedding is None else np.asarray(embedding, dtype=np.float64).copy()
        if not np.all(np.isfinite(emb)) or not np.isfinite(bias):
            raise GraphError(f"node {name!r} has non-finite values")
        nid = len(self.nodes)
        self.nodes.append(ConceptNode(nid, name, ntype, float(bias), emb))
        self._by_name[name] = nid
        self._out.append(set())
        self._in.append(set())
        return nid

    def add_edge(self, src, dst):
        self._check_id(src)
        self._check_id(dst)
        if src == dst:
            raise SelfLoopError(f"self-loop on {self.nodes[src].name!r}")
        if self.nodes[src].ntype.is_leaf:
            raise LeafConstraintError(
                f"{self.nodes[src].ntype.value} {self.nodes[src].name!r} must stay a leaf")
        self._out[src].add(dst)
        self._in[dst].add(src)

    def remove_edge(self, src, dst):
        self._out[src].discard(dst)
        self._in[dst].discard(src)

    def remove_node(self, nid):
        """Drop a node and its edges; returns the old id -> new id map."""
        self._check_id(nid)
        remap = {}
        for old in range(len(self.nodes)):
            if old != nid:
                remap[old] = len(remap)
        old_edges = [(s, d) for s, d in self.edges if nid not in (s, d)]
        kept = [n for n in self.nodes if n.id != nid]
        self.nodes = []
        self._by_name = {}
        self._out = [set() for _ in kept]
        self._in = [set() for _ in kept]
        for n in kept:
            n.id = remap[n.id]
            self.nodes.append(n)
            self._by_name[n.name] = n.id
        for s, d in old_edges:
            self._out[remap[s]].add(remap[d])
            self._in[remap[d]].add(remap[s])
        return remap

    def copy(self):
        g = KnowledgeGraph()
        for n in self.nodes:
            g.add_node(n.name, n.ntype, n.embedding, n.bias)
        for s, d in self.edges:
            g._out[s].add(d)
            g._in[d].add(s)
        return g

    # --- serialisation ----------------------------------------------------

    def serialize(self):
        lines = [HEADER]
        for n in self.nodes:
            rec = {"id": n.id, "name": n.name, "type": n.ntype.value, "bias": float(n.bias),
                   "embedding": [float(x) for x in n.embedding]}
            lines.append("node " + json.dumps(rec, ensure_ascii=False))
        for s, d in self.sorted_edges():
            lines.append("edge " + json.dumps({"src": s, "dst": d}))
        return ("\n".join(lines) + "\n").encode("utf-8")

    @classmethod
    def deserialize(cls, blob):
        text = blob.decode("utf-8") if isinstance(blob, (bytes, bytearray)) else blob
        g = cls()
        edges = []
        for no, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            kind, _, body = line.partition(" ")
            try:
                rec = json.loads(body)
            except json.JSONDecodeError as exc:
                raise GraphFormatError(no, f"bad record body: {exc.msg}") from None
            if not isinstance(rec, dict):
                raise GraphFormatError(no, "record body must be an object")
            try:
                if kind == "node":
                    if rec["id"] != len(g.nodes):
                        raise GraphFormatError(no, f"field id: expected {len(g.nodes)}, got {rec['id']}")
                    g.add_node(rec["name"], rec["type"], rec.get("embedding", []), rec.get("bias", 0.0))
                elif kind == "edge":
                    edges.append((no, int(rec["src"]), int(rec["dst"])))
                else:
                    raise GraphFormatError(no, f"unknown record kind {kind!r}")
            except KeyError as exc:
                raise GraphFormatError(no, f"missing field {exc}") from None
            except GraphFormatError:
                raise
            except (GraphError, ValueError, TypeError) as exc:
                raise GraphFormatError(no, str(exc)) from None
        for no, s, d in edges:
            try:
                g.add_edge(s, d)
            except GraphError as exc:
                raise GraphFormatError(no, f"edge {s}->{d}: {exc}") from None
        return g

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.serialize())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.deserialize(fh.read())


@dataclass
class PartialGraph:
    """Activation provenance for one inference."""

    active: list = field(default_factory=list)
    step_of: dict = field(default_factory=dict)
    expansion_edges: list = field(default_factory=list)

    def activate(self, nid, step, parents=()):
        if nid in self.step_of:
            return
        self.active.append(nid)
        self.step_of[nid] = step
        for p in parents:
            self.expansion_edges.append((p, nid, step))

    def parents_of(self, nid):
        return [p for p, c, _ in self.expansion_edges if c == nid]

    def nodes_at(self, step):
        return [n for n in self.active if self.step_of[n] == step]

    def export(self, g):
        """Text listing: one line per active node with step and parents."""
        lines = ["# node\tstep\tparents"]
        for nid in self.active:
            parents = ",".join(g.nodes[p].name for p in self.parents_of(nid))
            lines.append(f"{g.nodes[nid].name}\t{self.step_of[nid]}\t{parents}")
        return "\n".join(lines) + "\n"


def save_embedding_table(path, names, vectors):
    with open(path, "w", encoding="utf-8") as fh:
        for name, vec in zip(names, vectors):
            fh.write(json.dumps(name, ensure_ascii=False) + "\t" + " ".join(repr(float(x)) for x in vec) + "\n")


def load_embedding_table(path):
    table = {}
    with open(path, encoding="utf-8") as fh:
        for no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            name_part, _, vec_part = line.rstrip("\n").partition("\t")
            try:
                table[json.loads(name_part)] = np.array([float(x) for x in vec_part.split()])
            except ValueError as exc:
                raise GraphFormatError(no, f"bad embedding line: {exc}") from None
    return table
