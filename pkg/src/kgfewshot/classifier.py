"""Single fully connected concept classifier over node-indexed slots.

Input layout for ``N`` nodes, context width ``F_o`` and image width ``v``::

    [slot 0 | slot 1 | ... | slot N-1 | e_I | detection multi-hot (N)]

Each output is an independent sigmoid. Logits are accumulated only over
the non-zero input entries, in layout order, so adding a neuron (and
its input rows) leaves existing outputs bit-identical whenever the new
slot and bit are zero.
"""

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .numcore.tensor import _result

W_PARAM = "clf.W"
B_PARAM = "clf.b"


class LayoutMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class SlotLayout:
    n_nodes: int
    slot_width: int
    image_width: int

    @property
    def input_width(self):
        return self.n_nodes * self.slot_width + self.image_width + self.n_nodes

    @property
    def image_offset(self):
        return self.n_nodes * self.slot_width

    @property
    def detection_offset(self):
        return self.image_offset + self.image_width

    def slot(self, nid):
        return slice(nid * self.slot_width, (nid + 1) * self.slot_width)


def init_params(store, layout, rng):
    k = layout.input_width
    store.add(W_PARAM, nc.uniform_init(rng, k, (k, layout.n_nodes)))
    store.add(B_PARAM, np.zeros((1, layout.n_nodes)))


def scatter_slots(o_final, active, layout):
    """Place row ``i`` of ``o_final`` into the slot of node ``active[i]``."""
    width = layout.slot_width
    n = layout.n_nodes
    out = np.zeros((1, n * width))
    cols = np.concatenate([np.arange(nid * width, (nid + 1) * width) for nid in active]) if active else np.zeros(0, np.intp)
    out[0, cols] = o_final.data.reshape(-1)
    shape = o_final.shape

    def bw(g):
        return (g[0, cols].reshape(shape),)

    return _result(out, (o_final,), bw)


def assemble_input(state, o_final, e_img, detections, layout, g=None):
    """Classifier input row for one expansion.

    Nodes with ids beyond the layout (added to the graph but not yet given
    a neuron) are left out of both the slots and the multi-hot block.
    """
    if g is not None and len(g) < layout.n_nodes:
        raise LayoutMismatchError(f"layout has {layout.n_nodes} nodes, graph has {len(g)}")
    e_img = nc.as_tensor(e_img)
    if e_img.cols != layout.image_width:
        raise LayoutMismatchError(f"image width {e_img.cols} != {layout.image_width}")
    hot = np.zeros((1, layout.n_nodes))
    for d in detections:
        nid = g.id_of(d) if isinstance(d, str) else int(d)
        if nid < layout.n_nodes:
            hot[0, nid] = 1.0
    active = list(state.active)
    rows = [i for i, nid in enumerate(active) if nid < layout.n_nodes]
    if len(rows) != len(active):
        o_final = nc.gather_rows(o_final, rows)
        active = [active[i] for i in rows]
    slots = scatter_slots(o_final, active, layout)
    return nc.concat_cols([slots, e_img, nc.Tensor(hot)])


def ordered_affine(x, w, b):
    """``x @ w + b`` for one row, summing non-zero terms in input order."""
    xd = x.data
    nz = np.flatnonzero(xd[0])
    wd = w.data
    terms = xd[0, nz, None] * wd[nz]
    logits = b.data + np.add.reduce(terms, axis=0, keepdims=True) if nz.size else b.data.copy()

    def bw(g):
        return (g @ wd.T, xd.T @ g, g)

    return _result(logits, (x, w, b), bw)


def logits(x, store):
    return ordered_affine(x, store[W_PARAM], store[B_PARAM])


def classify(x, store):
    x = nc.as_tensor(x)
    if x.cols != store[W_PARAM].rows:
        raise LayoutMismatchError(f"input width {x.cols} != classifier width {store[W_PARAM].rows}")
    return nc.sigmoid(logits(x, store))


def extend_with_neuron(store, layout, rng):
    """Grow the classifier by one concept; returns the new layout.

    Existing weights keep their values and semantic positions; the new
    column is zero over old input regions and seeded over its own slot
    and detection bit.
    """
    W = store[W_PARAM].data
    b = store[B_PARAM].data
    if W.shape != (layout.input_width, layout.n_nodes):
        raise LayoutMismatchError(f"classifier shape {W.shape} does not match layout {layout}")
    new = SlotLayout(layout.n_nodes + 1, layout.slot_width, layout.image_width)
    W2 = np.zeros((new.input_width, new.n_nodes))
    n, fo = layout.n_nodes, layout.slot_width
    W2[: n * fo, :n] = W[: layout.image_offset]
    W2[new.image_offset:new.image_offset + layout.image_width, :n] = W[layout.image_offset:layout.detection_offset]
    W2[new.detection_offset:new.detection_offset + n, :n] = W[layout.detection_offset:]
    fan_in = fo + 1
    W2[new.slot(n), n] = nc.uniform_init(rng, fan_in, fo)
    W2[new.detection_offset + n, n] = nc.uniform_init(rng, fan_in, 1)[0]
    b2 = np.zeros((1, new.n_nodes))
    b2[0, :n] = b[0]
    store.replace(W_PARAM, W2)
    store.replace(B_PARAM, b2)
    return new


def shrink_removed(store, layout, nid):
    """Drop node ``nid``'s output, slot block and detection bit."""
    W = store[W_PARAM].data
    b = store[B_PARAM].data
    keep_rows = np.ones(layout.input_width, dtype=bool)
    keep_rows[layout.slot(nid)] = False
    keep_rows[layout.detection_offset + nid] = False
    keep_cols = np.ones(layout.n_nodes, dtype=bool)
    keep_cols[nid] = False
    store.replace(W_PARAM, W[keep_rows][:, keep_cols])
    store.replace(B_PARAM, b[:, keep_cols])
    return SlotLayout(layout.n_nodes - 1, layout.slot_width, layout.image_width)


def column_mask(layout, cols):
    """0/1 masks restricting classifier updates to output columns ``cols``."""
    mw = np.zeros((layout.input_width, layout.n_nodes))
    mb = np.zeros((1, layout.n_nodes))
    mw[:, list(cols)] = 1.0
    mb[:, list(cols)] = 1.0
    return {W_PARAM: mw, B_PARAM: mb}


def export_predictions(names, probs):
    """``(name, probability)`` pairs sorted by probability, descending."""
    probs = np.asarray(probs).reshape(-1)
    order = sorted(range(len(names)), key=lambda i: (-probs[i], i))
    return [(names[i], float(probs[i])) for i in order]
