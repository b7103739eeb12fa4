"""The trainable recognition system: graph, parameters, GSNN and classifier.

``ConceptSystem`` owns one :class:`KnowledgeGraph` and one parameter store
holding every weight (prefixes ``gsnn.``, ``kg.``, ``clf.`` and
``relate.``). Base training runs end to end over feature bundles with a
per-concept cross-entropy on the classifier plus a cross-entropy on every
importance decision (target: the candidate is in the bundle's labels).
"""

import json
import logging
import math
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import classifier, gsnn, relate
from . import numcore as nc
from .kgraph import KnowledgeGraph

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    lr: float = 1e-2
    momentum: float = 0.9
    batch_size: int = 8
    importance_weight: float = 1.0
    teacher_forcing: bool = True
    false_detection_rate: float = 0.5
    seed: int = 0


class ConceptSystem:
    def __init__(self, graph, store, gsnn_cfg, relate_cfg, layout):
        self.graph = graph
        self.store = store
        self.gsnn_cfg = gsnn_cfg
        self.relate_cfg = relate_cfg
        self.layout = layout

    @classmethod
    def build(cls, graph, gsnn_cfg, relate_cfg, seed=0):
        rng = np.random.default_rng([seed, 11])
        store = nc.ParameterStore()
        gsnn.init_params(store, gsnn_cfg, len(graph), rng, node_bias=graph.biases())
        layout = classifier.SlotLayout(len(graph), gsnn_cfg.out_width, gsnn_cfg.image_width)
        classifier.init_params(store, layout, rng)
        relate.init_params(store, relate_cfg, rng)
        return cls(graph, store, gsnn_cfg, relate_cfg, layout)

    def copy(self):
        return ConceptSystem(self.graph.copy(), self.store.copy(), self.gsnn_cfg,
                             self.relate_cfg, self.layout)

    # --- inference ---------------------------------------------------------

    def known_detections(self, bundle):
        return [d for d in bundle.detections if d in self.graph]

    def forward(self, bundle, forced=(), teacher=None, steps=None, schedule=None):
        """Expansion and class probabilities (``1 x N_layout``) for one bundle."""
        e_img = np.asarray(bundle.e_img, dtype=np.float64).reshape(1, -1)
        dets = self.known_detections(bundle)
        state, o_final = gsnn.expand(self.graph, e_img, dets, self.store, self.gsnn_cfg,
                                     forced=forced, teacher=teacher, schedule=schedule, steps=steps)
        x = classifier.assemble_input(state, o_final, e_img, dets, self.layout, self.graph)
        return state, classifier.classify(x, self.store)

    def predict(self, bundles, steps=None):
        with nc.no_grad():
            return np.vstack([self.forward(b, steps=steps)[1].data for b in bundles]) \
                if bundles else np.zeros((0, self.layout.n_nodes))

    def traces(self, bundles, steps=None):
        with nc.no_grad():
            return [self.forward(b, steps=steps)[0] for b in bundles]

    def label_matrix(self, bundles, names=None):
        names = self.graph.names()[: self.layout.n_nodes] if names is None else names
        col = {n: i for i, n in enumerate(names)}
        out = np.zeros((len(bundles), len(names)))
        for r, b in enumerate(bundles):
            for lab in b.labels:
                if lab in col:
                    out[r, col[lab]] = 1.0
        return out

    # --- losses ------------------------------------------------------------

    def label_ids(self, bundle):
        return {self.graph.id_of(n) for n in bundle.labels if n in self.graph}

    def sample_loss(self, bundle, forced=(), teacher_forcing=False, importance_weight=1.0,
                    target=None, columns=None):
        """Loss tensor for one bundle.

        ``target``/``columns`` restrict the classifier term to the given
        output columns with explicit 0/1 targets; by default every column is
        scored against the bundle's labels.
        """
        labels = self.label_ids(bundle)
        state, probs = self.forward(bundle, forced=forced,
                                    teacher=labels if teacher_forcing else None)
        if columns is None:
            t = np.zeros((1, self.layout.n_nodes))
            for nid in labels:
                if nid < self.layout.n_nodes:
                    t[0, nid] = 1.0
            loss = nc.bce(probs, t)
        else:
            loss = nc.bce(nc.gather_rows(nc.transpose(probs), list(columns)),
                          np.asarray(target, dtype=np.float64).reshape(-1, 1))
        if importance_weight > 0:
            for rec in state.history:
                if rec.scores is None:
                    continue
                imp_t = np.array([[1.0 if c in labels else 0.0] for c in rec.candidates])
                loss = nc.add(loss, nc.scale(nc.bce(rec.scores, imp_t), importance_weight))
        return state, loss

    # --- graph mutation ----------------------------------------------------

    def add_node(self, name, ntype, embedding, bias=0.0):
        nid = self.graph.add_node(name, ntype, embedding, bias)
        biases = self.store[gsnn.BIAS_PARAM].data
        self.store.replace(gsnn.BIAS_PARAM, np.vstack([biases, [[float(bias)]]]))
        return nid

    def set_bias(self, nid, value):
        data = self.store[gsnn.BIAS_PARAM].data.copy()
        data[nid, 0] = value
        self.store.replace(gsnn.BIAS_PARAM, data)
        self.graph.nodes[nid].bias = float(value)

    def extend_classifier(self, rng):
        self.layout = classifier.extend_with_neuron(self.store, self.layout, rng)
        return self.layout

    def remove_concept(self, name):
        nid = self.graph.id_of(name)
        if nid >= self.layout.n_nodes:
            raise classifier.LayoutMismatchError(f"{name!r} has no classifier neuron")
        remap = self.graph.remove_node(nid)
        biases = np.delete(self.store[gsnn.BIAS_PARAM].data, nid, axis=0)
        self.store.replace(gsnn.BIAS_PARAM, biases)
        self.layout = classifier.shrink_removed(self.store, self.layout, nid)
        return remap

    def sync_biases(self):
        data = self.store[gsnn.BIAS_PARAM].data[:, 0]
        for node, value in zip(self.graph.nodes, data):
            node.bias = float(value)

    # --- persistence -------------------------------------------------------

    def config_dict(self):
        return {"gsnn": asdict(self.gsnn_cfg), "relate": asdict(self.relate_cfg),
                "layout": asdict(self.layout)}

    def save(self, out_dir, header=""):
        self.sync_biases()
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "graph.kg"), "wb") as fh:
            fh.write(header.encode("utf-8") + self.graph.serialize())
        self.store.save(os.path.join(out_dir, "params.kgps"))
        with open(os.path.join(out_dir, "system.json"), "w", encoding="utf-8") as fh:
            json.dump(self.config_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, out_dir):
        with open(os.path.join(out_dir, "system.json"), encoding="utf-8") as fh:
            cfg = json.load(fh)
        graph = KnowledgeGraph.load(os.path.join(out_dir, "graph.kg"))
        store = nc.ParameterStore.load(os.path.join(out_dir, "params.kgps"))
        return cls(graph, store, gsnn.GsnnConfig(**cfg["gsnn"]), relate.RelateConfig(**cfg["relate"]),
                   classifier.SlotLayout(**cfg["layout"]))


def base_param_names(store):
    """Every weight trained end to end at base time (RelaTe trains separately)."""
    return [n for n in store.names() if not n.startswith("relate.")]


def run_epochs(system, bundles, names, tcfg, make_loss, epochs, start_epoch=0, optimizer=None,
               stream_seed=(), on_epoch=None, label="train", perturb=None):
    """Generic minibatch loop; returns ``(losses per epoch, optimizer)``.

    Each epoch's order comes from an RNG keyed on ``(seed, *stream_seed,
    epoch)``, so a run resumed at epoch ``k`` replays exactly. ``perturb(bundle,
    rng)`` may rewrite each bundle before its loss is taken; it draws from
    the same epoch RNG.
    """
    opt = optimizer or nc.SGD(system.store, names, lr=tcfg.lr, momentum=tcfg.momentum)
    series = []
    for epoch in range(start_epoch, epochs):
        rng = np.random.default_rng([tcfg.seed, *stream_seed, epoch])
        order = rng.permutation(len(bundles))
        total = 0.0
        for start in range(0, len(order), tcfg.batch_size):
            batch = order[start:start + tcfg.batch_size]
            system.store.zero_grad()
            for i in batch:
                b = bundles[i] if perturb is None else perturb(bundles[i], rng)
                loss = make_loss(b)
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericalError(f"non-finite loss at epoch {epoch + 1} on bundle {b.id}")
                total += value
                nc.backward(loss)
            opt.step(1.0 / len(batch))
        series.append(total / max(len(bundles), 1))
        log.info("%s epoch %d/%d loss %.5f", label, epoch + 1, epochs, series[-1])
        if on_epoch is not None:
            on_epoch(epoch, series[-1], opt)
    return series, opt


def false_detections(graph, rate):
    """Perturbation adding, with probability ``rate``, one absent object to the detections.

    The synthetic detector never hallucinates, so without this the
    importance network never meets an active node whose children are absent.
    """
    objects = [n.name for n in graph.nodes if not n.ntype.is_leaf]

    def perturb(bundle, rng):
        if rate <= 0 or rng.random() >= rate:
            return bundle
        absent = [n for n in objects if n not in set(bundle.labels)]
        if not absent:
            return bundle
        extra = absent[int(rng.integers(len(absent)))]
        return type(bundle)(bundle.id, bundle.e_img, sorted(set(bundle.detections) | {extra}),
                            bundle.labels, bundle.patches)

    return perturb


def train_base(system, bundles, tcfg, start_epoch=0, optimizer=None, on_epoch=None):
    names = base_param_names(system.store)
    perturb = false_detections(system.graph, tcfg.false_detection_rate) \
        if tcfg.false_detection_rate > 0 else None

    def make_loss(b):
        return system.sample_loss(b, teacher_forcing=tcfg.teacher_forcing,
                                  importance_weight=tcfg.importance_weight)[1]

    series, opt = run_epochs(system, bundles, names, tcfg, make_loss, tcfg.epochs,
                             start_epoch=start_epoch, optimizer=optimizer, stream_seed=(101,),
                             on_epoch=on_epoch, label="base", perturb=perturb)
    system.sync_biases()
    return series, opt


def save_checkpoint(path, system, opt, epoch, losses):
    """Parameters, optimizer velocity and progress in one directory."""
    os.makedirs(path, exist_ok=True)
    system.store.save(os.path.join(path, "params.kgps"))
    vel = nc.ParameterStore()
    for n, v in sorted(opt.state().items()):
        vel.add(n, v)
    vel.save(os.path.join(path, "velocity.kgps"))
    with open(os.path.join(path, "progress.json"), "w", encoding="utf-8") as fh:
        json.dump({"epoch": epoch, "losses": losses}, fh)


def load_checkpoint(path, system, tcfg):
    """Restore parameters into ``system``; returns ``(next epoch, losses, optimizer)``."""
    system.store = nc.ParameterStore.load(os.path.join(path, "params.kgps"))
    vel = nc.ParameterStore.load(os.path.join(path, "velocity.kgps"))
    opt = nc.SGD(system.store, base_param_names(system.store), lr=tcfg.lr, momentum=tcfg.momentum)
    opt.load_state({n: vel[n].data for n in vel.names()})
    with open(os.path.join(path, "progress.json"), encoding="utf-8") as fh:
        prog = json.load(fh)
    return prog["epoch"], prog["losses"], opt
