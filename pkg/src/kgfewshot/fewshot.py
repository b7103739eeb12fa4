"""Adding concepts to a trained system from a handful of examples.

The workflow for one concept:

1. add the node to the graph;
2. let the relation transformer propose edges and commit them;
3. start its bias at the mean bias of its new neighbours;
4. build a stream from jittered copies of the examples plus a small
   curated slice of the base data, shuffled together;
5. stage one tunes the GSNN and the new node's bias with the classifier
   frozen and the new node forced active on example-derived samples;
6. stage two grows the classifier by one neuron and trains only that
   column on the binary presence target, with the GSNN at a reduced rate
   and the bias frozen.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import classifier, gsnn, relate
from . import numcore as nc
from .evalkit.world import FeatureBundle
from .kgraph import NodeType
from .system import run_epochs

log = logging.getLogger(__name__)

STRATEGIES = ("one_by_one", "all_at_once")


class SubmissionError(ValueError):
    pass


@dataclass(frozen=True)
class FinetuneSchedule:
    stage1_epochs: int = 20
    stage2_epochs: int = 20
    lr: float = 1e-2
    momentum: float = 0.9
    stage2_gsnn_factor: float = 0.1
    n_augment: int = 4
    noise_scale: float = 0.1
    drop_prob: float = 0.3
    batch_size: int = 8
    importance_weight: float = 1.0
    teacher_forcing: bool = True
    curated_fraction: float = 0.02
    force_stage2: bool = True

    def __post_init__(self):
        if self.stage1_epochs < 0 or self.stage2_epochs < 1 or self.n_augment < 0:
            raise ValueError("epoch and augmentation counts must be non-negative (stage 2 >= 1)")
        if not 0.0 < self.stage2_gsnn_factor <= 1.0:
            raise ValueError("stage2_gsnn_factor must lie in (0, 1]")
        if self.lr <= 0 or not 0.0 < self.curated_fraction <= 1.0:
            raise ValueError("lr must be positive and curated_fraction in (0, 1]")


@dataclass(frozen=True)
class Ablation:
    """Which workflow parts run; the default is the full workflow."""

    relate_edges: bool = True
    tune_gsnn: bool = True

    @property
    def label(self):
        if not self.relate_edges and not self.tune_gsnn:
            return "classifier-only"
        if not self.tune_gsnn:
            return "classifier+relate"
        if not self.relate_edges:
            return "classifier+gsnn"
        return "full"


CLASSIFIER_ONLY = Ablation(relate_edges=False, tune_gsnn=False)


@dataclass
class SmeSubmission:
    name: str
    ntype: NodeType
    embedding: np.ndarray
    bundles: list

    def validate(self):
        if not self.bundles:
            raise SubmissionError(f"submission {self.name!r} has no bundles")
        for b in self.bundles:
            if b.patches is None:
                raise SubmissionError(f"bundle {b.id!r} in {self.name!r} has no patch matrix")


@dataclass
class CuratedDataset:
    ids: list
    target_fraction: float
    base_size: int
    uncovered: int = 0

    @property
    def fraction(self):
        return len(self.ids) / max(self.base_size, 1)


@dataclass
class StreamItem:
    bundle: FeatureBundle
    concept: str = None  # set for samples derived from a submission

    @property
    def id(self):
        return self.bundle.id


@dataclass
class AdditionReport:
    concepts: list
    strategy: str = "one_by_one"
    ablation: str = "full"
    edges: list = field(default_factory=list)
    initial_bias: dict = field(default_factory=dict)
    stage1_loss: list = field(default_factory=list)
    stage2_loss: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, indent=1)


# --- data ---------------------------------------------------------------------

def feature_std(bundles):
    """Per-dimension std of image embeddings and patch entries over ``bundles``."""
    e = np.stack([b.e_img for b in bundles])
    std_e = e.std(axis=0) if len(bundles) > 1 else np.ones(e.shape[1])
    with_p = [b.patches for b in bundles if b.patches is not None]
    std_p = None
    if with_p:
        p = np.stack(with_p)
        std_p = p.std(axis=0) if len(with_p) > 1 else np.ones(p.shape[1:])
    return std_e, std_p


def augment(bundle, n, noise_scale, rng, std_e=None, std_p=None, drop_prob=0.3):
    """``n`` jittered copies with unchanged labels.

    Gaussian noise of ``noise_scale * std`` per dimension is added to the image
    embedding and patches; with two or more detections one is dropped with
    probability ``drop_prob``.
    """
    out = []
    std_e = np.ones_like(bundle.e_img) if std_e is None else std_e
    for k in range(n):
        e = bundle.e_img + noise_scale * std_e * rng.normal(size=bundle.e_img.shape)
        patches = None
        if bundle.patches is not None:
            sp = np.ones_like(bundle.patches) if std_p is None else std_p
            patches = bundle.patches + noise_scale * sp * rng.normal(size=bundle.patches.shape)
        dets = list(bundle.detections)
        if len(dets) >= 2 and rng.random() < drop_prob:
            dets.pop(int(rng.integers(len(dets))))
        out.append(FeatureBundle(f"{bundle.id}~aug{k}", e, dets, list(bundle.labels), patches))
    return out


def _largest_bin(bins):
    return max(bins, key=lambda b: (b[1] - b[0] + 1, -b[0]))


def _split_bins(bins, node):
    out = []
    for lo, hi in bins:
        if lo <= node <= hi:
            if lo <= node - 1:
                out.append((lo, node - 1))
            if node + 1 <= hi:
                out.append((node + 1, hi))
        else:
            out.append((lo, hi))
    return out


def mdes_from_expansions(expanded, n_nodes, cap=None):
    """Binning selection over precomputed expansions (ordered ``(id, node set)`` pairs).

    Bins are maximal runs of not-yet-covered node ids, starting as one run
    over every node. An image is kept when it expands a node inside the
    largest bin (ties: lowest start); each node it expands then divides
    whichever bin contains it. Stops when no bin is left or ``cap`` is hit.
    Returns ``(selected ids, remaining bins)``.
    """
    bins = [(0, n_nodes - 1)] if n_nodes else []
    chosen = []
    for bid, nodes in expanded:
        if not bins or (cap is not None and len(chosen) >= cap):
            break
        lo, hi = _largest_bin(bins)
        if any(lo <= n <= hi for n in nodes):
            chosen.append(bid)
            for n in sorted(nodes):
                bins = _split_bins(bins, n)
    return chosen, bins


def mdes_select(bundles, system, fraction=0.02, steps=None):
    """Curate a diverse slice of ``bundles`` (processed once, in id order)."""
    ordered = sorted(bundles, key=lambda b: b.id)
    cap = max(1, math.ceil(fraction * len(ordered)))
    n = system.layout.n_nodes

    def stream():
        with nc.no_grad():
            for b in ordered:
                state, _ = system.forward(b, steps=steps)
                yield b.id, {nid for nid in state.active if nid < n}

    chosen, bins = mdes_from_expansions(stream(), n, cap)
    return CuratedDataset(chosen, fraction, len(ordered), sum(hi - lo + 1 for lo, hi in bins))


def random_subset(bundles, size, rng):
    ordered = sorted(bundles, key=lambda b: b.id)
    pick = sorted(rng.choice(len(ordered), size=min(size, len(ordered)), replace=False))
    return [ordered[i].id for i in pick]


def build_stream(submissions, curated, schedule, rng):
    """Augmented submission bundles plus curated bundles, shuffled."""
    items = []
    reference = [b for s in submissions for b in s.bundles] + list(curated)
    std_e, std_p = feature_std(reference)
    for sub in submissions:
        for b in sub.bundles:
            items.append(StreamItem(b, sub.name))
            for aug in augment(b, schedule.n_augment, schedule.noise_scale, rng, std_e, std_p,
                               schedule.drop_prob):
                items.append(StreamItem(aug, sub.name))
    items += [StreamItem(b) for b in curated]
    order = rng.permutation(len(items))
    return [items[i] for i in order]


# --- node insertion -------------------------------------------------------------

def insert_node(system, sub, use_relate=True, report=None):
    """Steps 1-3: add, connect and initialise one concept. Returns its id."""
    sub.validate()
    g = system.graph
    if sub.name in g:
        raise SubmissionError(f"concept {sub.name!r} already exists")
    warnings = report.warnings if report is not None else []
    biases = system.store[gsnn.BIAS_PARAM].data[:, 0]
    global_mean = float(biases.mean()) if biases.size else 0.0
    nid = system.add_node(sub.name, sub.ntype, sub.embedding, global_mean)
    proposals = []
    if use_relate:
        pools = [set(s.active) for s in system.traces(sub.bundles)]
        proposals = relate.propose_edges(g, nid, sub.bundles, pools, system.store, system.relate_cfg)
        for e in proposals:
            g.add_edge(e.source, e.target)
            if report is not None:
                report.edges.append([g.nodes[e.source].name, g.nodes[e.target].name, e.likelihood])
    neighbours = sorted(g.neighbors(nid, "both"))
    if neighbours:
        bias = float(np.mean([biases[i] for i in neighbours]))
    else:
        bias = global_mean
        if use_relate:
            msg = f"{sub.name}: no edges proposed; bias falls back to the global mean"
            log.warning(msg)
            warnings.append(msg)
    system.set_bias(nid, bias)
    if report is not None:
        report.initial_bias[sub.name] = bias
    return nid, proposals


# --- training -------------------------------------------------------------------

def _bias_mask(system, rows):
    mask = np.zeros_like(system.store[gsnn.BIAS_PARAM].data)
    mask[list(rows), 0] = 1.0
    return mask


def finetune(system, submissions, curated, schedule, seed=0, ablation=Ablation(), report=None):
    """Stages 1 and 2 for nodes already inserted (ids must be the last ones)."""
    g = system.graph
    novel_ids = [g.id_of(s.name) for s in submissions]
    rng = np.random.default_rng([seed, 23, *novel_ids])
    stream = build_stream(submissions, curated, schedule, rng)
    tcfg = _TrainView(schedule, seed)
    gsnn_names = [n for n in system.store.names("gsnn.")]
    force = ablation.tune_gsnn

    def forced_for(item):
        return [item.concept] if (force and item.concept is not None) else []

    s1 = []
    if ablation.tune_gsnn and schedule.stage1_epochs > 0:
        names = gsnn_names + [gsnn.BIAS_PARAM]
        opt = nc.SGD(system.store, names, lr=schedule.lr, momentum=schedule.momentum,
                     masks={gsnn.BIAS_PARAM: _bias_mask(system, novel_ids)})

        def stage1_loss(item):
            return system.sample_loss(item.bundle, forced=forced_for(item),
                                      teacher_forcing=schedule.teacher_forcing,
                                      importance_weight=schedule.importance_weight)[1]

        s1, _ = run_epochs(system, stream, names, tcfg, stage1_loss, schedule.stage1_epochs,
                           optimizer=opt, stream_seed=(31, *novel_ids), label="stage1")

    ext_rng = np.random.default_rng([seed, 37, *novel_ids])
    first_new = system.layout.n_nodes
    while system.layout.n_nodes < len(g):
        system.extend_classifier(ext_rng)
    new_cols = list(range(first_new, system.layout.n_nodes))
    masks = classifier.column_mask(system.layout, new_cols)
    names = [classifier.W_PARAM, classifier.B_PARAM]
    lr_scale = {}
    if ablation.tune_gsnn:
        names = gsnn_names + names
        lr_scale = {n: schedule.stage2_gsnn_factor for n in gsnn_names}
    opt = nc.SGD(system.store, names, lr=schedule.lr, momentum=schedule.momentum,
                 lr_scale=lr_scale, masks=masks)
    col_names = [g.nodes[c].name for c in new_cols]

    def stage2_loss(item):
        target = [1.0 if item.concept == name else 0.0 for name in col_names]
        forced = forced_for(item) if schedule.force_stage2 else []
        return system.sample_loss(item.bundle, forced=forced, importance_weight=0.0,
                                  target=target, columns=new_cols)[1]

    s2, _ = run_epochs(system, stream, names, tcfg, stage2_loss, schedule.stage2_epochs,
                       optimizer=opt, stream_seed=(41, *novel_ids), label="stage2")
    system.sync_biases()
    if report is not None:
        report.stage1_loss += s1
        report.stage2_loss += s2
    return s1, s2


@dataclass(frozen=True)
class _TrainView:
    """Adapts a schedule to the fields ``run_epochs`` reads."""

    schedule: FinetuneSchedule
    seed: int

    @property
    def lr(self):
        return self.schedule.lr

    @property
    def momentum(self):
        return self.schedule.momentum

    @property
    def batch_size(self):
        return self.schedule.batch_size


def add_concept(system, submission, curated, schedule=FinetuneSchedule(), seed=0,
                ablation=Ablation(), validation=None, train=True):
    """Full workflow for one concept; mutates ``system`` and returns a report.

    ``curated`` is the list of base bundles mixed into the stream. With
    ``train=False`` only the node insertion steps run.
    """
    report = AdditionReport([submission.name], ablation=ablation.label)
    before = _base_macro(system, validation) if validation else None
    insert_node(system, submission, use_relate=ablation.relate_edges, report=report)
    if train:
        finetune(system, [submission], curated, schedule, seed, ablation, report)
        if validation:
            report.metrics = _metrics(system, validation, [submission.name], before)
    return report


def add_concepts(system, submissions, curated, strategy="one_by_one", schedule=FinetuneSchedule(),
                 seed=0, ablation=Ablation(), validation=None):
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    names = [s.name for s in submissions]
    if len(set(names)) != len(names):
        raise SubmissionError("submission names must be distinct")
    before = _base_macro(system, validation) if validation else None
    report = AdditionReport(names, strategy=strategy, ablation=ablation.label)
    if strategy == "one_by_one":
        for sub in submissions:
            insert_node(system, sub, use_relate=ablation.relate_edges, report=report)
            finetune(system, [sub], curated, schedule, seed, ablation, report)
    else:
        for sub in submissions:
            insert_node(system, sub, use_relate=ablation.relate_edges, report=report)
        finetune(system, submissions, curated, schedule, seed, ablation, report)
    if validation:
        report.metrics = _metrics(system, validation, names, before)
    return report


# --- reporting ------------------------------------------------------------------

def _base_macro(system, bundles, names=None):
    from .evalkit.metrics import macro_ap
    names = names or system.graph.names()[: system.layout.n_nodes]
    cols = [system.graph.id_of(n) for n in names]
    probs = system.predict(bundles)[:, cols]
    truth = system.label_matrix(bundles, names)
    keep = truth.sum(axis=0) > 0
    return macro_ap(probs[:, keep], truth[:, keep]) if keep.any() else float("nan")


def _metrics(system, bundles, novel_names, base_before):
    from .evalkit.metrics import per_label_ap
    names = system.graph.names()
    base_names = [n for n in names if n not in set(novel_names)]
    probs = system.predict(bundles)
    truth = system.label_matrix(bundles, names)
    ap = per_label_ap(probs, truth)
    novel_ap = {n: float(ap[names.index(n)]) for n in novel_names}
    out = {"novel_ap": novel_ap,
           "base_macro_before": base_before,
           "base_macro_after": _base_macro(system, bundles, base_names)}
    return out
