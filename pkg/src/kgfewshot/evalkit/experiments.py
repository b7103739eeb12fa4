"""Experiment battery over a synthetic world.

Every experiment takes a trained :class:`ConceptSystem` and works on copies,
so a single base system can serve several experiments.
"""

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .. import fewshot
from .. import gsnn as _gsnn
from .. import relate as _relate
from ..system import ConceptSystem, TrainConfig, train_base
from .world import FeatureBundle
from .metrics import macro_ap, mean_ap, per_label_ap

log = logging.getLogger(__name__)


class ExperimentError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    gsnn: _gsnn.GsnnConfig = field(default_factory=_gsnn.GsnnConfig)
    relate: _relate.RelateConfig = field(default_factory=_relate.RelateConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    relate_epochs: int = 40
    relate_lr: float = 5e-2
    relate_clip: float = 1.0
    schedule: fewshot.FinetuneSchedule = field(default_factory=fewshot.FinetuneSchedule)
    n_sme: int = 5

    def for_world(self, world):
        """Copy with image, patch and word widths taken from the world."""
        v = world.spec.latent_width
        g = _gsnn.GsnnConfig(**{**self.gsnn.__dict__, "image_width": v})
        r = _relate.RelateConfig(**{**self.relate.__dict__, "patch_width": v, "word_width": v,
                                   "n_patches": world.spec.n_patches})
        return replace(self, gsnn=g, relate=r)


@dataclass
class Prepared:
    world: object
    system: ConceptSystem
    config: PipelineConfig
    curated: list
    base_losses: list
    relate_losses: list

    def curated_bundles(self):
        ids = set(self.curated)
        return [b for b in self.world.clean_split("train") if b.id in ids]


def prepare(world, cfg=PipelineConfig(), seed=0):
    """Train the base system and RelaTe on the world's base split, then curate."""
    cfg = cfg.for_world(world)
    system = ConceptSystem.build(world.base_graph(), cfg.gsnn, cfg.relate, seed=seed)
    train = world.base_split("train")
    tcfg = TrainConfig(**{**cfg.train.__dict__, "seed": seed})
    losses, _ = train_base(system, train, tcfg)
    rel = _relate.train_relate(system.graph, train, system.store, system.relate_cfg,
                              epochs=cfg.relate_epochs, lr=cfg.relate_lr, seed=seed,
                                clip_norm=cfg.relate_clip)
    curated = fewshot.mdes_select(world.clean_split("train"), system, cfg.schedule.curated_fraction).ids
    return Prepared(world, system, cfg, curated, losses, rel)


def submission(world, name, split="train", n=5, graph=None):
    node = (graph or world.graph).node(name)
    bundles = world.pool(split, name)[:n]
    if not bundles:
        raise ExperimentError(f"no {split} bundles contain {name!r}")
    return fewshot.SmeSubmission(name, node.ntype, node.embedding.copy(), bundles)


def class_aps(system, bundles, names):
    probs = system.predict(bundles)
    cols = [system.graph.id_of(n) for n in names]
    truth = system.label_matrix(bundles, names)
    return per_label_ap(probs[:, cols], truth)


def novel_macro(system, bundles, names):
    ap = class_aps(system, bundles, names)
    ok = ~np.isnan(ap)
    return float(ap[ok].mean()) if ok.any() else float("nan")


def base_macro(system, bundles, names):
    """Macro AP over the named base concepts (labels without positives skipped)."""
    cols = [system.graph.id_of(n) for n in names]
    probs = system.predict(bundles)[:, cols]
    truth = system.label_matrix(bundles, names)
    keep = truth.sum(axis=0) > 0
    return macro_ap(probs[:, keep], truth[:, keep])


# --- few-shot uplift and component ablation ------------------------------------

COMPONENT_ROWS = (
    ("classifier-only", fewshot.Ablation(relate_edges=False, tune_gsnn=False), False),
    ("+relate", fewshot.Ablation(relate_edges=True, tune_gsnn=False), False),
    ("+relate+gsnn", fewshot.Ablation(relate_edges=True, tune_gsnn=True), False),
    ("+relate+gsnn+mdes", fewshot.Ablation(relate_edges=True, tune_gsnn=True), True),
)


def random_curated(prep, seed):
    rng = np.random.default_rng([seed, 59])
    return fewshot.random_subset(prep.world.clean_split("train"), len(prep.curated), rng)


def run_addition(prep, names, ablation=fewshot.Ablation(), curated_ids=None, strategy="one_by_one", seed=0):
    """Add ``names`` to a copy of the prepared system; returns ``(system, report)``."""
    system = prep.system.copy()
    ids = set(prep.curated if curated_ids is None else curated_ids)
    curated = [b for b in prep.world.clean_split("train") if b.id in ids]
    subs = [submission(prep.world, n, "train", prep.config.n_sme) for n in names]
    report = fewshot.add_concepts(system, subs, curated, strategy, prep.config.schedule, seed, ablation)
    return system, report


def uplift(prep, seed=0):
    """Per-concept novel AP for the full workflow and the classifier-only ablation."""
    test = prep.world.splits["test"]
    out = {"full": {}, "classifier-only": {}}
    for name in prep.world.novel:
        for label, abl in (("full", fewshot.Ablation()), ("classifier-only", fewshot.CLASSIFIER_ONLY)):
            system, _ = run_addition(prep, [name], abl, seed=seed)
            out[label][name] = float(class_aps(system, test, [name])[0])
    return {k: (float(np.nanmean(list(v.values()))), v) for k, v in out.items()}


def components(prep, seed=0):
    """Rows ``(label, novel Macro AP, base Macro AP after)`` mirroring the component ledger."""
    test = prep.world.splits["test"]
    held_base = prep.world.base_split("test")
    base_names = prep.system.graph.names()
    rows = []
    for label, abl, use_mdes in COMPONENT_ROWS:
        curated = prep.curated if use_mdes else random_curated(prep, seed)
        aps, bases = [], []
        for name in prep.world.novel:
            system, _ = run_addition(prep, [name], abl, curated, seed=seed)
            aps.append(novel_macro(system, test, [name]))
            bases.append(base_macro(system, held_base, base_names))
        rows.append((label, abl.relate_edges, abl.tune_gsnn, use_mdes,
                     float(np.nanmean(aps)), float(np.mean(bases))))
    return rows


def strategies(prep, seed=0):
    """Macro AP after adding every held-out concept with each strategy.

    ``aggregate`` covers every concept on the full test split; ``novel``
    only the added ones.
    """
    test = prep.world.splits["test"]
    out = {}
    for strategy in fewshot.STRATEGIES:
        system, _ = run_addition(prep, list(prep.world.novel), strategy=strategy, seed=seed)
        out[strategy] = {"aggregate": base_macro(system, test, system.graph.names()),
                         "novel": novel_macro(system, test, prep.world.novel)}
    return out


def forgetting(prep, seed=0):
    """Base Macro AP drop after each addition, with MDES and with a random equal-size slice."""
    held = prep.world.base_split("test")
    names = prep.system.graph.names()
    before = base_macro(prep.system, held, names)
    out = {}
    for label, ids in (("mdes", prep.curated), ("random", random_curated(prep, seed))):
        drops = []
        for name in prep.world.novel:
            system, _ = run_addition(prep, [name], curated_ids=ids, seed=seed)
            drops.append(before - base_macro(system, held, names))
        out[label] = float(np.mean(drops))
    out["before"] = before
    return out


# --- edge restoration ------------------------------------------------------------

@dataclass
class RestorationResult:
    concept: str
    truth: list
    proposed: list
    restored: float
    random_baseline: float


def legal_incident_pairs(g, nid):
    """Direction-legal pairs between ``nid`` and every other node."""
    return _relate.candidate_pairs(g, nid, range(len(g)))


def edge_restoration_experiment(prep, concept, seed=0, split="test"):
    """Remove ``concept``, re-insert it from fresh bundles, score edge recall.

    The random baseline is the expected recall of drawing the same number
    of direction-legal incident pairs uniformly at random.
    """
    system = prep.system.copy()
    g = system.graph
    if concept not in g:
        raise ExperimentError(f"unknown concept {concept!r}")
    nid = g.id_of(concept)
    truth = sorted((g.nodes[s].name, g.nodes[d].name) for s, d in g.edges if nid in (s, d))
    if not truth:
        raise ExperimentError(f"{concept!r} has no edges to restore")
    node = g.nodes[nid]
    bundles = prep.world.pool(split, concept)[: prep.config.n_sme]
    if not bundles:
        raise ExperimentError(f"no {split} bundles contain {concept!r}")
    sub = fewshot.SmeSubmission(concept, node.ntype, node.embedding.copy(), bundles)
    system.remove_concept(concept)
    report = fewshot.add_concept(system, sub, [], prep.config.schedule, seed, train=False)
    proposed = sorted((s, d) for s, d, _ in report.edges)
    hits = len(set(proposed) & set(truth))
    legal = len(legal_incident_pairs(system.graph, system.graph.id_of(concept)))
    rand = min(len(proposed), legal) / legal if legal else 0.0
    return RestorationResult(concept, truth, proposed, hits / len(truth), rand)


# --- robustness probes ------------------------------------------------------------

def _unrelated_nodes(g, bundle):
    labels = {g.id_of(n) for n in bundle.labels if n in g}
    near = set(labels)
    for nid in labels:
        near |= g.neighbors(nid, "both")
    return [n.id for n in g.nodes if n.id not in near and not n.ntype.is_leaf]


def robustness_probe(prep, trials=100, variant="node", seed=0, split="test"):
    """Inject one wrong detection (or one wrong edge) per trial.

    Returns ``(ignored fraction, removed fraction)``. A wrong detection is
    ignored when nothing is expanded from it and removed when the classifier
    gives it probability < 0.5. A wrong edge is ignored when its far end is
    not activated through it; removed when that node ends below 0.5.
    """
    if variant not in ("node", "edge"):
        raise ExperimentError(f"unknown robustness variant {variant!r}")
    rng = np.random.default_rng([seed, 71, 0 if variant == "node" else 1])
    bundles = [b for b in prep.world.base_split(split) if b.detections] or prep.world.base_split(split)
    ignored = removed = done = 0
    for _ in range(trials):
        b = bundles[int(rng.integers(len(bundles)))]
        system = prep.system if variant == "node" else prep.system.copy()
        g = system.graph
        pool = _unrelated_nodes(g, b)
        if not pool:
            continue
        wrong = int(rng.choice(pool))
        if variant == "node":
            probe = FeatureBundle(b.id, b.e_img, sorted(set(b.detections) | {g.nodes[wrong].name}),
                                          b.labels, b.patches)
            state, probs = _forward(system, probe)
            expanded_from = any(p == wrong for p, _, _ in state.trace.expansion_edges)
            ignored += not expanded_from
            removed += probs[wrong] < 0.5
        else:
            anchors = [g.id_of(d) for d in b.detections if d in g]
            if not anchors:
                continue
            anchor = int(rng.choice(anchors))
            g.add_edge(anchor, wrong)
            state, probs = _forward(system, b)
            via = any(p == anchor and c == wrong for p, c, _ in state.trace.expansion_edges)
            ignored += not via
            removed += probs[wrong] < 0.5
        done += 1
    if not done:
        raise ExperimentError("no usable trials")
    return ignored / done, removed / done


def _forward(system, bundle):
    from .. import numcore as nc
    with nc.no_grad():
        state, probs = system.forward(bundle)
    return state, probs.data[0]


# --- propagation-step ablation ------------------------------------------------------

def effective_diameter(g, quantile=0.9):
    """Quantile of undirected shortest-path lengths over connected pairs."""
    lengths = []
    for src in range(len(g)):
        dist = {src: 0}
        frontier = [src]
        while frontier:
            nxt = []
            for u in frontier:
                for w in g.neighbors(u, "both"):
                    if w not in dist:
                        dist[w] = dist[u] + 1
                        nxt.append(w)
            frontier = nxt
        lengths += [d for n, d in dist.items() if n != src]
    if not lengths:
        return 0
    return int(math.ceil(np.quantile(lengths, quantile)))


def t_ablation(prep, steps=(1, 2, 3, 4, 5), split="test", horizon=None):
    """Rows ``(T, full-expansion %, mAP)``.

    An expansion is full at ``T`` when its active set already equals the
    active set reached after ``horizon`` rounds (default: the node count).
    """
    system = prep.system
    bundles = prep.world.base_split(split)
    horizon = horizon or len(system.graph)
    ref = [set(s.active) for s in system.traces(bundles, steps=horizon)]
    truth = system.label_matrix(bundles)
    keep = truth.sum(axis=0) > 0
    rows = []
    for T in steps:
        states = system.traces(bundles, steps=T)
        full = np.mean([set(s.active) == r for s, r in zip(states, ref)]) * 100.0
        probs = system.predict(bundles, steps=T)
        rows.append((T, float(full), mean_ap(probs[:, keep], truth[:, keep])))
    return rows


# --- report layout ------------------------------------------------------------------

def table(header, rows, fmt=None):
    fmt = fmt or (lambda v: f"{v:.4f}" if isinstance(v, float) else str(v))
    lines = ["\t".join(header)]
    for row in rows:
        lines.append("\t".join(fmt(v) for v in row))
    return "\n".join(lines) + "\n"
