"""Command-line frontend: ``kgfewshot <command> -c config.json [--set key=value ...]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

import argparse
import hashlib
import json
import logging
import os
import sys
from contextlib import contextmanager
from dataclasses import asdict

import numpy as np

from . import fewshot, gsnn, relate
from .classifier import LayoutMismatchError
from .evalkit import experiments as ex
from .evalkit import metrics, world as wmod
from .kgraph import GraphError, NodeType
from .system import ConceptSystem, NumericalError, TrainConfig, load_checkpoint, save_checkpoint, train_base

log = logging.getLogger("kgfewshot")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
LOCK_NAME = ".kgfewshot.lock"
DERIVED_WIDTHS = (("gsnn", "image_width"), ("relate", "patch_width"), ("relate", "word_width"),
                  ("relate", "n_patches"))


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# --- configuration -------------------------------------------------------------

def default_config():
    train = asdict(TrainConfig())
    train.pop("seed")
    cfg = {
        "seed": 0,
        "world": asdict(wmod.SyntheticWorldSpec()),
        "gsnn": asdict(gsnn.GsnnConfig()),
        "relate": asdict(relate.RelateConfig()),
        "train": train,
        "relate_train": {"epochs": ex.PipelineConfig.relate_epochs, "lr": ex.PipelineConfig.relate_lr,
                         "clip": ex.PipelineConfig.relate_clip},
        "schedule": asdict(fewshot.FinetuneSchedule()),
        "paths": {"world": "world", "system": "system", "out": "out"},
        "ks": [1, 5],
        "n_sme": 5,
    }
    cfg["world"].pop("seed")
    for section, key in DERIVED_WIDTHS:
        cfg[section][key] = None
    return cfg


def _merge(base, update, where=""):
    for key, value in update.items():
        if key not in base:
            raise UsageError(f"unknown config key {where}{key!r}")
        if isinstance(base[key], dict) and base[key] and not isinstance(value, dict):
            raise UsageError(f"config key {where}{key!r} must be a table")
        if isinstance(base[key], dict) and isinstance(value, dict) and key != "paths":
            _merge(base[key], value, f"{where}{key}.")
        elif isinstance(base[key], dict) and isinstance(value, dict):
            base[key].update(value)
        else:
            base[key] = value


def parse_override(text):
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise UsageError(f"--set expects key=value, got {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = {}
    cur = node
    parts = key.split(".")
    for p in parts[:-1]:
        cur[p] = {}
        cur = cur[p]
    cur[parts[-1]] = value
    return node


def load_config(path=None, overrides=()):
    cfg = default_config()
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                user = json.load(fh)
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path} is not valid JSON: {exc.msg} (line {exc.lineno})") from None
        if not isinstance(user, dict):
            raise UsageError("config must be a JSON object")
        _merge(cfg, user)
    for text in overrides:
        _merge(cfg, parse_override(text))
    width = cfg["world"]["latent_width"]
    for section, key in DERIVED_WIDTHS:
        want = cfg["world"]["n_patches"] if key == "n_patches" else width
        if cfg[section][key] is None:
            cfg[section][key] = want
        elif cfg[section][key] != want:
            raise UsageError(f"{section}.{key}={cfg[section][key]} conflicts with the world ({want})")
    return cfg


def config_hash(cfg):
    """Digest of the settings that affect results; output locations are left out."""
    blob = json.dumps({k: v for k, v in cfg.items() if k != "paths"}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def header(cfg, command):
    return f"# kgfewshot {command} config={config_hash(cfg)} seed={cfg['seed']}\n"


def _build(kind, values):
    try:
        return kind(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {kind.__name__}: {exc}") from None


def world_spec(cfg):
    spec = _build(wmod.SyntheticWorldSpec, {**cfg["world"], "seed": cfg["seed"]})
    try:
        spec.validate()
    except wmod.WorldSpecError as exc:
        raise UsageError(str(exc)) from None
    return spec


def pipeline_config(cfg):
    rt = cfg["relate_train"]
    return ex.PipelineConfig(
        gsnn=_build(gsnn.GsnnConfig, cfg["gsnn"]),
        relate=_build(relate.RelateConfig, cfg["relate"]),
        train=_build(TrainConfig, {**cfg["train"], "seed": cfg["seed"]}),
        relate_epochs=rt["epochs"], relate_lr=rt["lr"], relate_clip=rt["clip"],
        schedule=_build(fewshot.FinetuneSchedule, cfg["schedule"]),
        n_sme=cfg["n_sme"],
    )


# --- file helpers ---------------------------------------------------------------

@contextmanager
def output_lock(directory):
    """Exclusive lock file; a second mutating command on the same directory fails."""
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, LOCK_NAME)
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise DataError(f"{directory} is locked by another run (remove {path} if stale)") from None
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield directory
    finally:
        os.unlink(path)


def write_text(path, text):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def write_run(directory, cfg, command):
    write_text(os.path.join(directory, "run.json"),
               json.dumps({"command": command, "config_hash": config_hash(cfg), "seed": cfg["seed"],
                           "config": cfg}, sort_keys=True, indent=1) + "\n")


def read_world(cfg):
    path = cfg["paths"]["world"]
    if not os.path.isdir(path):
        raise DataError(f"world directory {path} not found (run synth-gen first)")
    return wmod.load_world(path)


def read_system(cfg, override=None):
    path = override or cfg["paths"]["system"]
    if not os.path.exists(os.path.join(path, "system.json")):
        raise DataError(f"no trained system in {path} (run train first)")
    return ConceptSystem.load(path)


def read_ids(path):
    if not os.path.exists(path):
        raise DataError(f"{path} not found")
    with open(path, encoding="utf-8") as fh:
        return [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]


def write_ids(path, ids, head):
    write_text(path, head + "".join(f"{i}\n" for i in ids))


def find_bundle(world, bundle_id, split=None):
    splits = [split] if split else list(world.splits)
    for s in splits:
        for b in world.splits.get(s, []):
            if b.id == bundle_id:
                return b
    raise DataError(f"unknown bundle {bundle_id!r}")


# --- submissions ------------------------------------------------------------------

def submission_record(name, ntype, embedding, bundles):
    return {"name": name, "type": NodeType(ntype).value, "embedding": [float(x) for x in embedding],
            "bundles": [json.loads(b.to_json()) for b in bundles]}


def load_submission(path):
    """``{"concepts": [{"name", "type", "embedding", "bundles": [...]}, ...]}``."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read submission {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"submission {path} is not valid JSON: {exc.msg}") from None
    subs = []
    try:
        for rec in doc["concepts"]:
            bundles = [wmod.FeatureBundle.from_json(json.dumps(b)) for b in rec["bundles"]]
            sub = fewshot.SmeSubmission(rec["name"], NodeType(rec["type"]),
                                        np.asarray(rec["embedding"], dtype=np.float64), bundles)
            sub.validate()
            subs.append(sub)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed submission {path}: {exc}") from None
    if not subs:
        raise DataError(f"submission {path} lists no concepts")
    return subs


# --- commands -----------------------------------------------------------------------

def cmd_synth_gen(cfg, args):
    spec = world_spec(cfg)
    out = cfg["paths"]["world"]
    head = header(cfg, "synth-gen")
    with output_lock(out):
        world = wmod.generate_world(spec)
        wmod.save_world(world, out, head)
        sub_dir = os.path.join(out, "submissions")
        os.makedirs(sub_dir, exist_ok=True)
        records = []
        for name in world.novel:
            sub = ex.submission(world, name, "train", cfg["n_sme"])
            rec = submission_record(sub.name, sub.ntype, sub.embedding, sub.bundles)
            records.append(rec)
            write_text(os.path.join(sub_dir, f"{name}.json"), json.dumps({"concepts": [rec]}, indent=1) + "\n")
        write_text(os.path.join(sub_dir, "all.json"), json.dumps({"concepts": records}, indent=1) + "\n")
        write_run(out, cfg, "synth-gen")
    print(f"wrote {len(world.graph)} concepts, {sum(len(v) for v in world.splits.values())} bundles to {out}")


def cmd_train(cfg, args):
    world = read_world(cfg)
    pc = pipeline_config(cfg).for_world(world)
    out = cfg["paths"]["system"]
    head = header(cfg, "train")
    ckpt = os.path.join(out, "checkpoint")
    with output_lock(out):
        system = ConceptSystem.build(world.base_graph(), pc.gsnn, pc.relate, seed=cfg["seed"])
        train = world.base_split("train")
        start, losses, opt = 0, [], None
        if args.resume:
            if not os.path.exists(os.path.join(ckpt, "progress.json")):
                raise DataError(f"no checkpoint in {ckpt}")
            start, losses, opt = load_checkpoint(ckpt, system, pc.train)
        stop = pc.train.epochs if args.stop_after is None else min(args.stop_after, pc.train.epochs)
        tcfg = TrainConfig(**{**asdict(pc.train), "epochs": stop})

        def on_epoch(epoch, loss, optimizer):
            losses.append(loss)
            save_checkpoint(ckpt, system, optimizer, epoch + 1, losses)

        train_base(system, train, tcfg, start_epoch=start, optimizer=opt, on_epoch=on_epoch)
        if stop < pc.train.epochs:
            print(f"stopped after epoch {stop}; resume with --resume")
            return
        rel = relate.train_relate(system.graph, train, system.store, system.relate_cfg,
                                  epochs=pc.relate_epochs, lr=pc.relate_lr, seed=cfg["seed"],
                                  clip_norm=pc.relate_clip)
        curated = fewshot.mdes_select(world.clean_split("train"), system, pc.schedule.curated_fraction)
        system.save(out, head)
        write_text(os.path.join(out, "losses.tsv"),
                   head + "# stage\tepoch\tloss\n"
                   + "".join(f"base\t{i + 1}\t{v!r}\n" for i, v in enumerate(losses))
                   + "".join(f"relate\t{i + 1}\t{v!r}\n" for i, v in enumerate(rel)))
        write_ids(os.path.join(out, "curated.txt"), curated.ids, head)
        write_run(out, cfg, "train")
    print(f"trained {len(system.graph)} concepts; final base loss {losses[-1]:.5f}; "
          f"curated {len(curated.ids)} bundles")


def cmd_infer(cfg, args):
    world = read_world(cfg)
    system = read_system(cfg, args.system)
    bundle = find_bundle(world, args.bundle, args.split)
    out = cfg["paths"]["out"]
    head = header(cfg, "infer")
    with output_lock(out):
        state, probs = ex._forward(system, bundle)
        names = system.graph.names()[: system.layout.n_nodes]
        order = sorted(range(len(names)), key=lambda i: (-probs[i], names[i]))
        write_text(os.path.join(out, f"predictions-{bundle.id}.tsv"),
                   head + "# concept\tprobability\n" + "".join(f"{names[i]}\t{probs[i]!r}\n" for i in order))
        write_text(os.path.join(out, f"trace-{bundle.id}.tsv"), head + state.trace.export(system.graph))
    top = ", ".join(f"{names[i]}={probs[i]:.3f}" for i in order[:5])
    print(f"{bundle.id}: {top}")


ABLATIONS = {"full": fewshot.Ablation(), "classifier-only": fewshot.CLASSIFIER_ONLY,
             "classifier+relate": fewshot.Ablation(relate_edges=True, tune_gsnn=False),
             "classifier+gsnn": fewshot.Ablation(relate_edges=False, tune_gsnn=True)}


def curated_bundles(cfg, world, system_dir=None):
    ids = set(read_ids(os.path.join(system_dir or cfg["paths"]["system"], "curated.txt")))
    return [b for b in world.clean_split("train") if b.id in ids]


def cmd_add_concept(cfg, args):
    world = read_world(cfg)
    system = read_system(cfg, args.system)
    subs = load_submission(args.submission)
    pc = pipeline_config(cfg)
    into = args.into or os.path.join(cfg["paths"]["out"], "system-added")
    head = header(cfg, "add-concept")
    with output_lock(into):
        curated = curated_bundles(cfg, world, args.system)
        try:
            report = fewshot.add_concepts(system, subs, curated, args.strategy, pc.schedule, cfg["seed"],
                                          ABLATIONS[args.ablation])
        except fewshot.SubmissionError as exc:
            raise DataError(str(exc)) from None
        system.save(into, head)
        write_text(os.path.join(into, "curated.txt"), head + "".join(f"{b.id}\n" for b in curated))
        write_text(os.path.join(into, "report.json"), report.to_json() + "\n")
        write_text(os.path.join(into, "edges.tsv"),
                   head + "# source\ttarget\tlikelihood\n"
                   + "".join(f"{s}\t{d}\t{p!r}\n" for s, d, p in report.edges))
        write_run(into, cfg, "add-concept")
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(f"added {', '.join(report.concepts)} with {len(report.edges)} edges; system in {into}")


def cmd_mdes(cfg, args):
    world = read_world(cfg)
    system = read_system(cfg, args.system)
    out = cfg["paths"]["out"]
    head = header(cfg, "mdes")
    with output_lock(out):
        cur = fewshot.mdes_select(world.clean_split("train"), system, cfg["schedule"]["curated_fraction"])
        write_ids(os.path.join(out, "curated.txt"), cur.ids,
                  head + f"# selected {len(cur.ids)} of {cur.base_size} ({cur.fraction:.4f});"
                         f" uncovered ids {cur.uncovered}\n")
    print(f"curated {len(cur.ids)} of {cur.base_size} bundles ({cur.fraction:.2%})")


def cmd_eval(cfg, args):
    world = read_world(cfg)
    system = read_system(cfg, args.system)
    if args.split not in world.splits:
        raise DataError(f"unknown split {args.split!r}")
    bundles = world.splits[args.split]
    names = system.graph.names()[: system.layout.n_nodes]
    probs = system.predict(bundles)
    truth = system.label_matrix(bundles, names)
    groups = [system.graph.node(n).ntype.value for n in names]
    try:
        report = metrics.evaluate(probs, truth, names, ks=tuple(cfg["ks"]), groups=groups)
    except metrics.MetricError as exc:
        raise DataError(str(exc)) from None
    out = cfg["paths"]["out"]
    with output_lock(out):
        write_text(os.path.join(out, f"eval-{args.split}.tsv"), report.to_text(header(cfg, "eval")))
    print(f"{args.split}: mAP {report.map:.4f}  MacroAP {report.macro:.4f}  "
          + "  ".join(f"top-{k} {v:.4f}" for k, v in sorted(report.topk.items())))


def _prepared(cfg, args):
    world = read_world(cfg)
    system = read_system(cfg, args.system)
    ids = read_ids(os.path.join(args.system or cfg["paths"]["system"], "curated.txt"))
    pc = pipeline_config(cfg).for_world(world)
    return ex.Prepared(world, system, pc, ids, [], [])


def cmd_ablate(cfg, args):
    prep = _prepared(cfg, args)
    seed = cfg["seed"]
    which = args.which
    if which == "T":
        steps = args.steps or list(range(1, prep.system.gsnn_cfg.steps + 3))
        rows = ex.t_ablation(prep, steps)
        body = ex.table(["T", "full_expansion_pct", "mAP"], rows)
        body += f"# effective diameter {ex.effective_diameter(prep.system.graph)}\n"
    elif which == "strategy":
        res = ex.strategies(prep, seed)
        body = ex.table(["strategy", "aggregate_macro_ap", "novel_macro_ap"],
                        [(k, v["aggregate"], v["novel"]) for k, v in sorted(res.items())])
    elif which == "robustness":
        node = ex.robustness_probe(prep, args.trials, "node", seed)
        edge = ex.robustness_probe(prep, args.trials, "edge", seed)
        body = ex.table(["variant", "ignored", "removed"],
                        [("node", float(node[0]), float(node[1])), ("edge", float(edge[0]), float(edge[1]))])
    elif which == "restoration":
        rows = []
        for name in prep.system.graph.names():
            try:
                r = ex.edge_restoration_experiment(prep, name, seed)
            except ex.ExperimentError:
                continue
            rows.append((name, len(r.truth), len(r.proposed), r.restored, r.random_baseline))
        if not rows:
            raise DataError("no concept qualifies for restoration")
        body = ex.table(["concept", "true_edges", "proposed", "restored", "random_baseline"], rows)
        body += f"# mean restored {np.mean([r[3] for r in rows])!r} random {np.mean([r[4] for r in rows])!r}\n"
    else:
        rows = ex.components(prep, seed)
        body = ex.table(["configuration", "relate", "gsnn", "mdes", "novel_macro_ap", "base_macro_ap"],
                        [(lab, _mark(r), _mark(g), _mark(m), a, b) for lab, r, g, m, a, b in rows])
    out = cfg["paths"]["out"]
    with output_lock(out):
        write_text(os.path.join(out, f"ablate-{which}.tsv"), header(cfg, f"ablate {which}") + body)
    sys.stdout.write(body)


def _mark(flag):
    return "x" if flag else "-"


# --- entry point ------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="JSON config file (defaults apply when omitted)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field, e.g. --set train.epochs=5")
    common.add_argument("-v", "--verbose", action="store_true")
    p = _Parser(prog="kgfewshot", description="Knowledge-graph few-shot concept learning.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("synth-gen", parents=[common], help="generate a synthetic world")
    t = sub.add_parser("train", parents=[common], help="train the base system")
    t.add_argument("--resume", action="store_true", help="continue from the checkpoint")
    t.add_argument("--stop-after", type=int, help="stop after this many base epochs")
    i = sub.add_parser("infer", parents=[common], help="predict one bundle and write its trace")
    i.add_argument("--bundle", required=True)
    i.add_argument("--split", choices=("train", "val", "test"))
    i.add_argument("--system")
    a = sub.add_parser("add-concept", parents=[common], help="add concepts from a submission file")
    a.add_argument("--submission", required=True)
    a.add_argument("--strategy", choices=fewshot.STRATEGIES, default="one_by_one")
    a.add_argument("--ablation", choices=sorted(ABLATIONS), default="full")
    a.add_argument("--system", help="system to extend (default: paths.system)")
    a.add_argument("--into", help="output directory (default: <paths.out>/system-added)")
    m = sub.add_parser("mdes", parents=[common], help="select the curated anti-forgetting set")
    m.add_argument("--system")
    e = sub.add_parser("eval", parents=[common], help="evaluate a system on a split")
    e.add_argument("--split", default="test")
    e.add_argument("--system")
    b = sub.add_parser("ablate", parents=[common], help="run one experiment of the battery")
    b.add_argument("which", choices=("T", "strategy", "robustness", "restoration", "components"))
    b.add_argument("--system")
    b.add_argument("--trials", type=int, default=100)
    b.add_argument("--steps", type=int, nargs="+")
    return p


COMMANDS = {"synth-gen": cmd_synth_gen, "train": cmd_train, "infer": cmd_infer,
            "add-concept": cmd_add_concept, "mdes": cmd_mdes, "eval": cmd_eval, "ablate": cmd_ablate}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.set)
        COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        print(f"kgfewshot: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"kgfewshot: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, GraphError, LayoutMismatchError, wmod.BundleFormatError, ex.ExperimentError,
            fewshot.SubmissionError, OSError) as exc:
        print(f"kgfewshot: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
