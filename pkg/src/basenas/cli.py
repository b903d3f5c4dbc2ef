"""Command-line entry point: ``basenas <subcommand> --config run.json``.

Exit status 0 on success, 2 on configuration or usage errors, 1 on runtime
faults. Failures print one line ``basenas: error[<kind>]: <message>`` on
stderr.
"""
import argparse
import glob
import json
import os
import sys
import time

import numpy as np

from . import config as C
from . import params as P
from . import runio
from .cells import OP_NAMES, OpKind, SuperNetConfig, build_supernet, init_params
from .derive import (FullNetConfig, Genotype, TrainSchedule, build_full_network,
                     commit_adapted, derive_genotype, fast_adapt_experiment, init_full_params,
                     pca_export, train_full, uniform_genotype)
from .errors import BaseNasError, ConfigError
from .fewshot import FewShotConfig, fewshot_eval, fewshot_search
from .meta import ElboObjective, MetaTrainConfig, inner_adapt, meta_train
from .rng import stream
from .tasks import (TaskSource, generate_synthetic_corpus, load_corpus, save_corpus,
                    split_classes)
from .variational import CELL_TYPES, VariationalConfig, arch_probs, temperature

CHECKPOINT = "checkpoint.bmc"


# --------------------------------------------------------------------------
# building blocks from a validated config


def build_corpus(cfg):
    c = cfg.get("corpus") or C.validate({"corpus": {}})["corpus"]
    if c["path"]:
        return load_corpus(c["path"])
    seed = cfg["seed"] if c["seed"] is None else c["seed"]
    return generate_synthetic_corpus(seed, classes=c["classes"], per_class=c["per_class"],
                                     size=c["size"], noise=c["noise"])


def _tasks_section(cfg):
    return cfg.get("tasks") or C.validate({"tasks": {}})["tasks"]


def build_source(cfg, corpus, family=None):
    t = _tasks_section(cfg)
    fams = (family,) if family else (tuple(t["families"]) if t["families"] else None)
    if corpus.families is None:
        fams = None
    return TaskSource(corpus, t["n_classes"], tuple(t["resolutions"]), fams, cfg["seed"],
                      t["train_frac"])


def _heads(raw):
    return {int(k): int(v) for k, v in raw.items()}


def build_net(cfg):
    s = cfg.get("supernet") or C.validate({"supernet": {}})["supernet"]
    return build_supernet(SuperNetConfig(cells=s["cells"], channels=s["channels"],
                                         n_classes=_tasks_section(cfg)["n_classes"],
                                         heads=_heads(s["heads"]),
                                         prior_sigma=s["prior_sigma"], seed=cfg["seed"]))


def variational_config(cfg):
    v = cfg["variational"]
    return VariationalConfig(tau0=float(v["tau0"]), tau_min=float(v["tau_min"]),
                             tau_decay=float(v["tau_decay"]), beta=float(v["beta"]),
                             weight_mode=v["weight_mode"], mc_samples=v["mc_samples"])


def meta_config(cfg):
    m = cfg["meta"]
    return MetaTrainConfig(epochs=m["epochs"], tasks_per_epoch=m["tasks_per_epoch"],
                           inner_steps=m["inner_steps"], inner_lr=float(m["inner_lr"]),
                           arch_lr=float(m["arch_lr"]), meta_lr=float(m["meta_lr"]),
                           batch_size=m["batch_size"], variational=variational_config(cfg),
                           seed=cfg["seed"], workers=cfg["workers"])


def run_hash(cfg):
    """Config digest stored in checkpoints; ignores fields that cannot change W."""
    c = json.loads(json.dumps(cfg))
    c.pop("out", None)
    c.pop("workers", None)
    c.get("meta", {}).pop("epochs", None)
    return runio.config_hash(c)


def derive_tasks(cfg, corpus):
    d = cfg["derive"]
    src = build_source(cfg, corpus, d["family"])
    return [src.task("derive", i) for i in range(d["tasks"])]


def derive_tau(cfg, epoch):
    tau = cfg["derive"]["tau"]
    return float(tau) if tau is not None else temperature(variational_config(cfg), epoch)


def load_genotype(spec):
    if spec.startswith("uniform:"):
        name = spec.split(":", 1)[1]
        if name not in OP_NAMES:
            raise ConfigError(f"unknown op {name!r}")
        return uniform_genotype(OpKind(OP_NAMES.index(name)))
    with open(spec) as f:
        return Genotype.from_text(f.read())


def _write_text(path, text):
    with open(path, "w") as f:
        f.write(text)


def _pool_mass(params):
    pr = arch_probs(params)
    pools = [OpKind.MAX_POOL_3X3, OpKind.AVG_POOL_3X3]
    return float(np.mean([pr[c][:, pools].sum(axis=1).mean() for c in CELL_TYPES]))


class _Timer:
    def __init__(self):
        self.rows = {}

    def add(self, name, seconds):
        self.rows[name] = self.rows.get(name, 0.0) + seconds

    def write(self, out):
        with open(os.path.join(out, "timings.json"), "w") as f:
            json.dump(self.rows, f, indent=1, sort_keys=True)


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_corpus(cfg, args, out, timer):
    corpus = build_corpus(cfg)
    save_corpus(corpus, os.path.join(out, "corpus.json"))


def cmd_meta_train(cfg, args, out, timer):
    if args.epochs is not None:
        cfg["meta"]["epochs"] = args.epochs
    mcfg = meta_config(cfg)
    corpus = build_corpus(cfg)
    net = build_net(cfg)
    source = build_source(cfg, corpus)
    obj = ElboObjective(net, mcfg.variational)
    chash = run_hash(cfg)
    start = 0
    if args.resume:
        ck = runio.checkpoint_load(args.resume)
        if ck.config_hash != chash:
            raise ConfigError("checkpoint was written under a different configuration")
        if ck.seed != cfg["seed"]:
            raise ConfigError(f"checkpoint seed {ck.seed} != config seed {cfg['seed']}")
        W, start = ck.params, ck.epoch
    else:
        W = init_params(net, cfg["seed"])
    ck_path = os.path.join(out, CHECKPOINT)
    runio.checkpoint_save(ck_path, runio.Checkpoint(W, start, cfg["seed"], chash))
    sink = runio.CsvSink(os.path.join(out, "metrics.csv"), ["epoch", "tau", "mean_final_loss"],
                         append=start > 0)

    def log(row):
        timer.add(f"epoch_{row['epoch']:04d}", row["wall_seconds"])
        sink({k: v for k, v in row.items() if k != "wall_seconds"})

    def save(epoch, params):
        runio.checkpoint_save(ck_path, runio.Checkpoint(params, epoch + 1, cfg["seed"], chash))

    try:
        meta_train(W, source, mcfg, obj, sinks=(log,), on_epoch=save, start_epoch=start)
    finally:
        sink.close()


def _load_checkpoint(args, cfg):
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    return runio.checkpoint_load(args.checkpoint)


def cmd_adapt(cfg, args, out, timer):
    ck = _load_checkpoint(args, cfg)
    mcfg = meta_config(cfg)
    corpus = build_corpus(cfg)
    net = build_net(cfg)
    obj = ElboObjective(net, mcfg.variational)
    tau = derive_tau(cfg, ck.epoch)
    os.makedirs(os.path.join(out, "adapted"), exist_ok=True)
    with runio.CsvSink(os.path.join(out, "adapt.csv")) as sink:
        for i, task in enumerate(derive_tasks(cfg, corpus)):
            r = inner_adapt(ck.params, task, mcfg, obj, key=("derive", i), tau=tau)
            runio.checkpoint_save(os.path.join(out, "adapted", f"{i:03d}.bmc"),
                                  runio.Checkpoint(r.params, ck.epoch, ck.seed, ck.config_hash))
            sink({"task": i, "family": task.spec.family or "", "resolution": task.resolution,
                  "classes": " ".join(map(str, task.spec.class_ids)), "tau": tau,
                  "final_loss": r.losses[-1] if r.losses else float("nan"),
                  "pool_mass": _pool_mass(r.params)})


def _write_genotype(out, genotype, probs):
    _write_text(os.path.join(out, "genotype.txt"), genotype.to_text())
    rows = []
    for c in CELL_TYPES:
        for e in range(probs[c].shape[0]):
            rows.append({"cell": c, "edge": e, **{OP_NAMES[j]: probs[c][e, j]
                                                  for j in range(probs[c].shape[1])}})
    runio.write_csv(os.path.join(out, "probs.csv"), rows)


def cmd_derive(cfg, args, out, timer):
    ck = _load_checkpoint(args, cfg)
    tau = derive_tau(cfg, ck.epoch)
    if args.adapted:
        paths = sorted(glob.glob(os.path.join(args.adapted, "*.bmc")))
        if not paths:
            raise ConfigError(f"no adapted checkpoints in {args.adapted}")
        genotype, probs = commit_adapted([runio.checkpoint_load(p).params for p in paths], tau)
    else:
        mcfg = meta_config(cfg)
        corpus = build_corpus(cfg)
        net = build_net(cfg)
        obj = ElboObjective(net, mcfg.variational)
        genotype, probs, _ = derive_genotype(ck.params, derive_tasks(cfg, corpus), mcfg, obj,
                                             tau)
    _write_genotype(out, genotype, probs)


def _full_config(cfg, n_classes, heads, section="full"):
    f = cfg[section]
    return FullNetConfig(cells=f["cells"], channels=f["channels"], n_classes=n_classes,
                         heads=heads, seed=cfg["seed"])


def cmd_train_full(cfg, args, out, timer):
    if not args.genotype:
        raise ConfigError("--genotype is required")
    genotype = load_genotype(args.genotype)
    f = cfg["full"]
    corpus = build_corpus(cfg)
    task = build_source(cfg, corpus, f["family"]).task("full", 0)
    s = cfg.get("supernet") or C.validate({"supernet": {}})["supernet"]
    net = build_full_network(genotype, _full_config(cfg, task.n_classes, _heads(s["heads"])))
    theta = init_full_params(net, cfg["seed"])
    theta, trace = train_full(net, theta, task, TrainSchedule(
        epochs=f["epochs"], lr=float(f["lr"]), batch_size=f["batch_size"], seed=cfg["seed"]))
    runio.write_csv(os.path.join(out, "trace.csv"), trace)
    runio.checkpoint_save(os.path.join(out, "full.bmc"),
                          runio.Checkpoint(theta, f["epochs"], cfg["seed"]))
    with open(os.path.join(out, "full.json"), "w") as fh:
        json.dump({"param_count": net.param_count(), "genotype": genotype.digest()}, fh,
                  indent=1, sort_keys=True)


def cmd_fast_adapt(cfg, args, out, timer):
    ck = _load_checkpoint(args, cfg)
    fa = cfg["fast_adapt"]
    mcfg = meta_config(cfg)
    corpus = build_corpus(cfg)
    net = build_net(cfg)
    obj = ElboObjective(net, mcfg.variational)
    task = build_source(cfg, corpus, fa["family"]).task("heldout", 0)
    tau = derive_tau(cfg, ck.epoch) if "derive" in cfg else temperature(mcfg.variational,
                                                                         ck.epoch)
    curves = fast_adapt_experiment(net, ck.params, task, fa["epochs"], mcfg, obj, tau,
                                   tuple(fa["arms"]), seed=cfg["seed"],
                                   scratch_params=init_params(net, cfg["seed"]))
    rows = [{"epoch": e, **{a: curves[a][e] for a in fa["arms"]}}
            for e in range(fa["epochs"] + 1)]
    runio.write_csv(os.path.join(out, "fast_adapt.csv"), rows, ["epoch", *fa["arms"]])


def cmd_pca_export(cfg, args, out, timer):
    if not args.adapted:
        raise ConfigError("--adapted DIR is required")
    paths = sorted(glob.glob(os.path.join(args.adapted, "adapted", "*.bmc")) or
                   glob.glob(os.path.join(args.adapted, "*.bmc")))
    if not paths:
        raise ConfigError(f"no adapted checkpoints under {args.adapted}")
    labels = [os.path.splitext(os.path.basename(p))[0] for p in paths]
    table = os.path.join(args.adapted, "adapt.csv")
    if os.path.exists(table):
        fams = {int(r["task"]): r["family"] for r in runio.read_csv(table)}
        labels = [fams.get(int(lb), lb) if lb.isdigit() else lb for lb in labels]
    prefix = P.ARCH if args.what == "phi" else P.MU
    X = np.stack([P.flatten(runio.checkpoint_load(p).params, prefix) for p in paths])
    res = pca_export(X, cfg["pca"]["k"])
    rows = [{"sample": i, "label": labels[i],
             **{f"pc{j + 1}": res.coords[i, j] for j in range(res.coords.shape[1])}}
            for i in range(len(paths))]
    runio.write_csv(os.path.join(out, "pca.csv"), rows)
    runio.write_csv(os.path.join(out, "pca_variance.csv"),
                    [{"component": j + 1, "variance": v, "ratio": r}
                     for j, (v, r) in enumerate(zip(res.variances, res.ratios))])
    with open(os.path.join(out, "pca_meta.json"), "w") as f:
        json.dump({"k": res.k, "requested_k": cfg["pca"]["k"], "what": args.what,
                   "warnings": res.warnings}, f, indent=1, sort_keys=True)


def fewshot_setup(cfg):
    fs = cfg["fewshot"]
    fcfg = FewShotConfig(**{k: fs[k] for k in FewShotConfig.__dataclass_fields__
                            if k not in ("seed",)}, seed=cfg["seed"])
    corpus = build_corpus(cfg)
    train, test = split_classes(corpus, fs["test_classes"], stream(cfg["seed"], "split"),
                                fs["family"])
    return fcfg, corpus, train, test


def cmd_fewshot_search(cfg, args, out, timer):
    fcfg, corpus, train, test = fewshot_setup(cfg)
    fs = cfg["fewshot"]
    net = build_supernet(SuperNetConfig(cells=fs["cells"], channels=fs["channels"],
                                        n_classes=fcfg.n_way, heads={fcfg.resolution: 1},
                                        seed=cfg["seed"]))
    W0 = init_params(net, cfg["seed"])
    with runio.CsvSink(os.path.join(out, "search.csv"), ["iteration"]) as sink:
        W, genotype, probs = fewshot_search(net, W0, corpus, train, fcfg, sinks=(sink,))
    runio.checkpoint_save(os.path.join(out, CHECKPOINT),
                          runio.Checkpoint(W, fcfg.search_iterations, cfg["seed"],
                                           run_hash(cfg)))
    _write_genotype(out, genotype, probs)
    with open(os.path.join(out, "split.json"), "w") as f:
        json.dump({"train": list(train), "test": list(test)}, f, indent=1)


def cmd_fewshot_eval(cfg, args, out, timer):
    if not args.genotype:
        raise ConfigError("--genotype is required")
    genotype = load_genotype(args.genotype)
    fcfg, corpus, train, test = fewshot_setup(cfg)
    fs = cfg["fewshot"]
    ncfg = FullNetConfig(cells=fs["cells"], channels=fs["channels"], n_classes=fcfg.n_way,
                         heads={fcfg.resolution: 1}, seed=cfg["seed"])
    r = fewshot_eval(genotype, corpus, train, test, fcfg, ncfg)
    runio.write_csv(os.path.join(out, "fewshot_eval.csv"),
                    [{"genotype": genotype.digest()[:16], "episodes": r.episodes,
                      "mean_accuracy": r.mean, "ci95": r.ci95}])


COMMANDS = {
    "gen-corpus": (cmd_gen_corpus, ()),
    "meta-train": (cmd_meta_train, ("variational", "meta")),
    "adapt": (cmd_adapt, ("variational", "meta", "derive")),
    "derive": (cmd_derive, ("variational", "meta", "derive")),
    "train-full": (cmd_train_full, ("full",)),
    "fast-adapt": (cmd_fast_adapt, ("variational", "meta", "fast_adapt")),
    "pca-export": (cmd_pca_export, ("pca",)),
    "fewshot-search": (cmd_fewshot_search, ("fewshot",)),
    "fewshot-eval": (cmd_fewshot_eval, ("fewshot",)),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def make_parser():
    p = _Parser(prog="basenas", description="Bayesian meta architecture search at desk scale.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="JSON run configuration")
        if name == "meta-train":
            s.add_argument("--epochs", type=int, help="override meta.epochs")
            s.add_argument("--resume", help="checkpoint to continue from")
        if name in ("adapt", "derive", "fast-adapt"):
            s.add_argument("--checkpoint", required=True)
        if name in ("derive", "pca-export"):
            s.add_argument("--adapted", help="directory written by 'adapt'")
        if name == "pca-export":
            s.add_argument("--what", choices=("phi", "psi"), default="phi")
        if name in ("train-full", "fewshot-eval"):
            s.add_argument("--genotype", required=True,
                           help="genotype file, or uniform:<op-name>")
    return p


def _fail(kind, msg, code):
    msg = " ".join(str(msg).split())
    print(f"basenas: error[{kind}]: {msg}", file=sys.stderr)
    return code


def run_command(argv=None):
    try:
        args = make_parser().parse_args(argv)
    except _UsageError as e:
        return _fail("usage", e, 2)
    fn, need = COMMANDS[args.command]
    try:
        cfg = C.load(args.config, need)
        out = C.out_dir(cfg)
        os.makedirs(out, exist_ok=True)
        timer = _Timer()
        t0 = time.perf_counter()
        fn(cfg, args, out, timer)
        timer.add(args.command, time.perf_counter() - t0)
        timer.write(out)
        runio.write_manifest(out, args.command, cfg, cfg["seed"])
    except ConfigError as e:
        return _fail("config", e, 2)
    except (BaseNasError, OSError, ValueError, FloatingPointError) as e:
        return _fail(type(e).__name__, e, 1)
    return 0


def main():
    sys.exit(run_command())


if __name__ == "__main__":
    main()
