"""Command-line driver: ``droidzero COMMAND --config run.yaml``.

Every command reads its inputs from the run directory (or the configured
paths), writes its outputs atomically, and derives its random stream from
the master seed and its own name, so re-running one stage reproduces it
without re-running the others.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import io
import json
import logging
import sys
import zlib
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import callgraph as cg
from . import dataset as ds
from . import evaluation as ev
from . import persist
from .config import MODES, RunConfig, load_config
from .errors import ConfigError, DependencyError, DroidZeroError, ValidationError
from .snn import train_snn
from .vgae import embed_graph, train_vgae, vgae_classify
from .zeroshot import Verdict, build_support_set, classify_many

log = logging.getLogger("droidzero")

COMMANDS = ("synth", "split", "build-graphs", "train-vgae", "embed", "train-snn",
            "classify", "evaluate", "sweep")


def stage_seed(master: int, stage: str) -> int:
    """Seed of one pipeline stage, derived from the master seed and the stage name."""
    seq = np.random.SeedSequence(master, spawn_key=(zlib.crc32(stage.encode("utf-8")),))
    return int(seq.generate_state(1, np.uint32)[0])


class Run:
    """Artifact locations of one run plus helpers shared by the commands."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        out = cfg.out
        p = cfg.paths
        self.api_mapping = Path(p.api_mapping) if p.api_mapping else out / "api_mapping.txt"
        if p.api_extension:
            self.api_extension = Path(p.api_extension)
        elif cfg.synth is not None:
            self.api_extension = out / "api_extension.txt"
        else:
            self.api_extension = None
        self.corpus = Path(p.corpus) if p.corpus else out / "corpus.jsonl"
        self.manifest = Path(p.manifest) if p.manifest else out / "manifest.jsonl"
        self.split = out / "split.txt"
        self.vocab = out / "vocab.tsv"
        self.graphs = out / "graphs.jsonl"
        self.vgae = out / "vgae.json"
        self.vgae_history = out / "vgae_history.csv"
        self.embeddings = out / "embeddings.jsonl"
        self.snn = out / "snn.json"
        self.snn_history = out / "snn_history.csv"
        self.verdicts = out / "verdicts.jsonl"
        self.vgae_verdicts = out / "vgae_verdicts.jsonl"
        self.report_json = out / "report.json"
        self.report_txt = out / "report.txt"
        self.families = out / "families.csv"
        self.sweep_json = out / "sweep.json"

    def need(self, path: Path, producer: str) -> Path:
        if not path.is_file():
            raise DependencyError(f"{path} not found; run '{producer}' first", producer)
        return path

    def seed(self, stage: str) -> int:
        s = stage_seed(self.cfg.seed, stage)
        log.info("%s: master seed %d, stage seed %d", stage, self.cfg.seed, s)
        return s

    def manifest_data(self) -> ds.Manifest:
        return ds.read_manifest(self.need(self.manifest, "synth"))

    def split_data(self) -> ds.SplitSpec:
        return ds.read_split(self.need(self.split, "split"))

    def vocab_data(self):
        return cg.load_vocab(self.need(self.vocab, "build-graphs"))

    def graph_data(self, vocab):
        _, graphs = cg.read_graph_corpus(self.need(self.graphs, "build-graphs"), vocab)
        return {g.app_id: g for g in graphs}

    def embedding_data(self):
        meta, embs = persist.read_embeddings(self.need(self.embeddings, "embed"))
        return meta, {e.app_id: e for e in embs}


def _write_text(path: Path, text: str):
    persist.atomic_write_text(path, text)
    log.info("wrote %s", path)


def _history_csv(history) -> str:
    buf = io.StringIO()
    keys = list(history[0])
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch"] + keys)
    for i, row in enumerate(history, 1):
        w.writerow([i] + [repr(row[k]) for k in keys])
    return buf.getvalue()


def _pick(ids, table, what, producer):
    missing = [i for i in ids if i not in table]
    if missing:
        raise DependencyError(f"{len(missing)} {what} missing (e.g. {missing[0]!r}); "
                              f"re-run '{producer}'", producer)
    return [table[i] for i in ids]


# ---------------------------------------------------------------------------
# commands


def cmd_synth(run: Run):
    cfg = run.cfg
    if cfg.synth is None:
        raise ConfigError("synth: section required for the synth command")
    scfg = ds.SynthConfig(**{**cfg.synth.__dict__, "seed": run.seed("synth")})
    listings, manifest = ds.synth_generate(scfg)
    mapping, extension = ds.synth_vocabulary(scfg)
    _write_text(run.api_mapping, "\n".join(mapping) + "\n")
    if run.api_extension is not None:
        _write_text(run.api_extension, "\n".join(extension) + "\n")
    with persist.atomic_output(run.corpus) as tmp:
        cg.write_corpus(tmp, listings)
    with persist.atomic_output(run.manifest) as tmp:
        ds.write_manifest(tmp, manifest)
    log.info("synth: %d listings, %d malware families", len(listings), len(manifest.families()))


def cmd_split(run: Run):
    cfg = run.cfg.split
    manifest = ds.clean_manifest(run.manifest_data())
    seed = run.seed("split")
    if cfg.kind == "family":
        spec = ds.family_disjoint_split(manifest, cfg.test_fraction, cfg.support_pool,
                                        np.random.default_rng(seed), seed=seed)
    elif cfg.kind == "five-fold":
        spec = ds.five_fold_families(manifest, cfg.support_pool, seed, cfg.test_fraction)[cfg.fold - 1]
    else:
        spec = ds.time_split(manifest, dt.date.fromisoformat(cfg.cutoff), cfg.support_pool,
                             np.random.default_rng(seed), seed=seed)
    with persist.atomic_output(run.split) as tmp:
        ds.write_split(tmp, spec)
    log.info("split: %d train, %d test, %d support; test families %s",
             len(spec.train), len(spec.test), len(spec.support), spec.test_families)


def cmd_build_graphs(run: Run):
    vocab = cg.load_api_mapping(run.need(run.api_mapping, "synth"))
    if run.api_extension is not None:
        vocab = cg.extend_vocab(vocab, run.need(run.api_extension, "synth"))
    listings = {l.app_id: l for l in cg.read_corpus(run.need(run.corpus, "synth"))}
    split = run.split_data()
    train = _pick(split.train, listings, "training listings", "synth")
    vocab = cg.restrict_vocab(vocab, train)
    ids = sorted(set(split.train) | set(split.test) | set(split.support))
    graphs = [cg.build_app_graph(l, vocab, tuple(run.cfg.prefix_filters))
              for l in _pick(ids, listings, "listings", "synth")]
    with persist.atomic_output(run.vocab) as tmp:
        cg.save_vocab(vocab, tmp)
    with persist.atomic_output(run.graphs) as tmp:
        cg.write_graph_corpus(tmp, graphs, vocab)
    log.info("build-graphs: vocabulary of %d APIs, %d graphs", len(vocab), len(graphs))


def cmd_train_vgae(run: Run):
    vocab = run.vocab_data()
    graphs = run.graph_data(vocab)
    split = run.split_data()
    seed = run.seed("train-vgae")
    config = run.cfg.vgae
    config.seed = seed
    train = _pick(split.train, graphs, "training graphs", "build-graphs")
    model, history = train_vgae(train, len(vocab), config, vocab.digest(), np.random.default_rng(seed))
    persist.save_vgae(run.vgae, model, extra={"seed": seed, "epochs": config.epochs,
                                              "lr": config.lr, "optimizer": config.optimizer})
    _write_text(run.vgae_history, _history_csv(history))
    log.info("train-vgae: final loss %.5f", history[-1]["loss"])


def cmd_embed(run: Run):
    vocab = run.vocab_data()
    graphs = run.graph_data(vocab)
    model = persist.load_vgae(run.need(run.vgae, "train-vgae"), vocab.digest())
    embs = [embed_graph(model, graphs[i]) for i in sorted(graphs)]
    _write_text(run.embeddings, persist.dump_embeddings(embs, {"vocab_hash": vocab.digest()}))


def cmd_train_snn(run: Run):
    _, embs = run.embedding_data()
    split = run.split_data()
    train = _pick(split.train, embs, "training embeddings", "embed")
    seed = run.seed("train-snn")
    config = run.cfg.snn
    config.seed = seed
    model, history = train_snn(np.stack([e.vector for e in train]), [e.label for e in train],
                               config, np.random.default_rng(seed))
    persist.save_snn(run.snn, model, extra={"seed": seed, "epochs": config.epochs, "lr": config.lr,
                                            "optimizer": config.optimizer,
                                            "batch_size": config.batch_size})
    _write_text(run.snn_history, _history_csv(history))
    log.info("train-snn: final loss %.5f", history[-1]["loss"])


def cmd_classify(run: Run):
    cfg = run.cfg.classify
    snn = persist.load_snn(run.need(run.snn, "train-snn"))
    meta, embs = run.embedding_data()
    split = run.split_data()
    seed = run.seed("classify")
    pool = _pick(split.support, embs, "support embeddings", "embed")
    queries = _pick(split.test, embs, "test embeddings", "embed")

    malware_support = None
    if cfg.mode == "few-shot":
        mal = [q for q in queries if q.label == "malware"]
        malware_support = build_support_set(mal, "malware", cfg.malware_support,
                                            np.random.default_rng(stage_seed(seed, "malware-support")))
        taken = set(malware_support.app_ids)
        queries = [q for q in queries if q.app_id not in taken]
    verdicts = classify_many(snn, queries, pool, mode=cfg.mode, support_size=cfg.support_size,
                             threshold=cfg.threshold, seed=seed, malware_support=malware_support,
                             fixed_support=cfg.fixed_support)
    vmeta = {"mode": cfg.mode, "threshold": cfg.threshold if cfg.mode == "zero-shot" else None,
             "support_size": cfg.support_size, "seed": seed, "fixed_support": cfg.fixed_support}
    if malware_support is not None:
        vmeta["malware_support"] = malware_support.app_ids
    _write_text(run.verdicts, persist.dump_verdicts(verdicts, vmeta))

    # Ablation: the VGAE classification head alone on the same queries.
    vocab = run.vocab_data()
    graphs = run.graph_data(vocab)
    vgae = persist.load_vgae(run.need(run.vgae, "train-vgae"), vocab.digest())
    ablation = []
    for q in queries:
        label, probs = vgae_classify(vgae, graphs[q.app_id])
        ablation.append(Verdict(q.app_id, label, float(probs[0]), None, "vgae-only",
                                float(probs[1])))
    _write_text(run.vgae_verdicts, persist.dump_verdicts(ablation, {"mode": "vgae-only"}))


def _section(verdicts, manifest):
    counts = ev.confusion(verdicts, manifest)
    return counts, ev.metrics(counts)


def _families_csv(families) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["family", "detected", "total", "rate", "undetected"])
    for f in families.values():
        w.writerow([f.family, f.detected, f.total, repr(f.rate), int(f.undetected)])
    return buf.getvalue()


def cmd_evaluate(run: Run):
    manifest = run.manifest_data()
    vmeta, verdicts = persist.read_verdicts(run.need(run.verdicts, "classify"))
    sections = {vmeta["mode"]: _section(verdicts, manifest)}
    if run.vgae_verdicts.is_file():
        _, ablation = persist.read_verdicts(run.vgae_verdicts)
        sections["vgae-only"] = _section(ablation, manifest)
    families = ev.per_family_detection(verdicts, manifest)
    meta = {k: vmeta.get(k) for k in ("mode", "threshold", "support_size", "seed")}
    meta["evaluated"] = len(verdicts)
    report = ev.build_report(sections, families, meta)
    _write_text(run.report_json, ev.report_json(report))
    _write_text(run.report_txt, ev.render_table(report))
    _write_text(run.families, _families_csv(families))
    sys.stdout.write(ev.render_table(report))


def cmd_sweep(run: Run):
    manifest = run.manifest_data()
    vmeta, verdicts = persist.read_verdicts(run.need(run.verdicts, "classify"))
    if vmeta.get("mode") != "zero-shot":
        raise ValidationError("the threshold sweep needs zero-shot verdicts")
    labels = []
    for v in verdicts:
        entry = manifest.by_id.get(v.app_id)
        if entry is None:
            raise ValidationError(f"verdict for unknown app_id {v.app_id!r}")
        labels.append(entry.label)
    curve = ev.threshold_sweep([v.mean_benign for v in verdicts], labels, run.cfg.sweep.grid)
    for metric in ("accuracy", "f1"):
        _write_text(run.cfg.out / f"sweep_{metric}.csv", ev.sweep_csv(curve, metric))
    _write_text(run.sweep_json, json.dumps({"best_threshold": curve.best_threshold,
                                            "grid": list(run.cfg.sweep.grid)},
                                           indent=2, sort_keys=True) + "\n")
    log.info("sweep: best F1 at threshold %s", curve.best_threshold)


HANDLERS = {
    "synth": cmd_synth,
    "split": cmd_split,
    "build-graphs": cmd_build_graphs,
    "train-vgae": cmd_train_vgae,
    "embed": cmd_embed,
    "train-snn": cmd_train_snn,
    "classify": cmd_classify,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
}


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="droidzero",
                                     description="Zero-shot Android malware detection pipeline.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="run configuration (YAML or JSON)")
    parser.add_argument("--seed", type=int, help="master seed (overrides the config)")
    parser.add_argument("--out", help="output directory (overrides paths.out)")
    parser.add_argument("--mode", choices=MODES, help="classification mode")
    parser.add_argument("--threshold", type=float, help="zero-shot decision threshold in (0, 1)")
    parser.add_argument("--float", dest="float_mode", type=int, choices=(32, 64),
                        help="floating-point width for training and inference")
    parser.add_argument("-q", "--quiet", action="store_true", help="log warnings only")
    return parser


def apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed: must be non-negative")
        cfg.seed = args.seed
    if args.out is not None:
        cfg.paths.out = str(Path(args.out).absolute())
    if args.mode is not None:
        cfg.classify.mode = args.mode
    if args.threshold is not None:
        if not 0 < args.threshold < 1:
            raise ConfigError(f"--threshold: must lie in (0, 1), got {args.threshold}")
        cfg.classify.threshold = args.threshold
    if args.float_mode is not None:
        cfg.float_mode = cfg.vgae.float_mode = cfg.snn.float_mode = args.float_mode
    return cfg


def run_command(command: str, cfg: RunConfig):
    if command not in HANDLERS:
        raise ConfigError(f"unknown command {command!r}")
    HANDLERS[command](Run(cfg))


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = apply_overrides(load_config(args.config), args)
        run_command(args.command, cfg)
    except DroidZeroError as exc:
        log.error("%s", exc)
        return exc.exit_code
    except OSError as exc:
        log.error("%s", exc)
        return ValidationError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
