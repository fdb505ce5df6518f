"""Command-line driver: reproducible CJT experiments over an artifact directory.

Layout of ``--out``::

    config.yaml  stamps.tsv  markers/  manifests/  pairs/  checkpoints/  logs/  reports/

Exit codes: 0 success, 2 config error, 3 missing dependency, 4 numerical fault.
"""
from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import os
import sys
from typing import Optional, Sequence

import yaml

from . import analysis, pipeline
from .model import Checkpoint
from .numerics import NumericalFault
from .pairgen import PairSet, pair_set_stats
from .pipeline import DEPENDS, STAGES, ConfigError, ExperimentConfig
from .synthtask import Corpus, Manifest, Vocab

log = logging.getLogger("cjt")

EXIT_OK, EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_NUMERICAL = 0, 2, 3, 4


class DependencyError(RuntimeError):
    pass


# flag -> config key; each flag sets exactly one key
FLAG_KEYS = {
    "teacher_updates": "pipeline.teacher_updates",
    "lm_updates": "pipeline.lm_updates",
    "round1_updates": "train.updates_round1",
    "round2_updates": "train.updates_round2",
    "lambda_ratio": "train.lambda_ratio",
    "peak_lr": "train.peak_lr",
    "mask_strategy": "train.mask_strategy",
    "mask_prob": "train.mask_prob",
    "syngr_prob": "train.syngr_prob",
    "syngr_scope": "train.syngr_scope",
    "round2_init": "train.round2_init",
    "pl_beam": "pipeline.pl_beam",
    "pl_lm_weight": "pipeline.pl_lm_weight",
    "synth_fraction": "pipeline.synth_fraction",
    "beam": "pipeline.beam",
    "lm_weight": "pipeline.lm_weight",
    "probe_frames": "pipeline.probe_frames",
    "hist_bins": "pipeline.hist_bins",
}


# ------------------------------------------------------------------ workspace
class Workspace:
    """An output directory with completion markers, stamps and a lock."""

    def __init__(self, root: str, cfg: ExperimentConfig):
        self.root = root
        self.cfg = cfg
        self._corpus: Optional[Corpus] = None

    def path(self, *parts) -> str:
        return os.path.join(self.root, *parts)

    @contextlib.contextmanager
    def lock(self):
        os.makedirs(self.root, exist_ok=True)
        lock = self.path(".lock")
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(f"{self.root} is locked by another run (remove {lock} if stale)")
        try:
            os.write(fd, str(os.getpid()).encode())
            os.close(fd)
            yield
        finally:
            os.remove(lock)

    def write(self, rel: str, data):
        """Write an artifact and record its stamp (config hash, seed, digest)."""
        full = self.path(rel)
        os.makedirs(os.path.dirname(full), exist_ok=True)
        blob = data.encode() if isinstance(data, str) else data
        with open(full, "wb") as fh:
            fh.write(blob)
        self._stamp(rel, hashlib.sha256(blob).hexdigest()[:16])

    def _stamp(self, rel: str, digest: str):
        path = self.path("stamps.tsv")
        rows = {}
        if os.path.exists(path):
            with open(path) as fh:
                for ln in fh.read().splitlines()[1:]:
                    rows[ln.split("\t")[0]] = ln
        rows[rel] = f"{rel}\t{self.cfg.hash}\t{self.cfg.seed}\t{digest}"
        with open(path, "w") as fh:
            fh.write("path\tconfig_hash\tseed\tsha256\n")
            fh.write("".join(rows[k] + "\n" for k in sorted(rows)))

    def read(self, rel: str) -> str:
        with open(self.path(rel)) as fh:
            return fh.read()

    # markers
    def done(self, stage: str) -> bool:
        try:
            with open(self.path("markers", f"{stage}.json")) as fh:
                m = json.load(fh)
        except (OSError, ValueError):
            return False
        return m.get("config_hash") == self.cfg.hash and m.get("seed") == self.cfg.seed

    def mark(self, stage: str):
        os.makedirs(self.path("markers"), exist_ok=True)
        with open(self.path("markers", f"{stage}.json"), "w") as fh:
            json.dump({"stage": stage, "config_hash": self.cfg.hash, "seed": self.cfg.seed}, fh,
                      sort_keys=True)

    def require(self, stage: str):
        for dep in DEPENDS[stage]:
            if not self.done(dep):
                raise DependencyError(f"stage {stage!r} needs {dep!r}; run `cjt {_command_for(dep)}` "
                                      f"with the same --out/--config first")

    # artifacts
    @property
    def vocab(self) -> Vocab:
        return Vocab.default(self.cfg.task.n_words)

    def corpus(self) -> Corpus:
        if self._corpus is None:
            self._corpus = Corpus.load(self.path("manifests"), self.vocab, self.cfg.task, self.cfg.seed)
        return self._corpus

    def save_checkpoint(self, name: str, ck: Checkpoint):
        ck.metadata.update({"config_hash": self.cfg.hash, "seed": self.cfg.seed})
        self.write(f"checkpoints/{name}.ckpt", ck.to_bytes())

    def checkpoint(self, name: str) -> Checkpoint:
        return Checkpoint.load(self.path("checkpoints", f"{name}.ckpt"))

    def save_pairs(self, name: str, pairs: PairSet):
        self.write(f"pairs/{name}.tsv", pairs.serialize(self.vocab))

    def pairs(self, name: str) -> PairSet:
        return PairSet.parse(self.read(f"pairs/{name}.tsv"), self.vocab,
                             pipeline.audio_bank(self.corpus()))


def _command_for(stage: str) -> str:
    return {"train-teacher": "train --stage teacher", "train-lm": "train --stage lm",
            "cjt-round1": "train --stage round1", "cjt-round2": "train --stage round2",
            "score-conf": "run --stages score-conf"}.get(stage, stage)


# ------------------------------------------------------------------ stages
def stage_gen_data(ws: Workspace):
    corpus = pipeline.build_corpus(ws.cfg)
    corpus.save(ws.path("manifests"))
    for split, man in sorted(corpus.manifests.items()):
        ws._stamp(f"manifests/{split}.tsv", hashlib.sha256(man.serialize().encode()).hexdigest()[:16])
    ws._corpus = corpus


def stage_train_teacher(ws: Workspace):
    res = pipeline.train_teacher(ws.cfg, ws.corpus())
    ws.write("logs/teacher.jsonl", res.log_lines())
    ws.save_checkpoint("teacher", res.final)


def stage_train_lm(ws: Workspace):
    res = pipeline.train_language_model(ws.cfg, ws.corpus())
    ws.write("logs/lm.jsonl", res.log_lines())
    ws.save_checkpoint("lm", res.final)


def stage_pseudolabel(ws: Workspace):
    corpus = ws.corpus()
    pairs = pipeline.make_pseudo_labels(ws.cfg, corpus, ws.checkpoint("teacher"), ws.checkpoint("lm"))
    ws.save_pairs("speech-psel", pairs)
    stats = pair_set_stats(pairs, corpus.references("unpaired_speech"))
    ws.write("reports/pseudolabel.json", json.dumps(
        {"records": stats.records, "pseudo_label_wer": f"{stats.pseudo_label_wer:.6f}"},
        sort_keys=True) + "\n")


def stage_synthesize(ws: Workspace):
    ws.save_pairs("syna-text", pipeline.make_synth_pairs(ws.cfg, ws.corpus()))


def stage_round1(ws: Workspace):
    res = pipeline.cjt_round1(ws.cfg, ws.pairs("speech-psel"), ws.pairs("syna-text"))
    ws.write("logs/cjt-round1.jsonl", res.log_lines())
    ws.save_checkpoint("cjt-round1", res.final)


def stage_score_conf(ws: Workspace):
    scored = pipeline.attach_confidences(ws.cfg, ws.checkpoint("cjt-round1"), ws.pairs("speech-psel"))
    ws.save_pairs("speech-psel-conf", scored)


def stage_round2(ws: Workspace):
    res = pipeline.cjt_round2(ws.cfg, ws.checkpoint("cjt-round1"), ws.pairs("speech-psel-conf"),
                              ws.pairs("syna-text"))
    ws.write("logs/cjt-round2.jsonl", res.log_lines())
    ws.save_checkpoint("cjt-round2", res.final)


def stage_decode(ws: Workspace):
    corpus = ws.corpus()
    model = ws.checkpoint("cjt-round2").build()
    lm = ws.checkpoint("lm").build()
    for split in ws.cfg.pipeline.eval_splits:
        hyps = pipeline.decode_split(ws.cfg, corpus, model, split, lm)
        lines = [f"{r.id}\t{' '.join(corpus.vocab.decode(h))}\n"
                 for r, h in zip(corpus.manifests[split], hyps)]
        ws.write(f"reports/hyps/{split}.tsv", "".join(lines))


def stage_score(ws: Workspace):
    corpus = ws.corpus()
    row = {}
    for split in ws.cfg.pipeline.eval_splits:
        hyps = {}
        for ln in ws.read(f"reports/hyps/{split}.tsv").splitlines():
            rid, words = ln.split("\t")
            hyps[rid] = corpus.vocab.encode(words.split()) if words else []
        report = pipeline.score_split(corpus, split, [hyps[i] for i in corpus.manifests[split].ids()])
        ws.write(f"reports/{split}.jsonl", report.to_jsonl())
        row[split] = report.wer
    ws.write("reports/summary.tsv", summary_table({"cjt++": row}))


def stage_analyze(ws: Workspace):
    cfg, corpus = ws.cfg, ws.corpus()
    ref = pipeline.train_asr(cfg, {"speech": pipeline.gold_reference_pairs(corpus)},
                             cfg.pipeline.reference_updates, "reference", round_tag="baseline")
    ws.save_checkpoint("reference", ref.final)
    models = {"teacher": ws.checkpoint("teacher").build(),
              "cjt-round1": ws.checkpoint("cjt-round1").build()}
    if ws.done("cjt-round2"):
        models["cjt-round2"] = ws.checkpoint("cjt-round2").build()
    probe = [corpus.audio[r.id] for r in corpus.manifests["dev_clean"]]
    sweep = analysis.layer_similarity_sweep(models, ref.final.build(), probe, cfg.pipeline.probe_frames)
    ws.write("reports/pwcca.tsv", analysis.similarity_tsv(sweep))
    refs = corpus.references("unpaired_speech")
    hist = analysis.confidence_histogram(models["cjt-round1"], ws.pairs("speech-psel"), refs,
                                         cfg.pipeline.hist_bins)
    ws.write("reports/confidence_hist.tsv", hist.to_tsv())


STAGE_FUNCS = {
    "gen-data": stage_gen_data, "train-teacher": stage_train_teacher, "train-lm": stage_train_lm,
    "pseudolabel": stage_pseudolabel, "synthesize": stage_synthesize, "cjt-round1": stage_round1,
    "score-conf": stage_score_conf, "cjt-round2": stage_round2, "decode": stage_decode,
    "score": stage_score, "analyze": stage_analyze,
}


def run_stages(ws: Workspace, stages: Sequence[str], force: bool = False) -> list:
    """Run stages in dependency order, skipping those already marked complete."""
    ran = []
    for stage in [s for s in STAGES if s in stages]:
        if ws.done(stage) and not force:
            log.info("skip %s (complete)", stage)
            continue
        ws.require(stage)
        log.info("run %s", stage)
        STAGE_FUNCS[stage](ws)
        ws.mark(stage)
        ran.append(stage)
    return ran


# ------------------------------------------------------------------ compare / inspect
SPLIT_COLUMNS = ("dev_clean", "dev_other", "test_clean", "test_other")


def summary_table(rows: dict) -> str:
    lines = ["method\t" + "\t".join(SPLIT_COLUMNS)]
    for method, wers in rows.items():
        cells = [f"{wers[s]:.6f}" if s in wers else "-" for s in SPLIT_COLUMNS]
        lines.append(method + "\t" + "\t".join(cells))
    return "\n".join(lines) + "\n"


def _read_report(path: str):
    ids, summary = [], None
    with open(path) as fh:
        for ln in fh:
            rec = json.loads(ln)
            if "summary" in rec:
                summary = rec["summary"]
            else:
                ids.append(rec["id"])
    if summary is None:
        raise ValueError(f"{path} has no summary record")
    return ids, summary


def compare(report_dirs: Sequence[str], names: Optional[Sequence[str]] = None) -> str:
    """Method x split WER table from the ``reports/`` of several runs."""
    if names and len(names) != len(report_dirs):
        raise ConfigError("need one name per report directory")
    rows, id_sets = {}, {}
    for i, d in enumerate(report_dirs):
        rdir = os.path.join(d, "reports") if os.path.isdir(os.path.join(d, "reports")) else d
        method = names[i] if names else os.path.basename(os.path.normpath(d))
        wers = {}
        for split in SPLIT_COLUMNS:
            path = os.path.join(rdir, f"{split}.jsonl")
            if not os.path.exists(path):
                continue
            ids, summary = _read_report(path)
            if split in id_sets and id_sets[split] != ids:
                raise ConfigError(f"reports disagree on the {split} evaluation set")
            id_sets[split] = ids
            wers[split] = float(summary["wer"])
        if not wers:
            raise ConfigError(f"no reports found under {rdir}")
        rows[method] = wers
    return summary_table(rows)


def inspect_path(path: str, vocab: Vocab) -> str:
    if path.endswith(".ckpt"):
        ck = Checkpoint.load(path)
        lines = [f"kind={ck.kind} round={ck.round_tag} updates={ck.updates} fingerprint={ck.fingerprint}"]
        lines += [f"{name}\t{shape}\t{n}" for name, shape, n in ck.census()]
        lines.append(f"total\t{sum(n for _, _, n in ck.census())}")
        return "\n".join(lines) + "\n"
    with open(path) as fh:
        text = fh.read()
    ncols = len(text.splitlines()[0].split("\t")) if text else 0
    if ncols == 9:
        pairs = PairSet.parse(text, vocab, None)
        confs = [c for r in pairs if r.confidences for c in r.confidences]
        mean = sum(confs) / len(confs) if confs else float("nan")
        return f"pairs={len(pairs)} provenance={pairs.provenance} mean_confidence={mean:.4f}\n"
    man = Manifest.parse(text)
    provs = sorted({r.provenance for r in man})
    return f"records={len(man)} provenance={','.join(provs)}\n"


# ------------------------------------------------------------------ argument parsing
def _global_parser(suppress: bool = False) -> argparse.ArgumentParser:
    # subcommands repeat the global flags; their defaults are suppressed so a
    # flag given before the subcommand is not reset by the subparser
    def default(v):
        return argparse.SUPPRESS if suppress else v

    g = argparse.ArgumentParser(add_help=False)
    g.add_argument("--config", default=default(None), help="YAML config file; its values override the preset")
    g.add_argument("--seed", type=int, default=default(None), help="experiment seed")
    g.add_argument("--out", default=default("runs/default"), help="artifact directory")
    g.add_argument("--preset", choices=sorted(pipeline.PRESETS), default=default(None),
                   help="base configuration (default: small)")
    g.add_argument("--force", action="store_true", default=default(False),
                   help="rerun stages even if marked complete")
    g.add_argument("-v", "--verbose", action="store_true", default=default(False))
    return g


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cjt", parents=[_global_parser()],
                                description="Complementary joint training on a synthetic speech task.")
    sub = p.add_subparsers(dest="command", required=True)
    g = _global_parser(suppress=True)
    sub.add_parser("gen-data", parents=[g], help="generate the synthetic corpus")
    t = sub.add_parser("train", parents=[g], help="train the teacher, LM, or a CJT round")
    t.add_argument("--stage", choices=("teacher", "lm", "round1", "round2"), required=True)
    for flag in ("teacher_updates", "lm_updates", "round1_updates", "round2_updates", "lambda_ratio"):
        t.add_argument("--" + flag.replace("_", "-"), dest=flag, type=int)
    t.add_argument("--peak-lr", dest="peak_lr", type=float)
    t.add_argument("--mask-strategy", dest="mask_strategy", choices=("conf", "thres", "rand", "none"))
    t.add_argument("--mask-prob", dest="mask_prob", type=float)
    t.add_argument("--syngr-prob", dest="syngr_prob", type=float)
    t.add_argument("--syngr-scope", dest="syngr_scope", choices=("shallow", "all", "none"))
    t.add_argument("--round2-init", dest="round2_init", choices=("continue", "scratch"))
    pl = sub.add_parser("pseudolabel", parents=[g], help="label unpaired speech with the teacher")
    pl.add_argument("--pl-beam", dest="pl_beam", type=int)
    pl.add_argument("--pl-lm-weight", dest="pl_lm_weight", type=float)
    sy = sub.add_parser("synthesize", parents=[g], help="render SynA-text pairs")
    sy.add_argument("--synth-fraction", dest="synth_fraction", type=float)
    d = sub.add_parser("decode", parents=[g], help="decode eval splits with the final model")
    d.add_argument("--beam", type=int)
    d.add_argument("--lm-weight", dest="lm_weight", type=float)
    sub.add_parser("score", parents=[g], help="score decoded hypotheses")
    a = sub.add_parser("analyze", parents=[g], help="PWCCA curves and confidence histograms")
    a.add_argument("--probe-frames", dest="probe_frames", type=int)
    a.add_argument("--hist-bins", dest="hist_bins", type=int)
    r = sub.add_parser("run", parents=[g], help="run pipeline stages in order")
    r.add_argument("--stages", default=",".join(STAGES),
                   help="comma-separated subset of: " + ",".join(STAGES))
    c = sub.add_parser("compare", parents=[g], help="tabulate WER across runs")
    c.add_argument("reports", nargs="+", help="run directories or their reports/ folders")
    c.add_argument("--names", help="comma-separated method names")
    i = sub.add_parser("inspect", parents=[g], help="summarise a checkpoint, manifest or pair file")
    i.add_argument("path")
    return p


def resolve_config(args) -> ExperimentConfig:
    """Preset, then config file, then flags; each later layer wins."""
    seed = args.seed if args.seed is not None else 0
    cfg = pipeline.preset_config(args.preset or "small", seed)
    if args.config:
        cfg = cfg.with_overrides(_flatten(_load_yaml(args.config)))
    overrides = {key: getattr(args, flag) for flag, key in FLAG_KEYS.items()
                 if getattr(args, flag, None) is not None}
    if args.seed is not None:
        overrides["seed"] = args.seed
    return cfg.with_overrides(overrides) if overrides else cfg


def _load_yaml(path: str) -> dict:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"config is not valid YAML: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    return raw


def _flatten(raw: dict) -> dict:
    out = {}
    for k, v in raw.items():
        if isinstance(v, dict):
            out.update({f"{k}.{kk}": vv for kk, vv in v.items()})
        else:
            out[k] = v
    return out


_SUBCOMMAND_STAGES = {
    "gen-data": ["gen-data"], "pseudolabel": ["pseudolabel"], "synthesize": ["synthesize"],
    "decode": ["decode"], "score": ["score"], "analyze": ["analyze"],
}
_TRAIN_STAGES = {"teacher": "train-teacher", "lm": "train-lm", "round1": "cjt-round1",
                 "round2": "cjt-round2"}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "compare":
            names = args.names.split(",") if args.names else None
            sys.stdout.write(compare(args.reports, names))
            return EXIT_OK
        cfg = resolve_config(args)
        if args.command == "inspect":
            sys.stdout.write(inspect_path(args.path, Vocab.default(cfg.task.n_words)))
            return EXIT_OK
        if args.command == "run":
            stages = [s.strip() for s in args.stages.split(",") if s.strip()]
            unknown = set(stages) - set(STAGES)
            if unknown:
                raise ConfigError(f"unknown stages {sorted(unknown)}")
        elif args.command == "train":
            stages = [_TRAIN_STAGES[args.stage]]
        else:
            stages = _SUBCOMMAND_STAGES[args.command]
        ws = Workspace(args.out, cfg)
        with ws.lock():
            ws.write("config.yaml", cfg.dump())
            ran = run_stages(ws, stages, args.force)
        print(f"{args.out}: ran {', '.join(ran) if ran else 'nothing (all stages complete)'}")
        return EXIT_OK
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DependencyError as e:
        print(f"dependency error: {e}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except NumericalFault as e:
        print(f"numerical fault: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
