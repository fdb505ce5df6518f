"""Experiment configuration, presets and the in-memory stages of the CJT pipeline.

Stages are plain functions of the config and earlier artifacts; the CLI adds
persistence, completion markers and locking on top.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

import yaml

from .decode import decode_corpus, score_corpus
from .model import AsrModel, AsrModelConfig, Checkpoint, LmConfig, TransformerLM
from .numerics.rng import derive_seed
from .pairgen import AudioBank, PairSet, gold_pairs, pseudo_label, score_confidences, synthesize_pairs
from .synthtask import EVAL_SPLITS, Corpus, CorpusSizes, TaskConfig, Vocab, generate_corpus, make_profiles
from .train import RoundResult, TrainConfig, run_round, train_lm

STAGES = ("gen-data", "train-teacher", "train-lm", "pseudolabel", "synthesize", "cjt-round1",
          "score-conf", "cjt-round2", "decode", "score", "analyze")

DEPENDS = {
    "gen-data": (),
    "train-teacher": ("gen-data",),
    "pseudolabel": ("train-teacher", "train-lm"),
    "synthesize": ("gen-data",),
    "train-lm": ("gen-data",),
    "cjt-round1": ("pseudolabel", "synthesize"),
    "score-conf": ("cjt-round1",),
    "cjt-round2": ("score-conf",),
    "decode": ("cjt-round2", "train-lm"),
    "score": ("decode",),
    "analyze": ("cjt-round1", "score-conf"),
}


class ConfigError(ValueError):
    pass


@dataclass
class PipelineSettings:
    teacher_updates: int = 2000
    lm_updates: int = 2000
    reference_updates: int = 2000
    synth_fraction: float = 0.1
    pl_beam: int = 20
    pl_lm_weight: float = 0.4
    beam: int = 20
    lm_weight: float = 0.4
    decode_batch: int = 32
    eval_splits: tuple = EVAL_SPLITS
    probe_frames: int = 10_000
    hist_bins: int = 20

    def __post_init__(self):
        self.eval_splits = tuple(self.eval_splits)
        if self.beam < 1 or self.pl_beam < 1:
            raise ConfigError("beam sizes must be >= 1")
        if self.lm_weight < 0 or self.pl_lm_weight < 0:
            raise ConfigError("LM weights must be >= 0")
        unknown = set(self.eval_splits) - set(EVAL_SPLITS)
        if unknown:
            raise ConfigError(f"unknown eval splits {sorted(unknown)}")


@dataclass
class ExperimentConfig:
    seed: int = 0
    data: CorpusSizes = field(default_factory=CorpusSizes)
    task: TaskConfig = field(default_factory=TaskConfig)
    model: AsrModelConfig = field(default_factory=AsrModelConfig)
    lm: LmConfig = field(default_factory=LmConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    pipeline: PipelineSettings = field(default_factory=PipelineSettings)

    def to_dict(self) -> dict:
        d = {"seed": self.seed}
        for name in ("data", "task", "model", "lm", "pipeline"):
            d[name] = _plain(asdict(getattr(self, name)))
        d["train"] = self.train.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        try:
            return cls(
                seed=int(d.get("seed", 0)),
                data=_build(CorpusSizes, d.get("data", {})),
                task=_build(TaskConfig, d.get("task", {})),
                model=_build(AsrModelConfig, d.get("model", {})),
                lm=_build(LmConfig, d.get("lm", {})),
                train=TrainConfig.from_dict(d.get("train", {})),
                pipeline=_build(PipelineSettings, d.get("pipeline", {})),
            )
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    @classmethod
    def parse(cls, text: str) -> "ExperimentConfig":
        try:
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"config is not valid YAML: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError("config must be a mapping")
        return cls.from_dict(raw)

    @property
    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def with_overrides(self, overrides: dict) -> "ExperimentConfig":
        """Apply dotted-key overrides such as ``{"train.mask_prob": 0.3}``."""
        d = self.to_dict()
        for key, value in overrides.items():
            node = d
            *path, leaf = key.split(".")
            for part in path:
                if part not in node or not isinstance(node[part], dict):
                    raise ConfigError(f"unknown config key {key!r}")
                node = node[part]
            if leaf not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[leaf] = value
        return ExperimentConfig.from_dict(d)


def _plain(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _build(cls, d: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys {sorted(unknown)}")
    types = {f.name: f.type for f in fields(cls)}
    vals = {k: tuple(v) if isinstance(v, list) and "tuple" in str(types[k]) else v for k, v in d.items()}
    try:
        return cls(**vals)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {cls.__name__}: {e}") from e


# ------------------------------------------------------------------ presets
_METHOD = {"train.lambda_ratio": 3, "train.mask_strategy": "thres", "train.mask_prob": 0.4,
           "train.syngr_prob": 0.7, "train.syngr_scope": "shallow",
           "pipeline.lm_weight": 0.4, "pipeline.beam": 20}

PRESETS = {
    "tiny": {
        "data.paired_n": 50, "data.unpaired_speech_n": 120, "data.unpaired_text_n": 400,
        "data.eval_n": 20,
        "pipeline.teacher_updates": 40, "pipeline.lm_updates": 40, "pipeline.reference_updates": 40,
        "train.updates_round1": 40, "train.updates_round2": 20,
        "pipeline.pl_beam": 2, "pipeline.beam": 4, "pipeline.probe_frames": 400,
        "train.mask_strategy": "thres", "train.syngr_scope": "shallow",
    },
    "small": {
        "data.paired_n": 200, "data.unpaired_speech_n": 5000, "data.unpaired_text_n": 20000,
        "data.eval_n": 200,
        "pipeline.teacher_updates": 3000, "pipeline.lm_updates": 2000,
        "pipeline.reference_updates": 3000, "train.peak_lr": 1e-3,
        "train.updates_round1": 3000, "train.updates_round2": 1500,
        "train.mask_strategy": "thres", "train.syngr_scope": "shallow",
    },
    "medium": {
        "data.paired_n": 1000, "data.unpaired_speech_n": 20000, "data.unpaired_text_n": 80000,
        "data.eval_n": 500,
        "pipeline.teacher_updates": 6000, "pipeline.lm_updates": 6000,
        "pipeline.reference_updates": 10000,
        "train.updates_round1": 12000, "train.updates_round2": 6000,
        "train.mask_strategy": "thres", "train.syngr_scope": "shallow",
    },
}
PRESETS["paper-defaults"] = {**PRESETS["small"], **_METHOD}


def preset_config(name: str, seed: int = 0) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ExperimentConfig(seed=seed).with_overrides(PRESETS[name])


# ------------------------------------------------------------------ stages
def train_config(cfg: ExperimentConfig, **changes) -> TrainConfig:
    """The run's training config with the experiment seed threaded through."""
    return replace(cfg.train, seed=cfg.seed, **changes)


def build_corpus(cfg: ExperimentConfig) -> Corpus:
    return generate_corpus(cfg.seed, cfg.data, cfg.task, Vocab.default(cfg.task.n_words))


def audio_bank(corpus: Corpus) -> AudioBank:
    _, tts = make_profiles(corpus.task, corpus.vocab)
    return AudioBank(corpus.audio, tts)


def new_model(cfg: ExperimentConfig, tag: str) -> AsrModel:
    return AsrModel(_model_config(cfg), seed=derive_seed(cfg.seed, "init", tag))


def _model_config(cfg: ExperimentConfig) -> AsrModelConfig:
    return replace(cfg.model, vocab_size=Vocab.default(cfg.task.n_words).size,
                   mel_dim=cfg.task.mel_dim)


def train_asr(cfg: ExperimentConfig, pairsets: dict, updates: int, tag: str, round: int = 1,
              round_tag: str = "baseline", init: Optional[Checkpoint] = None,
              train_cfg: Optional[TrainConfig] = None) -> RoundResult:
    """Train a fresh (or ``init``-initialised) ASR model on the given pair sets."""
    model = new_model(cfg, tag) if init is None else init.build()
    return run_round(model, pairsets, train_cfg or train_config(cfg), round, round_tag, updates)


def train_teacher(cfg: ExperimentConfig, corpus: Corpus) -> RoundResult:
    gold = gold_pairs(corpus.manifests["paired"], corpus.vocab, audio_bank(corpus))
    return train_asr(cfg, {"speech": gold}, cfg.pipeline.teacher_updates, "teacher",
                     round_tag="teacher")


def lm_sentences(corpus: Corpus) -> list:
    """LM training text: unpaired text plus the paired transcripts."""
    out = []
    for split in ("unpaired_text", "paired"):
        out.extend(corpus.vocab.encode(r.transcript) for r in corpus.manifests[split])
    return out


def train_language_model(cfg: ExperimentConfig, corpus: Corpus) -> RoundResult:
    lm_cfg = replace(cfg.lm, vocab_size=corpus.vocab.size)
    lm = TransformerLM(lm_cfg, seed=derive_seed(cfg.seed, "init", "lm"))
    return train_lm(lm, lm_sentences(corpus), train_config(cfg), cfg.pipeline.lm_updates)


def make_pseudo_labels(cfg: ExperimentConfig, corpus: Corpus, teacher: Checkpoint,
                       lm: Optional[Checkpoint]) -> PairSet:
    p = cfg.pipeline
    use_lm = lm is not None and p.pl_lm_weight > 0
    return pseudo_label(teacher.build(), corpus.manifests["unpaired_speech"].training_view(),
                        corpus.audio, audio_bank(corpus), beam=p.pl_beam,
                        lm=lm.build() if use_lm else None, lm_weight=p.pl_lm_weight,
                        batch_size=p.decode_batch)


def make_synth_pairs(cfg: ExperimentConfig, corpus: Corpus) -> PairSet:
    _, tts = make_profiles(corpus.task, corpus.vocab)
    return synthesize_pairs(corpus.manifests["unpaired_text"], corpus.vocab, tts,
                            cfg.pipeline.synth_fraction, cfg.seed)


def cjt_round1(cfg: ExperimentConfig, psel: PairSet, syna: PairSet) -> RoundResult:
    return train_asr(cfg, {"speech": psel, "text": syna}, cfg.train.updates_round1, "cjt",
                     round_tag="cjt-round1")


def attach_confidences(cfg: ExperimentConfig, model_ckpt: Checkpoint, psel: PairSet) -> PairSet:
    return score_confidences(model_ckpt.build(), psel, cfg.pipeline.decode_batch)


def cjt_round2(cfg: ExperimentConfig, round1: Checkpoint, psel_conf: PairSet, syna: PairSet,
               train_cfg: Optional[TrainConfig] = None) -> RoundResult:
    tc = train_cfg or train_config(cfg)
    init = round1 if tc.round2_init == "continue" else None
    return train_asr(cfg, {"speech": psel_conf, "text": syna}, tc.updates_round2, "cjt2", round=2,
                     round_tag="cjt-round2", init=init, train_cfg=tc)


def decode_split(cfg: ExperimentConfig, corpus: Corpus, model: AsrModel, split: str,
                 lm: Optional[TransformerLM] = None, beam: Optional[int] = None,
                 lm_weight: Optional[float] = None) -> list:
    p = cfg.pipeline
    beam = p.beam if beam is None else beam
    lm_weight = p.lm_weight if lm_weight is None else lm_weight
    audios = [corpus.audio[r.id] for r in corpus.manifests[split]]
    use_lm = lm is not None and lm_weight > 0
    return decode_corpus(model, audios, beam=beam, lm=lm if use_lm else None,
                         lm_weight=lm_weight if use_lm else 0.0, batch_size=p.decode_batch)


def score_split(corpus: Corpus, split: str, hyps: list):
    man = corpus.manifests[split]
    refs = corpus.references(split)
    return score_corpus(man.ids(), [refs[i] for i in man.ids()], hyps, split, corpus.vocab.decode)


def evaluate(cfg: ExperimentConfig, corpus: Corpus, model: AsrModel, lm=None, beam: int = 1,
             lm_weight: float = 0.0, splits=None) -> dict:
    """Split -> ScoreReport for the given decoding setup."""
    out = {}
    for split in splits or cfg.pipeline.eval_splits:
        hyps = decode_split(cfg, corpus, model, split, lm, beam, lm_weight)
        out[split] = score_split(corpus, split, hyps)
    return out


def gold_reference_pairs(corpus: Corpus) -> PairSet:
    """All real speech with true transcripts: the fully supervised reference's data.

    Reads sealed references, so it is used for the analysis reference only.
    """
    bank = audio_bank(corpus)
    paired = gold_pairs(corpus.manifests["paired"], corpus.vocab, bank)
    recs = list(paired)
    for r in corpus.manifests["unpaired_speech"]:
        words = r.transcript if r.transcript is not None else r.sealed
        recs.append(replace(paired[0], id=r.id, audio=r.audio, target=tuple(corpus.vocab.encode(words)),
                            condition=r.condition))
    return PairSet(recs, bank)


def copy_config(cfg: ExperimentConfig) -> ExperimentConfig:
    return copy.deepcopy(cfg)
