"""Training steps and rounds: supervised, basic CJT (round 1) and CJT++ (round 2)."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from typing import Iterator, Optional, Sequence

import numpy as np

from .. import numerics as nx
from ..decode import pad_audio
from ..model import AsrModel, Checkpoint, TransformerLM, average_checkpoints
from ..numerics import NumericalFault, RngStreams
from ..synthtask import BOS, EOS, PAD, SpecAugmentPolicy, spec_augment
from .config import TrainConfig
from .masking import MaskPlanner
from .optim import Adam
from .schedule import lr_at, slot_provenance

log = logging.getLogger(__name__)


@dataclass
class Batch:
    provenance: str                 # "speech" (speech-PseL or gold) or "text" (SynA-text)
    ids: list
    audio: np.ndarray
    frame_mask: np.ndarray
    history: np.ndarray
    targets: np.ndarray
    exclude: np.ndarray
    masked_tokens: int = 0
    target_tokens: int = 0

    @property
    def mask_rate(self) -> float:
        return self.masked_tokens / max(self.target_tokens, 1)


@dataclass
class StepResult:
    loss: float
    provenance: str
    gate: str                       # "open", "closed", or "n/a"
    mask_rate: float
    lr: float


@dataclass
class RoundResult:
    checkpoints: list
    final: Checkpoint
    log: list = field(default_factory=list)

    def log_lines(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.log)


def batch_records(records: Sequence, audio_fn, provenance: str, dtype, planner: Optional[MaskPlanner] = None,
                  mask_rng=None, augment: Optional[SpecAugmentPolicy] = None, aug_rng=None) -> Batch:
    """Pad a homogeneous group of pair records into teacher-forcing arrays.

    Masked target positions hold PAD in the decoder history and are excluded
    from the loss; padding positions are excluded as well.
    """
    audios = []
    for r in records:
        a = audio_fn(r)
        if augment is not None:
            a = spec_augment(a, augment, aug_rng)
        audios.append(a)
    audio, fmask = pad_audio(audios, dtype)
    U = max(len(r.target) for r in records) + 1
    B = len(records)
    hist = np.full((B, U), PAD, dtype=np.int64)
    tgt = np.full((B, U), PAD, dtype=np.int64)
    excl = np.ones((B, U), dtype=bool)
    masked = total = 0
    for i, r in enumerate(records):
        n = len(r.target)
        shown = np.asarray(r.target, dtype=np.int64)
        excl[i, :n + 1] = False
        if planner is not None:
            m = planner.positions(r.target, r.confidences, mask_rng)
            shown = np.where(m, PAD, shown)
            excl[i, :n][m] = True
            masked += int(m.sum())
        total += n
        hist[i, 0] = BOS
        hist[i, 1:n + 1] = shown
        tgt[i, :n] = r.target
        tgt[i, n] = EOS
    return Batch(provenance, [r.id for r in records], audio, fmask, hist, tgt, excl, masked, total)


class BatchStream:
    """Endless length-bucketed batches over a pair set, reshuffled each epoch."""

    def __init__(self, pairs, batch_size: int, rng: np.random.Generator, bucket: int = 8):
        if len(pairs) == 0:
            raise ValueError("empty pair set for a scheduled slot")
        self.pairs = pairs
        self.batch_size = min(batch_size, len(pairs))
        self.rng = rng
        self.bucket = bucket
        self.lengths = np.array([len(r.target) for r in pairs])
        self._queue: list = []
        self.epoch = 0

    def _refill(self):
        perm = self.rng.permutation(len(self.pairs))
        chunk = self.batch_size * self.bucket
        batches = []
        for s in range(0, len(perm), chunk):
            part = perm[s:s + chunk]
            part = part[np.argsort(self.lengths[part], kind="stable")]
            for b in range(0, len(part), self.batch_size):
                batches.append(part[b:b + self.batch_size])
        order = self.rng.permutation(len(batches))
        self._queue = [batches[i] for i in order]
        self.epoch += 1

    def __iter__(self) -> Iterator[list]:
        return self

    def __next__(self) -> list:
        if not self._queue:
            self._refill()
        idx = self._queue.pop()
        return [self.pairs[int(i)] for i in idx]


def _gates_for(model: AsrModel, cfg: TrainConfig, rng: np.random.Generator, forced: Optional[bool]):
    """Draw the gradient gate(s) for a SynA-text batch; returns (gates, frozen names, label)."""
    c = model.config
    if cfg.syngr_scope == "none":
        return {}, [], "n/a"
    if cfg.syngr_scope == "all":
        is_open = (rng.random() >= cfg.syngr_prob) if forced is None else forced
        return {"out": is_open}, ([] if is_open else model.encoder_param_names()), \
            "open" if is_open else "closed"
    if cfg.gate_mode == "per_layer":
        gates, lowest_closed = {}, 0
        for layer in range(1, c.shallow_layer_count + 1):
            is_open = (rng.random() >= cfg.syngr_prob) if forced is None else forced
            gates[layer] = is_open
            if not is_open:
                lowest_closed = layer
        frozen = model.shallow_param_names(lowest_closed) if lowest_closed else []
        return gates, frozen, "closed" if lowest_closed else "open"
    is_open = (rng.random() >= cfg.syngr_prob) if forced is None else forced
    frozen = [] if is_open else model.shallow_param_names()
    return {c.shallow_layer_count: is_open}, frozen, "open" if is_open else "closed"


def batch_loss(model: AsrModel, batch: Batch, cfg: TrainConfig, rng: RngStreams, gates=None):
    logits, _ = model.forward(batch.audio, batch.frame_mask, batch.history, train=True, rng=rng,
                              gates=gates)
    return nx.smoothed_cross_entropy(logits, batch.targets, cfg.label_smoothing, batch.exclude)


def _check_finite(loss, model, batch, lr, update, dump_path=None):
    if np.isfinite(loss.data).all():
        return
    dump = {"update": update, "provenance": batch.provenance, "ids": batch.ids, "lr": lr,
            "loss": float(loss.data), "faulty_params": [k for k, p in model.params.items()
                                                        if p.has_fault()]}
    if dump_path:
        with open(dump_path, "w") as fh:
            json.dump(dump, fh, indent=1)
    raise NumericalFault(f"non-finite loss at update {update}: {dump}")


def cjt_step(model: AsrModel, batch: Batch, cfg: TrainConfig, rng: RngStreams, optimizer: Adam,
             lr: float, update: int = 0, gate_open: Optional[bool] = None, apply_syngr: bool = True,
             dump_path=None) -> StepResult:
    """One optimiser update on a batch of a single provenance.

    SynA-text batches draw the gradient gate (open with probability
    ``1 - syngr_prob``); speech batches always back-propagate fully.
    ``gate_open`` forces the gate state for inspection.
    """
    gates, frozen, label = {}, [], "n/a"
    if batch.provenance == "text" and apply_syngr:
        gates, frozen, label = _gates_for(model, cfg, rng["gate"], gate_open)
    model.zero_grad()
    loss = batch_loss(model, batch, cfg, rng, gates)
    _check_finite(loss, model, batch, lr, update, dump_path)
    loss.backward()
    optimizer.step(lr, frozen)
    return StepResult(float(loss.data), batch.provenance, label, batch.mask_rate, lr)


def _augment_policy(cfg: TrainConfig, provenance: str) -> Optional[SpecAugmentPolicy]:
    if provenance == "speech" and cfg.spec_augment_real:
        return SpecAugmentPolicy()
    if provenance == "text" and cfg.spec_augment_synth:
        return SpecAugmentPolicy()
    return None


def run_round(model: AsrModel, pairsets: dict, cfg: TrainConfig, round: int = 1,
              round_tag: Optional[str] = None, updates: Optional[int] = None,
              dump_path=None) -> RoundResult:
    """Train ``model`` in place and return its checkpoints plus their average.

    ``pairsets`` maps "speech" and/or "text" to pair sets. With both present
    the update pattern is one speech batch then ``lambda_ratio`` text
    batches. Round 2 applies label masking to speech batches and gradient
    restriction to text batches according to ``cfg``.
    """
    speech, text = pairsets.get("speech"), pairsets.get("text")
    if speech is None and text is None:
        raise ValueError("need at least one pair set")
    if round not in (1, 2):
        raise ValueError("round must be 1 or 2")
    total = updates if updates is not None else (cfg.updates_round1 if round == 1 else cfg.updates_round2)
    tag = round_tag or ("cjt-round1" if round == 1 else "cjt-round2")
    rng = RngStreams(cfg.seed).fork(f"{tag}-{round}")
    model.config = replace(model.config, dropout=cfg.dropout)
    opt = Adam(model.params, cfg.adam_betas, cfg.adam_eps)
    planner = None
    if round == 2 and speech is not None and cfg.mask_strategy != "none" and cfg.mask_prob > 0:
        planner = MaskPlanner.fit(speech, cfg.mask_strategy, cfg.mask_prob, cfg.conf_multiplier)
    streams = {}
    if speech is not None:
        streams["speech"] = BatchStream(speech, cfg.batch_size, rng["batch-speech"])
    if text is not None:
        streams["text"] = BatchStream(text, cfg.batch_size, rng["batch-text"])
    sources = {"speech": speech, "text": text}
    both = speech is not None and text is not None
    every = cfg.checkpoint_every or max(1, total // 20)
    ckpts, records = [], []

    def make(prov):
        recs = next(streams[prov])
        return batch_records(recs, sources[prov].audio, prov, model.dtype,
                             planner if prov == "speech" else None, rng["mask"],
                             _augment_policy(cfg, prov), rng["specaug"])

    for u in range(total):
        lr = lr_at(u, total, cfg)
        if both and cfg.lambda_mode == "loss_weight":
            res = _loss_weight_step(model, make("speech"), make("text"), cfg, rng, opt, lr, u,
                                    apply_syngr=(round == 2), dump_path=dump_path)
        else:
            prov = slot_provenance(u, cfg.lambda_ratio) if both else ("speech" if speech is not None else "text")
            res = cjt_step(model, make(prov), cfg, rng, opt, lr, u, apply_syngr=(round == 2),
                           dump_path=dump_path)
        records.append({"update": u + 1, "provenance": res.provenance, "loss": round_float(res.loss),
                        "lr": round_float(res.lr), "gate": res.gate,
                        "mask_rate": round_float(res.mask_rate)})
        if (u + 1) % every == 0 or u + 1 == total:
            ckpts.append(Checkpoint.from_model(model, u + 1, tag))
    final = average_checkpoints(ckpts[-cfg.average_last:])
    return RoundResult(ckpts, final, records)


def _loss_weight_step(model, sbatch, tbatch, cfg, rng, opt, lr, update, apply_syngr, dump_path):
    gates = {}
    label = "n/a"
    if apply_syngr:
        gates, _, label = _gates_for(model, cfg, rng["gate"], None)
    model.zero_grad()
    ls = batch_loss(model, sbatch, cfg, rng)
    lt = batch_loss(model, tbatch, cfg, rng, gates)
    loss = ls + nx.scale(lt, float(cfg.lambda_ratio))
    _check_finite(loss, model, sbatch, lr, update, dump_path)
    loss.backward()
    opt.step(lr)
    return StepResult(float(loss.data), "speech+text", label, sbatch.mask_rate, lr)


def round_float(x: float) -> float:
    return float(f"{x:.6g}")


def train_lm(lm: TransformerLM, sentences: Sequence[Sequence[int]], cfg: TrainConfig, updates: int,
             tag: str = "lm") -> RoundResult:
    """Train the external LM on token sequences (BOS-prefixed history, EOS-terminated target)."""
    rng = RngStreams(cfg.seed).fork(tag)
    lm.config = replace(lm.config, dropout=cfg.dropout)
    opt = Adam(lm.params, cfg.adam_betas, cfg.adam_eps)
    stream = BatchStream(_LenView(sentences), cfg.batch_size, rng["batch-text"])
    every = cfg.checkpoint_every or max(1, updates // 20)
    ckpts, records = [], []
    for u in range(updates):
        lr = lr_at(u, updates, cfg)
        sents = next(stream)
        U = max(len(s.target) for s in sents) + 1
        hist = np.full((len(sents), U), PAD, dtype=np.int64)
        tgt = np.full((len(sents), U), PAD, dtype=np.int64)
        for i, s in enumerate(sents):
            n = len(s.target)
            hist[i, 0] = BOS
            hist[i, 1:n + 1] = s.target
            tgt[i, :n] = s.target
            tgt[i, n] = EOS
        lm.zero_grad()
        logits = lm.logits(hist, train=True, rng=rng)
        loss = nx.smoothed_cross_entropy(logits, tgt, cfg.label_smoothing, tgt == PAD)
        if not np.isfinite(loss.data):
            raise NumericalFault(f"non-finite LM loss at update {u}")
        loss.backward()
        opt.step(lr)
        records.append({"update": u + 1, "provenance": "lm", "loss": round_float(float(loss.data)),
                        "lr": round_float(lr), "gate": "n/a", "mask_rate": 0.0})
        if (u + 1) % every == 0 or u + 1 == updates:
            ckpts.append(Checkpoint.from_model(lm, u + 1, "lm"))
    return RoundResult(ckpts, average_checkpoints(ckpts[-cfg.average_last:]), records)


@dataclass(frozen=True)
class _Sentence:
    target: tuple


class _LenView:
    def __init__(self, sentences):
        self._items = [_Sentence(tuple(int(t) for t in s)) for s in sentences]

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]
