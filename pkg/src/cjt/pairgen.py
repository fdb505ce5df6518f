"""Build the two complementary pair sets.

* speech-PseL: unpaired real audio labelled by a teacher's best beam hypothesis.
* SynA-text: unpaired text rendered by the low-variation tts profile.

Per-token confidences are teacher-forced probabilities of each pseudo-label
token under a designated model.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from . import numerics as nx
from .decode import DEFAULT_BEAM, DEFAULT_LM_WEIGHT, decode_corpus, pad_audio, wer
from .numerics.rng import derive_seed
from .synthtask import BOS, PAD, Manifest, RenderProfile, Vocab, render

PAIR_PROVENANCES = ("speech-PseL", "SynA-text", "gold")
DEFAULT_SYNTH_FRACTION = 0.1


@dataclass(frozen=True)
class PairRecord:
    id: str
    audio: str                          # manifest audio reference
    target: tuple                       # token ids, no BOS/EOS
    provenance: str
    confidences: Optional[tuple] = None
    condition: str = "clean"

    def __post_init__(self):
        if self.provenance not in PAIR_PROVENANCES:
            raise ValueError(f"unknown pair provenance {self.provenance!r}")
        if self.confidences is not None:
            if self.provenance != "speech-PseL":
                raise ValueError("only speech-PseL pairs carry confidences")
            if len(self.confidences) != len(self.target):
                raise ValueError("confidences must match target length")


class AudioBank:
    """Resolves a pair's audio: stored real features, or tts renders of its text."""

    def __init__(self, real_audio: dict, tts: Optional[RenderProfile] = None):
        self.real = real_audio
        self.tts = tts
        self._cache: dict = {}

    def __call__(self, rec: PairRecord) -> np.ndarray:
        if rec.audio.startswith("seed:"):
            hit = self._cache.get(rec.id)
            if hit is None:
                if self.tts is None:
                    raise ValueError("no tts profile to render synthesized audio")
                hit = render(rec.target, self.tts, int(rec.audio[5:]))
                self._cache[rec.id] = hit
            return hit
        return self.real[rec.id]


class PairSet:
    def __init__(self, records: Iterable[PairRecord], bank: AudioBank):
        self.records = list(records)
        self.bank = bank

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def audio(self, rec: PairRecord) -> np.ndarray:
        return self.bank(rec)

    def with_records(self, records) -> "PairSet":
        return PairSet(records, self.bank)

    @property
    def provenance(self) -> str:
        provs = {r.provenance for r in self.records}
        return provs.pop() if len(provs) == 1 else "mixed"

    def serialize(self, vocab: Vocab) -> str:
        """Manifest columns (training view) plus provenance, target, confidences."""
        lines = []
        for r in self.records:
            base_prov = "unpaired-text" if r.provenance == "SynA-text" else (
                "unpaired-speech" if r.provenance == "speech-PseL" else "gold")
            words = " ".join(vocab.decode(r.target))
            conf = "" if r.confidences is None else ",".join(f"{c:.6f}" for c in r.confidences)
            transcript = words if r.provenance != "speech-PseL" else ""
            lines.append("\t".join((r.id, r.audio, transcript, base_prov, r.condition, "",
                                    r.provenance, words, conf)))
        return "".join(ln + "\n" for ln in lines)

    @classmethod
    def parse(cls, text: str, vocab: Vocab, bank: AudioBank) -> "PairSet":
        recs = []
        for ln in text.splitlines():
            if not ln:
                continue
            parts = ln.split("\t")
            if len(parts) != 9:
                raise ValueError(f"pair line has {len(parts)} fields")
            rid, audio, _, _, cond, _, prov, words, conf = parts
            target = tuple(vocab.encode(words.split(" "))) if words else ()
            confs = tuple(float(c) for c in conf.split(",")) if conf else None
            recs.append(PairRecord(rid, audio, target, prov, confs, cond))
        return cls(recs, bank)


@dataclass
class PairSetStats:
    records: int
    pseudo_label_wer: Optional[float]
    mean_confidence: Optional[float]


def gold_pairs(manifest: Manifest, vocab: Vocab, bank: AudioBank) -> PairSet:
    recs = [PairRecord(r.id, r.audio, tuple(vocab.encode(r.transcript)), "gold",
                       condition=r.condition) for r in manifest]
    return PairSet(recs, bank)


def pseudo_label(teacher, unpaired_speech: Manifest, audio: dict, bank: AudioBank,
                 beam: int = DEFAULT_BEAM, lm=None, lm_weight: float = DEFAULT_LM_WEIGHT,
                 batch_size: int = 32) -> PairSet:
    """Label every unpaired utterance with the teacher's best hypothesis.

    Only ids and audio are consulted; the sealed reference column is never read.
    """
    if len(unpaired_speech) == 0:
        raise ValueError("empty unpaired-speech manifest")
    if beam < 1:
        raise ValueError("beam must be >= 1")
    ids = [r.id for r in unpaired_speech]
    refs = [r.audio for r in unpaired_speech]
    conds = [r.condition for r in unpaired_speech]
    feats = [audio[i] for i in ids]
    hyps = decode_corpus(teacher, feats, beam=beam, lm=lm,
                         lm_weight=lm_weight if lm is not None else 0.0, batch_size=batch_size)
    recs = [PairRecord(i, a, tuple(h), "speech-PseL", condition=c)
            for i, a, h, c in zip(ids, refs, hyps, conds)]
    return PairSet(recs, bank)


def teacher_forced_probs(model, pairs: PairSet, records: Sequence[PairRecord],
                         batch_size: int = 32) -> list:
    """Probability the model assigns to each target token under teacher forcing (eval mode)."""
    out: list = []
    for s in range(0, len(records), batch_size):
        chunk = records[s:s + batch_size]
        audio, mask = pad_audio([pairs.audio(r) for r in chunk], model.dtype)
        U = max(len(r.target) for r in chunk) + 1
        hist = np.full((len(chunk), U), PAD, dtype=np.int64)
        hist[:, 0] = BOS
        for i, r in enumerate(chunk):
            hist[i, 1:len(r.target) + 1] = r.target
        with nx.no_grad():
            logits, _ = model.forward(audio, mask, hist)
            logp = nx.log_softmax(logits).data
        for i, r in enumerate(chunk):
            n = len(r.target)
            if n == 0:
                out.append(())
                continue
            lp = logp[i, np.arange(n), np.asarray(r.target)]
            out.append(tuple(float(x) for x in np.clip(np.exp(lp.astype(np.float64)), 0.0, 1.0)))
    return out


def score_confidences(model, pairs: PairSet, batch_size: int = 32) -> PairSet:
    """Attach per-token teacher-forced probabilities to speech-PseL pairs."""
    for r in pairs:
        if r.provenance != "speech-PseL":
            raise ValueError("confidences are only scored for speech-PseL pairs")
    # length-sorted batches; results are independent of record order
    order = sorted(range(len(pairs)), key=lambda i: (pairs.audio(pairs[i]).shape[0], pairs[i].id))
    probs = teacher_forced_probs(model, pairs, [pairs[i] for i in order], batch_size)
    conf = [None] * len(pairs)
    for i, p in zip(order, probs):
        conf[i] = p
    return pairs.with_records(replace(r, confidences=c) for r, c in zip(pairs, conf))


def synthesize_pairs(unpaired_text: Manifest, vocab: Vocab, tts: RenderProfile,
                     fraction: float = DEFAULT_SYNTH_FRACTION, seed: int = 0) -> PairSet:
    """Render a deterministic ``fraction`` of the text records with the tts profile."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must be in (0, 1]")
    if tts.kind != "tts":
        raise ValueError("synthesis needs a tts profile")
    n = len(unpaired_text)
    k = n if fraction == 1.0 else int(round(fraction * n))
    rng = np.random.default_rng(derive_seed(seed, "synthesize"))
    chosen = np.sort(rng.choice(n, size=k, replace=False)) if k < n else np.arange(n)
    recs = []
    for i in chosen:
        r = unpaired_text[int(i)]
        recs.append(PairRecord(r.id, r.audio, tuple(vocab.encode(r.transcript)), "SynA-text",
                               condition=r.condition))
    return PairSet(recs, AudioBank({}, tts))


def pair_set_stats(pairs: PairSet, references: Optional[dict] = None) -> PairSetStats:
    """Count, pseudo-label WER against sealed references (scoring only), mean confidence."""
    plw = None
    if references is not None:
        errs = tot = 0
        for r in pairs:
            ref = references[r.id]
            _, ali = wer(ref, r.target)
            errs += ali.errors
            tot += len(ref)
        plw = errs / max(tot, 1)
    confs = [c for r in pairs if r.confidences for c in r.confidences]
    return PairSetStats(len(pairs), plw, float(np.mean(confs)) if confs else None)
