"""Synthetic stand-in for a low-resource speech corpus.

Sentences come from a fixed order-2 Markov grammar over a small word
vocabulary. "Real" audio renders each word as a few frames of a
speaker-transformed prototype vector plus Gaussian noise; the "tts" renderer
uses fewer speakers, tighter durations and less noise. The ``other``
condition doubles the real noise level.
"""
from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from .numerics.rng import derive_seed

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<s>", "</s>", "<unk>")
N_SPECIAL = len(SPECIALS)

PROVENANCES = ("gold", "unpaired-speech", "unpaired-text")
CONDITIONS = ("clean", "other")

_ONSETS = "b d f g k l m n p r s t v z".split()
_VOWELS = "a e i o u".split()


# --------------------------------------------------------------------- vocab
@dataclass(frozen=True)
class Vocab:
    tokens: tuple

    def __post_init__(self):
        toks = tuple(self.tokens)
        object.__setattr__(self, "tokens", toks)
        if len(set(toks)) != len(toks):
            raise ValueError("duplicate tokens in vocabulary")
        clash = set(toks) & set(SPECIALS)
        if clash:
            raise ValueError(f"tokens collide with reserved specials: {sorted(clash)}")
        object.__setattr__(self, "_index", {t: i + N_SPECIAL for i, t in enumerate(toks)})

    @classmethod
    def default(cls, n_words: int = 40) -> "Vocab":
        words = [o + v for o in _ONSETS for v in _VOWELS]
        if n_words > len(words):
            words += [w + "n" for w in words]
        if n_words > len(words):
            raise ValueError(f"at most {len(words)} default words available")
        return cls(tuple(words[:n_words]))

    @property
    def size(self) -> int:
        return N_SPECIAL + len(self.tokens)

    @property
    def n_content(self) -> int:
        return len(self.tokens)

    def encode(self, words: Iterable[str]) -> list:
        return [self._index.get(w, UNK) for w in words]

    def decode(self, ids: Iterable[int]) -> list:
        out = []
        for i in ids:
            i = int(i)
            out.append(SPECIALS[i] if i < N_SPECIAL else self.tokens[i - N_SPECIAL])
        return out


# --------------------------------------------------------------------- grammar
class Grammar:
    """Order-2 Markov chain over content-token ids.

    Each ``(prev2, prev1)`` context has ``branching`` successors drawn from
    a seed-derived generator, never repeating ``prev1`` so adjacent tokens
    stay acoustically separable. The sentence-initial context has
    ``start_branching`` successors instead, which sets how many distinct
    sentences exist.
    """

    def __init__(self, vocab: Vocab, seed: int, branching: int = 4,
                 min_len: int = 3, max_len: int = 12, start_branching: Optional[int] = None):
        start_branching = branching if start_branching is None else start_branching
        if branching >= vocab.n_content or not 1 <= start_branching <= vocab.n_content:
            raise ValueError("branching must be smaller than the content vocabulary")
        self.vocab = vocab
        self.seed = seed
        self.branching = branching
        self.start_branching = start_branching
        self.min_len = min_len
        self.max_len = max_len
        self._cache: dict = {}

    def successors(self, prev2: int, prev1: int):
        key = (prev2, prev1)
        hit = self._cache.get(key)
        if hit is None:
            rng = np.random.default_rng(derive_seed(self.seed, "grammar", prev2, prev1))
            ids = np.arange(N_SPECIAL, self.vocab.size)
            ids = ids[ids != prev1]
            n = self.start_branching if (prev2, prev1) == (BOS, BOS) else self.branching
            succ = rng.choice(ids, size=n, replace=False)
            probs = rng.dirichlet(np.full(n, 1.0))
            hit = (succ.astype(np.int64), probs)
            self._cache[key] = hit
        return hit

    def sample(self, rng: np.random.Generator, length: Optional[int] = None) -> list:
        n = int(rng.integers(self.min_len, self.max_len + 1)) if length is None else length
        out: list = []
        a, b = BOS, BOS
        for _ in range(n):
            succ, probs = self.successors(a, b)
            tok = int(succ[rng.choice(len(succ), p=probs)])
            out.append(tok)
            a, b = b, tok
        return out

    def log_prob(self, tokens: Sequence[int]) -> float:
        a, b = BOS, BOS
        total = 0.0
        for t in tokens:
            succ, probs = self.successors(a, b)
            hit = np.nonzero(succ == t)[0]
            if hit.size == 0:
                return -math.inf
            total += math.log(probs[hit[0]])
            a, b = b, int(t)
        return total


# --------------------------------------------------------------------- rendering
@dataclass
class RenderProfile:
    prototypes: np.ndarray          # (vocab.size, mel_dim); rows for specials unused
    gains: np.ndarray               # (n_speakers, mel_dim, mel_dim)
    biases: np.ndarray              # (n_speakers, mel_dim)
    duration: tuple                 # inclusive (lo, hi) frames per token
    noise_sigma: float
    kind: str = "real"

    def __post_init__(self):
        if self.kind not in ("real", "tts"):
            raise ValueError(f"unknown profile kind {self.kind!r}")
        if self.gains.shape[0] != self.biases.shape[0]:
            raise ValueError("speaker pool gains/biases disagree")
        lo, hi = self.duration
        if not 1 <= lo <= hi:
            raise ValueError(f"bad duration range {self.duration}")

    @property
    def n_speakers(self) -> int:
        return self.gains.shape[0]

    @property
    def mel_dim(self) -> int:
        return self.prototypes.shape[1]

    def with_noise(self, factor: float) -> "RenderProfile":
        return replace(self, noise_sigma=self.noise_sigma * factor)


@dataclass(frozen=True)
class TaskConfig:
    """Knobs of the synthetic acoustic world."""
    n_words: int = 40
    mel_dim: int = 16
    branching: int = 2
    start_branching: int = 2
    min_len: int = 3
    max_len: int = 12
    confusable_offset: float = 0.6
    real_speakers: int = 16
    real_speaker_spread: float = 0.3
    real_duration: tuple = (2, 5)
    real_noise: float = 0.5
    tts_speakers: int = 3
    tts_speaker_spread: float = 0.1
    tts_duration: tuple = (3, 4)
    tts_noise: float = 0.2
    tts_channel_warp: float = 1.0       # shared linear distortion of every tts voice
    tts_channel_bias: float = 2.0       # shared spectral offset of every tts voice
    other_noise_factor: float = 2.0
    world_seed: int = 1234


def _speakers(rng, n, mel_dim, spread):
    gains = np.eye(mel_dim)[None] + spread * rng.normal(size=(n, mel_dim, mel_dim)) / math.sqrt(mel_dim)
    biases = spread * rng.normal(size=(n, mel_dim))
    return gains, biases


def make_profiles(task: TaskConfig, vocab: Optional[Vocab] = None):
    """Build the (real, tts) render profiles of the world described by ``task``.

    Words are created in confusable pairs: each pair shares a base prototype
    and differs by ``confusable_offset`` along a random direction. All tts
    voices share a channel distortion that no real speaker has.
    """
    vocab = vocab or Vocab.default(task.n_words)
    rng = np.random.default_rng(derive_seed(task.world_seed, "prototypes"))
    protos = np.zeros((vocab.size, task.mel_dim))
    n = vocab.n_content
    for i in range(0, n, 2):
        base = rng.normal(size=task.mel_dim)
        d = rng.normal(size=task.mel_dim)
        d *= task.confusable_offset / np.linalg.norm(d)
        protos[N_SPECIAL + i] = base + d
        if i + 1 < n:
            protos[N_SPECIAL + i + 1] = base - d
    srng = np.random.default_rng(derive_seed(task.world_seed, "speakers"))
    rg, rb = _speakers(srng, task.real_speakers, task.mel_dim, task.real_speaker_spread)
    tg, tb = _speakers(srng, task.tts_speakers, task.mel_dim, task.tts_speaker_spread)
    # the synthesiser colours all of its voices the same way
    warp = np.eye(task.mel_dim) + task.tts_channel_warp * srng.normal(
        size=(task.mel_dim, task.mel_dim)) / math.sqrt(task.mel_dim)
    shift = srng.normal(size=task.mel_dim)
    tg = warp[None] @ tg
    tb = tb + task.tts_channel_bias * shift / np.linalg.norm(shift)
    real = RenderProfile(protos, rg, rb, tuple(task.real_duration), task.real_noise, "real")
    tts = RenderProfile(protos, tg, tb, tuple(task.tts_duration), task.tts_noise, "tts")
    check_profile_ordering(real, tts)
    return real, tts


def check_profile_ordering(real: RenderProfile, tts: RenderProfile):
    if not (tts.n_speakers < real.n_speakers
            and tts.duration[1] - tts.duration[0] < real.duration[1] - real.duration[0]
            and tts.noise_sigma < real.noise_sigma):
        raise ValueError("tts profile must have fewer speakers, narrower durations and less noise")


def render(transcript: Sequence[int], profile: RenderProfile, seed: int,
           noise_factor: float = 1.0) -> np.ndarray:
    """Render token ids to a (frames, mel_dim) float32 feature matrix."""
    ids = np.asarray(transcript, dtype=np.int64)
    if ids.size and (ids.min() < N_SPECIAL or ids.max() >= profile.prototypes.shape[0]):
        raise ValueError("transcript contains ids outside the content vocabulary")
    rng = np.random.default_rng(seed)
    spk = int(rng.integers(profile.n_speakers))
    lo, hi = profile.duration
    durs = rng.integers(lo, hi + 1, size=ids.size)
    frames = np.repeat(ids, durs)
    clean = profile.prototypes[frames] @ profile.gains[spk].T + profile.biases[spk]
    noise = rng.normal(size=clean.shape) * (profile.noise_sigma * noise_factor)
    return (clean + noise).astype(np.float32)


# --------------------------------------------------------------------- SpecAugment
@dataclass(frozen=True)
class SpecAugmentPolicy:
    freq_masks: int = 2
    time_masks: int = 2
    max_freq_width: Optional[int] = None   # default ceil(mel_dim / 8)
    max_time_ratio: float = 0.1            # time width <= ceil(frames * ratio)

    def widths(self, frames: int, mel_dim: int) -> tuple:
        fw = self.max_freq_width if self.max_freq_width is not None else math.ceil(mel_dim / 8)
        tw = math.ceil(frames * self.max_time_ratio)
        return min(fw, mel_dim), min(tw, frames)

    def max_masked_cells(self, frames: int, mel_dim: int) -> int:
        fw, tw = self.widths(frames, mel_dim)
        return self.freq_masks * fw * frames + self.time_masks * tw * mel_dim


NO_AUGMENT = SpecAugmentPolicy(freq_masks=0, time_masks=0)


def spec_augment(audio: np.ndarray, policy: SpecAugmentPolicy = SpecAugmentPolicy(),
                 seed=None) -> np.ndarray:
    """Mask random frequency bands and time spans with the utterance mean."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    frames, mel_dim = audio.shape
    if policy.freq_masks == 0 and policy.time_masks == 0:
        return audio
    out = audio.copy()
    fill = audio.mean()
    fw, tw = policy.widths(frames, mel_dim)
    for _ in range(policy.freq_masks):
        w = int(rng.integers(0, fw + 1))
        f0 = int(rng.integers(0, mel_dim - w + 1))
        out[:, f0:f0 + w] = fill
    for _ in range(policy.time_masks):
        w = int(rng.integers(0, tw + 1))
        t0 = int(rng.integers(0, frames - w + 1))
        out[t0:t0 + w, :] = fill
    return out


# --------------------------------------------------------------------- manifests
@dataclass(frozen=True)
class ManifestRecord:
    id: str
    audio: str                     # feature-dump path or "seed:<int>"
    transcript: Optional[tuple]    # token strings; None when unpaired
    provenance: str
    condition: str = "clean"
    sealed: Optional[tuple] = None  # reference held back for scoring only

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if self.condition not in CONDITIONS:
            raise ValueError(f"unknown condition {self.condition!r}")
        for fld in (self.id, self.audio):
            if "\t" in fld or "\n" in fld:
                raise ValueError("manifest fields may not contain tabs or newlines")

    @property
    def render_seed(self) -> Optional[int]:
        return int(self.audio[5:]) if self.audio.startswith("seed:") else None

    def to_line(self) -> str:
        tr = "" if self.transcript is None else " ".join(self.transcript)
        se = "" if self.sealed is None else " ".join(self.sealed)
        return "\t".join((self.id, self.audio, tr, self.provenance, self.condition, se))

    @classmethod
    def from_line(cls, line: str) -> "ManifestRecord":
        parts = line.rstrip("\n").split("\t")
        if len(parts) == 5:
            parts.append("")
        if len(parts) != 6:
            raise ValueError(f"manifest line has {len(parts)} fields: {line!r}")
        rid, audio, tr, prov, cond, se = parts
        return cls(rid, audio, tuple(tr.split(" ")) if tr else None, prov, cond,
                   tuple(se.split(" ")) if se else None)


class Manifest:
    def __init__(self, records: Iterable[ManifestRecord] = ()):
        self.records = list(records)

    def __len__(self):
        return len(self.records)

    def __iter__(self) -> Iterator[ManifestRecord]:
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def __eq__(self, other):
        return isinstance(other, Manifest) and self.records == other.records

    def ids(self) -> list:
        return [r.id for r in self.records]

    def training_view(self) -> "Manifest":
        """Copy with sealed references stripped; what training code may see."""
        return Manifest(replace(r, sealed=None) for r in self.records)

    def serialize(self) -> str:
        return "".join(r.to_line() + "\n" for r in self.records)

    @classmethod
    def parse(cls, text: str) -> "Manifest":
        return cls(ManifestRecord.from_line(ln) for ln in text.splitlines() if ln)

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.serialize())

    @classmethod
    def load(cls, path) -> "Manifest":
        with open(path, encoding="utf-8") as fh:
            return cls.parse(fh.read())


# --------------------------------------------------------------------- feature dumps
_DUMP_HEADER = struct.Struct("<II")


def dump_features(audio: np.ndarray, path_or_file):
    """Write ``frames, mel_dim`` (uint32 LE) then row-major float32 LE."""
    arr = np.ascontiguousarray(audio, dtype="<f4")
    payload = _DUMP_HEADER.pack(arr.shape[0], arr.shape[1]) + arr.tobytes()
    if hasattr(path_or_file, "write"):
        path_or_file.write(payload)
    else:
        with open(path_or_file, "wb") as fh:
            fh.write(payload)


def load_features(path_or_file) -> np.ndarray:
    if hasattr(path_or_file, "read"):
        raw = path_or_file.read()
    else:
        with open(path_or_file, "rb") as fh:
            raw = fh.read()
    frames, mel = _DUMP_HEADER.unpack_from(raw)
    body = raw[_DUMP_HEADER.size:]
    if len(body) != frames * mel * 4:
        raise ValueError("feature dump truncated or corrupt")
    return np.frombuffer(body, dtype="<f4").reshape(frames, mel).astype(np.float32)


# --------------------------------------------------------------------- corpus
@dataclass(frozen=True)
class CorpusSizes:
    paired_n: int = 200
    unpaired_speech_n: int = 5000
    unpaired_text_n: int = 20000
    eval_n: int = 200

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if int(v) <= 0:
                raise ValueError(f"{k} must be positive")


EVAL_SPLITS = ("dev_clean", "dev_other", "test_clean", "test_other")


@dataclass
class Corpus:
    """Manifests per split plus materialised real audio keyed by record id."""
    vocab: Vocab
    task: TaskConfig
    seed: int
    manifests: dict
    audio: dict = field(default_factory=dict)

    def profiles(self):
        return make_profiles(self.task, self.vocab)

    def features(self, rec: ManifestRecord) -> np.ndarray:
        return self.audio[rec.id]

    def references(self, split: str) -> dict:
        """Reference token ids for scoring: transcript, else the sealed field."""
        out = {}
        for r in self.manifests[split]:
            words = r.transcript if r.transcript is not None else r.sealed
            out[r.id] = self.vocab.encode(words)
        return out

    def save(self, directory):
        os.makedirs(os.path.join(directory, "features"), exist_ok=True)
        for split, man in self.manifests.items():
            man.save(os.path.join(directory, f"{split}.tsv"))
        for rid, arr in self.audio.items():
            dump_features(arr, os.path.join(directory, "features", f"{rid}.f32"))

    @classmethod
    def load(cls, directory, vocab: Vocab, task: TaskConfig, seed: int) -> "Corpus":
        manifests = {}
        for name in sorted(os.listdir(directory)):
            if name.endswith(".tsv"):
                manifests[name[:-4]] = Manifest.load(os.path.join(directory, name))
        audio = {}
        for man in manifests.values():
            for r in man:
                if not r.audio.startswith("seed:"):
                    audio[r.id] = load_features(os.path.join(directory, r.audio))
        return cls(vocab, task, seed, manifests, audio)


def sentence_side(tokens: Sequence[int], world_seed: int) -> str:
    """Which half of the sentence space ``tokens`` belongs to: "speech" or "text"."""
    return "text" if derive_seed(world_seed, "side", *tokens) & 1 else "speech"


def generate_corpus(seed: int, sizes: CorpusSizes = CorpusSizes(),
                    task: TaskConfig = TaskConfig(), vocab: Optional[Vocab] = None) -> Corpus:
    """Sample all splits deterministically from ``seed``.

    Real-audio records (paired, unpaired speech, dev/test) are rendered now
    and stored under ``features/<id>.f32``; their manifests carry the path.
    Unpaired text records keep an inline render seed so they can be
    synthesised later. Unpaired-text sentences never coincide with any
    speech transcript: every sentence belongs to one side of a fixed
    hash partition, and each side draws a uniform length first, then
    resamples within that length. Plain rejection of seen sentences would
    starve the text side of short sentences, which a small grammar has
    only a handful of.
    """
    vocab = vocab or Vocab.default(task.n_words)
    grammar = Grammar(vocab, task.world_seed, task.branching, task.min_len, task.max_len,
                      task.start_branching)
    real, _ = make_profiles(task, vocab)
    rng = np.random.default_rng(derive_seed(seed, "corpus"))
    manifests: dict = {}
    audio: dict = {}
    limit = 1000

    def draw(side):
        n = int(rng.integers(task.min_len, task.max_len + 1))
        for _ in range(limit):
            toks = grammar.sample(rng, n)
            if sentence_side(toks, task.world_seed) == side:
                return toks
        raise ValueError("vocabulary/grammar too small to draw disjoint unpaired text")

    def speech_split(name, n, prov, cond, sealed):
        recs = []
        noise = task.other_noise_factor if cond == "other" else 1.0
        for i in range(n):
            toks = draw("speech")
            rseed = int(rng.integers(2**31))
            rid = f"{name}-{i:06d}"
            words = tuple(vocab.decode(toks))
            audio[rid] = render(toks, real, rseed, noise)
            path = f"features/{rid}.f32"
            if sealed:
                recs.append(ManifestRecord(rid, path, None, prov, cond, words))
            else:
                recs.append(ManifestRecord(rid, path, words, prov, cond))
        manifests[name] = Manifest(recs)

    speech_split("paired", sizes.paired_n, "gold", "clean", False)
    speech_split("unpaired_speech", sizes.unpaired_speech_n, "unpaired-speech", "clean", True)
    for split in EVAL_SPLITS:
        speech_split(split, sizes.eval_n, "gold", split.split("_")[1], False)

    text_recs = []
    for i in range(sizes.unpaired_text_n):
        toks = draw("text")
        rseed = int(rng.integers(2**31))
        rid = f"unpaired_text-{i:06d}"
        text_recs.append(ManifestRecord(rid, f"seed:{rseed}", tuple(vocab.decode(toks)),
                                        "unpaired-text", "clean"))
    manifests["unpaired_text"] = Manifest(text_recs)
    return Corpus(vocab, task, seed, manifests, audio)
