"""Greedy and beam-search decoding with LM shallow fusion; WER with alignments."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import numerics as nx
from .synthtask import BOS, EOS

DEFAULT_BEAM = 20
DEFAULT_LM_WEIGHT = 0.4


# --------------------------------------------------------------------- batching
def pad_audio(audios: Sequence[np.ndarray], dtype=np.float32):
    """Stack variable-length ``(T_i, mel)`` arrays into ``(B, T, mel)`` plus a frame mask."""
    if not audios:
        raise ValueError("no audio to batch")
    T = max(a.shape[0] for a in audios)
    mel = audios[0].shape[1]
    out = np.zeros((len(audios), T, mel), dtype=dtype)
    mask = np.zeros((len(audios), T), dtype=bool)
    for i, a in enumerate(audios):
        out[i, :a.shape[0]] = a
        mask[i, :a.shape[0]] = True
    return out, mask


def max_decode_length(model, n_frames: int) -> int:
    return 3 * model.config.subsampled_frames(n_frames)


# --------------------------------------------------------------------- greedy
def greedy_decode_batch(model, audios: Sequence[np.ndarray], max_len: Optional[Sequence[int]] = None) -> list:
    """Argmax decoding (lowest id wins ties) until EOS or the length budget."""
    audio, mask = pad_audio(audios, model.dtype)
    if max_len is None:
        max_len = [max_decode_length(model, a.shape[0]) for a in audios]
    limits = np.asarray(max_len)
    with nx.no_grad():
        enc, emask, _ = model.encode(audio, mask)
    B = len(audios)
    hist = np.full((B, 1), BOS, dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    out = [[] for _ in range(B)]
    for step in range(int(limits.max())):
        active = np.nonzero(~done)[0]
        if active.size == 0:
            break
        sub_enc = enc if active.size == B else nx.Tensor(enc.data[active])
        logp = model.next_log_probs(sub_enc, emask[active], hist[active])
        nxt = logp.argmax(axis=-1)
        col = np.zeros((B, 1), dtype=np.int64)
        col[active, 0] = nxt
        hist = np.concatenate([hist, col], axis=1)
        for r, tok in zip(active, nxt):
            if tok == EOS:
                done[r] = True
            else:
                out[r].append(int(tok))
                if len(out[r]) >= limits[r]:
                    done[r] = True
    return out


def greedy_decode(model, audio: np.ndarray) -> list:
    return greedy_decode_batch(model, [audio])[0]


# --------------------------------------------------------------------- beam search
@dataclass
class BeamHypothesis:
    tokens: tuple
    asr: float = 0.0
    lm: float = 0.0
    score: float = 0.0
    finished: bool = False


def _fused(asr, lm, weight):
    return asr + weight * lm


def beam_search(step_fn: Callable, n_utts: int, beam: int, max_len: Sequence[int],
                lm_step: Optional[Callable] = None, lm_weight: float = 0.0,
                length_norm: bool = False) -> list:
    """Batched beam search over fused ``asr + lm_weight * lm`` log-probabilities.

    ``step_fn(utt_idx, histories)`` returns ASR next-token log-probs for
    each row; ``lm_step(histories)`` does the same for the LM. Histories
    start with BOS. Finished hypotheses (EOS emitted) compete by fused score
    without length normalisation unless ``length_norm``. Returns, per
    utterance, the hypotheses sorted best-first.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    if lm_weight < 0:
        raise ValueError("lm_weight must be >= 0")
    running = [[BeamHypothesis((BOS,))] for _ in range(n_utts)]
    finished: list = [[] for _ in range(n_utts)]

    def final_score(h):
        return h.score / max(len(h.tokens) - 1, 1) if length_norm else h.score

    for step in range(int(max(max_len)) if len(max_len) else 0):
        rows, owners = [], []
        for u in range(n_utts):
            if step >= max_len[u]:
                continue
            if not length_norm and finished[u] and running[u]:
                # scores never increase, so a finished hypothesis that already
                # beats every running one cannot be overtaken
                if max(f.score for f in finished[u]) >= max(h.score for h in running[u]):
                    running[u] = []
            for h in running[u]:
                rows.append(h)
                owners.append(u)
        if not rows:
            break
        L = len(rows[0].tokens)
        hist = np.array([h.tokens for h in rows], dtype=np.int64)
        if hist.ndim != 2 or hist.shape[1] != L:
            raise RuntimeError("ragged beam histories")
        owners_arr = np.asarray(owners)
        asr_lp = np.asarray(step_fn(owners_arr, hist), dtype=np.float64)
        lm_lp = np.asarray(lm_step(hist), dtype=np.float64) if (lm_step is not None and lm_weight > 0) \
            else np.zeros_like(asr_lp)
        V = asr_lp.shape[1]
        base_asr = np.array([h.asr for h in rows])[:, None] + asr_lp
        base_lm = np.array([h.lm for h in rows])[:, None] + lm_lp
        fused = _fused(base_asr, base_lm, lm_weight)
        new_running = [[] for _ in range(n_utts)]
        for u in np.unique(owners_arr):
            idx = np.nonzero(owners_arr == u)[0]
            cand = fused[idx].reshape(-1)
            order = np.argsort(-cand, kind="stable")[:beam]
            for flat in order:
                if not np.isfinite(cand[flat]):
                    break  # impossible continuations never enter the beam
                r, v = idx[flat // V], int(flat % V)
                h = BeamHypothesis(rows[r].tokens + (v,), float(base_asr[r, v]),
                                   float(base_lm[r, v]), float(fused[r, v]), v == EOS)
                if h.finished:
                    finished[u].append(h)
                else:
                    new_running[u].append(h)
        for u in set(owners):
            running[u] = new_running[u]
    results = []
    for u in range(n_utts):
        pool = finished[u] if finished[u] else running[u]
        results.append(sorted(pool, key=lambda h: -final_score(h)))
    return results


def _hyp_tokens(h: BeamHypothesis) -> list:
    toks = list(h.tokens[1:])
    if toks and toks[-1] == EOS:
        toks.pop()
    return toks


def beam_decode_batch(model, audios: Sequence[np.ndarray], beam: int = DEFAULT_BEAM, lm=None,
                      lm_weight: float = DEFAULT_LM_WEIGHT, length_norm: bool = False,
                      return_hypotheses: bool = False) -> list:
    audio, mask = pad_audio(audios, model.dtype)
    with nx.no_grad():
        enc, emask, _ = model.encode(audio, mask)

    def step_fn(owners, hist):
        return model.next_log_probs(nx.Tensor(enc.data[owners]), emask[owners], hist)

    lm_step = (lambda hist: lm.next_log_probs(hist)) if lm is not None else None
    limits = [max_decode_length(model, a.shape[0]) for a in audios]
    hyps = beam_search(step_fn, len(audios), beam, limits, lm_step,
                       lm_weight if lm is not None else 0.0, length_norm)
    if return_hypotheses:
        return hyps
    return [_hyp_tokens(h[0]) if h else [] for h in hyps]


def beam_decode(model, audio: np.ndarray, beam: int = DEFAULT_BEAM, lm=None,
                lm_weight: float = DEFAULT_LM_WEIGHT, length_norm: bool = False) -> list:
    return beam_decode_batch(model, [audio], beam, lm, lm_weight, length_norm)[0]


def decode_corpus(model, audios: Sequence[np.ndarray], beam: int = 1, lm=None,
                  lm_weight: float = 0.0, batch_size: int = 32) -> list:
    """Decode many utterances in length-sorted batches; output keeps input order."""
    order = sorted(range(len(audios)), key=lambda i: audios[i].shape[0])
    out: list = [None] * len(audios)
    bs = batch_size if beam == 1 else max(1, batch_size // max(1, beam // 4))
    for s in range(0, len(order), bs):
        chunk = order[s:s + bs]
        batch = [audios[i] for i in chunk]
        if beam == 1 and lm is None:
            hyps = greedy_decode_batch(model, batch)
        else:
            hyps = beam_decode_batch(model, batch, beam, lm, lm_weight)
        for i, h in zip(chunk, hyps):
            out[i] = h
    return out


# --------------------------------------------------------------------- WER
@dataclass
class Alignment:
    ops: list                      # (op, ref_index|None, hyp_index|None)
    hyp_correct: list = field(default_factory=list)

    def counts(self) -> dict:
        c = {"match": 0, "sub": 0, "del": 0, "ins": 0}
        for op, _, _ in self.ops:
            c[op] += 1
        return c

    @property
    def errors(self) -> int:
        c = self.counts()
        return c["sub"] + c["del"] + c["ins"]

    def to_string(self) -> str:
        code = {"match": "M", "sub": "S", "del": "D", "ins": "I"}
        return "".join(code[op] for op, _, _ in self.ops)


def align(ref: Sequence, hyp: Sequence) -> Alignment:
    """Unit-cost Levenshtein alignment; backtrace prefers sub/match, then del, then ins."""
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        ri = ref[i - 1]
        for j in range(1, m + 1):
            diag = d[i - 1, j - 1] + (0 if ri == hyp[j - 1] else 1)
            d[i, j] = min(diag, d[i - 1, j] + 1, d[i, j - 1] + 1)
    ops = []
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (0 if ref[i - 1] == hyp[j - 1] else 1):
            ops.append(("match" if ref[i - 1] == hyp[j - 1] else "sub", i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            ops.append(("del", i - 1, None))
            i -= 1
        else:
            ops.append(("ins", None, j - 1))
            j -= 1
    ops.reverse()
    correct = [False] * m
    for op, _, hj in ops:
        if op == "match":
            correct[hj] = True
    return Alignment(ops, correct)


def wer(ref: Sequence, hyp: Sequence):
    """Return ``(rate, alignment)`` with rate = (S + D + I) / len(ref)."""
    if len(ref) == 0:
        raise ValueError("reference must be non-empty")
    ali = align(ref, hyp)
    return ali.errors / len(ref), ali


@dataclass
class ScoreReport:
    rows: list                      # dicts: id, ref, hyp, wer, alignment, errors, ref_len
    split: str = ""

    @property
    def errors(self) -> int:
        return sum(r["errors"] for r in self.rows)

    @property
    def ref_tokens(self) -> int:
        return sum(r["ref_len"] for r in self.rows)

    @property
    def wer(self) -> float:
        return self.errors / max(self.ref_tokens, 1)

    def to_jsonl(self) -> str:
        lines = [json.dumps({"id": r["id"], "ref": r["ref"], "hyp": r["hyp"],
                             "wer": f"{r['wer']:.6f}", "alignment": r["alignment"]}, sort_keys=True)
                 for r in self.rows]
        lines.append(json.dumps({"summary": {"split": self.split, "utterances": len(self.rows),
                                             "errors": self.errors, "ref_tokens": self.ref_tokens,
                                             "wer": f"{self.wer:.6f}"}}, sort_keys=True))
        return "\n".join(lines) + "\n"


def score_corpus(ids: Sequence[str], refs: Sequence[Sequence], hyps: Sequence[Sequence],
                 split: str = "", decode_tokens: Optional[Callable] = None) -> ScoreReport:
    rows = []
    for rid, ref, hyp in zip(ids, refs, hyps):
        rate, ali = wer(ref, hyp)
        show = decode_tokens or (lambda t: [str(x) for x in t])
        rows.append({"id": rid, "ref": " ".join(show(ref)), "hyp": " ".join(show(hyp)),
                     "wer": rate, "alignment": ali.to_string(), "errors": ali.errors,
                     "ref_len": len(ref)})
    return ScoreReport(rows, split)
