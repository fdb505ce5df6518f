"""Representation similarity (PWCCA) and confidence histograms of pseudo-label tokens."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import numerics as nx
from .decode import pad_audio, wer
from .pairgen import teacher_forced_probs

SVD_TOLERANCE = 1e-6
DEFAULT_PROBE_FRAMES = 10_000


class RankError(ValueError):
    """An activation matrix has no variance left after centering."""


class LayoutMismatch(ValueError):
    pass


@dataclass
class PWCCAResult:
    similarity: float
    rho: np.ndarray                 # canonical correlations, non-increasing
    alpha: np.ndarray               # projection weights
    tolerance: float
    directions: int


def _orthobasis(M: np.ndarray, tol: float, label: str) -> np.ndarray:
    U, s, _ = np.linalg.svd(M, full_matrices=False)
    if s.size == 0 or s[0] <= 0:
        raise RankError(f"{label} has rank 0")
    keep = s > tol * s[0]
    return U[:, keep]


def pwcca(X: np.ndarray, Y: np.ndarray, tol: float = SVD_TOLERANCE) -> PWCCAResult:
    """Projection-weighted CCA similarity of two ``(n, d)`` activation matrices.

    Both inputs are centred; each is reduced to an orthonormal basis of its
    column space (singular values below ``tol * s_max`` dropped). Canonical
    correlations are the singular values of ``Ux^T Uy``; the X-side canonical
    variates are weighted by their summed absolute projection onto X's
    neuron columns.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise ValueError(f"need (n, d) matrices with equal n, got {X.shape} and {Y.shape}")
    n = X.shape[0]
    if n <= max(X.shape[1], Y.shape[1]):
        raise ValueError(f"need more datapoints than neurons: n={n}, d={X.shape[1]}/{Y.shape[1]}")
    X = X - X.mean(axis=0)
    Y = Y - Y.mean(axis=0)
    Ux = _orthobasis(X, tol, "X")
    Uy = _orthobasis(Y, tol, "Y")
    U, rho, _ = np.linalg.svd(Ux.T @ Uy, full_matrices=False)
    k = min(Ux.shape[1], Uy.shape[1])
    rho = np.clip(rho[:k], 0.0, 1.0)
    H = Ux @ U[:, :k]                       # (n, k) unit-norm canonical variates
    alpha = np.abs(H.T @ X).sum(axis=1)
    sim = float((alpha * rho).sum() / alpha.sum())
    return PWCCAResult(sim, rho, alpha, tol, k)


def probe_frames(audios: Sequence[np.ndarray], frames: int = DEFAULT_PROBE_FRAMES):
    """Take whole utterances in order until ``frames`` input frames are covered."""
    chosen, total = [], 0
    for a in audios:
        if total >= frames:
            break
        chosen.append(a)
        total += a.shape[0]
    if not chosen:
        raise ValueError("empty probe set")
    return chosen


def layer_activations(model, audios: Sequence[np.ndarray], batch_size: int = 32) -> list:
    """Per encoder layer, an ``(n_valid_frames, d)`` matrix over the probe set."""
    layers: Optional[list] = None
    for s in range(0, len(audios), batch_size):
        audio, mask = pad_audio(audios[s:s + batch_size], model.dtype)
        with nx.no_grad():
            _, emask, taps = model.encode(audio, mask, taps=True)
        if layers is None:
            layers = [[] for _ in taps]
        for i, t in enumerate(taps):
            layers[i].append(np.asarray(t, dtype=np.float64)[emask])
    return [np.concatenate(x) for x in layers]


def layer_similarity_sweep(models: dict, reference, probe: Sequence[np.ndarray],
                           frames: int = DEFAULT_PROBE_FRAMES) -> dict:
    """PWCCA of every encoder layer of each model against the same layer of ``reference``.

    ``models`` maps a tag to a model; returns tag -> list of per-layer results.
    """
    for tag, m in models.items():
        if m.config.enc_layers != reference.config.enc_layers or \
                m.config.attn_dim != reference.config.attn_dim:
            raise LayoutMismatch(f"{tag}: encoder layout differs from the reference")
    audios = probe_frames(probe, frames)
    ref_acts = layer_activations(reference, audios)
    out = {}
    for tag, m in models.items():
        acts = layer_activations(m, audios)
        out[tag] = [pwcca(a, r) for a, r in zip(acts, ref_acts)]
    return out


def similarity_tsv(sweep: dict) -> str:
    lines = ["layer\tmodel_tag\tpwcca"]
    for tag, results in sweep.items():
        for i, r in enumerate(results, 1):
            lines.append(f"{i}\t{tag}\t{r.similarity:.6f}")
    return "\n".join(lines) + "\n"


@dataclass
class ConfidenceHistogram:
    edges: np.ndarray
    correct: np.ndarray
    incorrect: np.ndarray
    correct_probs: np.ndarray
    incorrect_probs: np.ndarray

    def mean(self, cls: str) -> float:
        p = self.correct_probs if cls == "correct" else self.incorrect_probs
        return float(p.mean()) if p.size else float("nan")

    def to_tsv(self) -> str:
        lines = ["bin_low\tbin_high\tclass\tcount"]
        for name, counts in (("correct", self.correct), ("incorrect", self.incorrect)):
            for lo, hi, c in zip(self.edges[:-1], self.edges[1:], counts):
                lines.append(f"{lo:.4f}\t{hi:.4f}\t{name}\t{int(c)}")
        return "\n".join(lines) + "\n"


def token_correctness(pairs, references: dict) -> list:
    """Per pseudo-label token, whether the edit alignment matches it to the reference."""
    return [wer(references[r.id], r.target)[1].hyp_correct for r in pairs]


def confidence_histogram(model, pairs, references: dict, bins: int = 20) -> ConfidenceHistogram:
    """Teacher-forced probabilities of pseudo-label tokens, split by alignment correctness.

    ``references`` maps record id to the sealed reference tokens; it is used
    only to label tokens as correct or incorrect.
    """
    flags = token_correctness(pairs, references)
    probs = teacher_forced_probs(model, pairs, list(pairs))
    p = np.array([x for row in probs for x in row], dtype=np.float64)
    f = np.array([x for row in flags for x in row], dtype=bool)
    edges = np.linspace(0.0, 1.0, bins + 1)
    return ConfidenceHistogram(edges, np.histogram(p[f], edges)[0], np.histogram(p[~f], edges)[0],
                               p[f], p[~f])
