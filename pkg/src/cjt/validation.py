"""Input checks shared by the estimator wrappers."""
from __future__ import annotations

import numpy as np


def check_audio_list(X, mel_dim=None) -> list:
    """Return ``X`` as a list of finite float ``(T, mel)`` arrays with T >= 1."""
    if isinstance(X, np.ndarray) and X.ndim == 3:
        X = list(X)
    if len(X) == 0:
        raise ValueError("expected at least one utterance")
    out = []
    for i, a in enumerate(X):
        a = np.asarray(a, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] == 0:
            raise ValueError(f"utterance {i}: expected a (frames, mel) array, got shape {a.shape}")
        if mel_dim is not None and a.shape[1] != mel_dim:
            raise ValueError(f"utterance {i}: expected {mel_dim} mel bins, got {a.shape[1]}")
        if not np.isfinite(a).all():
            raise ValueError(f"utterance {i}: contains NaN or Inf")
        out.append(a)
    if mel_dim is None and len({a.shape[1] for a in out}) > 1:
        raise ValueError("utterances disagree on the number of mel bins")
    return out


def check_token_sequences(y, vocab_size: int, n=None, allow_empty: bool = False) -> list:
    """Return ``y`` as tuples of ints in ``[0, vocab_size)``."""
    out = []
    for i, seq in enumerate(y):
        seq = tuple(int(t) for t in seq)
        if not seq and not allow_empty:
            raise ValueError(f"sequence {i} is empty")
        if any(t < 0 or t >= vocab_size for t in seq):
            raise ValueError(f"sequence {i} has ids outside [0, {vocab_size})")
        out.append(seq)
    if n is not None and len(out) != n:
        raise ValueError(f"got {len(out)} targets for {n} utterances")
    return out
