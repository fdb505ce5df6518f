"""Tri-stage learning rate and the 1:lambda update pattern."""
from __future__ import annotations

import math


def lr_at(update: int, total: int, cfg) -> float:
    """Linear warm-up from 1% of peak, hold at peak, exponential decay to ``final_lr_scale * peak``."""
    if not 0 <= update <= total:
        raise ValueError(f"update {update} outside [0, {total}]")
    warm, hold, _ = cfg.tri_stage
    peak = cfg.peak_lr
    warm_end = warm * total
    hold_end = (warm + hold) * total
    if update < warm_end:
        return peak * (0.01 + 0.99 * update / warm_end)
    if update <= hold_end:
        return peak
    frac = (update - hold_end) / max(total - hold_end, 1e-12)
    return peak * math.exp(math.log(cfg.final_lr_scale) * frac)


def slot_provenance(update: int, lambda_ratio: int) -> str:
    """Update pattern [S, T x lambda] repeated; returns "speech" or "text"."""
    return "speech" if update % (1 + lambda_ratio) == 0 else "text"


def speech_update_count(updates: int, lambda_ratio: int) -> int:
    return math.ceil(updates / (1 + lambda_ratio))
