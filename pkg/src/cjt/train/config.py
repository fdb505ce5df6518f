"""Training configuration and its hierarchical text-file form (YAML)."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Optional

import yaml

MASK_STRATEGIES = ("conf", "thres", "rand", "none")
SYNGR_SCOPES = ("shallow", "all", "none")


@dataclass
class TrainConfig:
    lambda_ratio: int = 3
    lambda_mode: str = "frequency"          # or "loss_weight": L = L_s + lambda * L_t
    peak_lr: float = 5e-4
    tri_stage: tuple = (0.1, 0.4, 0.5)
    final_lr_scale: float = 0.01
    adam_betas: tuple = (0.9, 0.98)
    adam_eps: float = 1e-9
    dropout: float = 0.15
    label_smoothing: float = 0.1
    updates_round1: int = 2000
    updates_round2: Optional[int] = None     # default: half of round 1
    mask_strategy: str = "none"
    mask_prob: float = 0.4
    conf_multiplier: Optional[float] = None  # default: solved so the expected rate equals mask_prob
    syngr_prob: float = 0.7
    syngr_scope: str = "none"
    gate_mode: str = "single"                # or "per_layer"
    spec_augment_real: bool = True
    spec_augment_synth: bool = False
    round2_init: str = "continue"            # or "scratch"
    batch_size: int = 16
    checkpoint_every: Optional[int] = None   # default: updates // 20
    average_last: int = 10
    seed: int = 0

    def __post_init__(self):
        self.tri_stage = tuple(float(x) for x in self.tri_stage)
        self.adam_betas = tuple(float(x) for x in self.adam_betas)
        if abs(sum(self.tri_stage) - 1.0) > 1e-9:
            raise ValueError("tri-stage fractions must sum to 1")
        if not 0.0 <= self.mask_prob < 1.0:
            raise ValueError("mask_prob must be in [0, 1)")
        if not 0.0 <= self.syngr_prob <= 1.0:
            raise ValueError("syngr_prob must be in [0, 1]")
        if self.mask_strategy not in MASK_STRATEGIES:
            raise ValueError(f"mask_strategy must be one of {MASK_STRATEGIES}")
        if self.syngr_scope not in SYNGR_SCOPES:
            raise ValueError(f"syngr_scope must be one of {SYNGR_SCOPES}")
        if self.lambda_mode not in ("frequency", "loss_weight"):
            raise ValueError("lambda_mode must be frequency or loss_weight")
        if self.gate_mode not in ("single", "per_layer"):
            raise ValueError("gate_mode must be single or per_layer")
        if self.round2_init not in ("continue", "scratch"):
            raise ValueError("round2_init must be continue or scratch")
        if self.lambda_ratio < 0:
            raise ValueError("lambda_ratio must be >= 0")
        if self.updates_round2 is None:
            self.updates_round2 = max(1, self.updates_round1 // 2)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tri_stage"] = list(self.tri_stage)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    @classmethod
    def parse(cls, text: str) -> "TrainConfig":
        return cls.from_dict(yaml.safe_load(text) or {})
