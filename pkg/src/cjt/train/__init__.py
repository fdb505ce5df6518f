"""Supervised, basic CJT and CJT++ training."""
from .config import TrainConfig
from .loop import (Batch, BatchStream, RoundResult, StepResult, batch_records, cjt_step, run_round,
                   train_lm)
from .masking import MaskPlan, MaskPlanner, MissingConfidences, make_mask_plan, realized_mask_rate
from .optim import Adam
from .schedule import lr_at, slot_provenance, speech_update_count

__all__ = ["Adam", "Batch", "BatchStream", "MaskPlan", "MaskPlanner", "MissingConfidences",
           "RoundResult", "StepResult", "TrainConfig", "batch_records", "cjt_step", "lr_at",
           "make_mask_plan", "realized_mask_rate", "run_round", "slot_provenance",
           "speech_update_count", "train_lm"]
