"""ASR encoder-decoder, external LM and checkpoint handling."""
from .checkpoint import Checkpoint, average_checkpoints
from .networks import (AsrModel, AsrModelConfig, FingerprintMismatch, LmConfig, TransformerLM,
                       asr_forward, lm_forward)

__all__ = ["AsrModel", "AsrModelConfig", "Checkpoint", "FingerprintMismatch", "LmConfig",
           "TransformerLM", "asr_forward", "average_checkpoints", "lm_forward"]
