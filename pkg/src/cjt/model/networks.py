"""Convolutional transformer ASR encoder-decoder and a transformer LM."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .. import numerics as nx
from ..numerics import Tensor
from ..synthtask import BOS, PAD
from .layers import (ParamInit, attention, causal_mask, dense, feed_forward, key_mask,
                     layer_norm, sinusoid_positions)


class FingerprintMismatch(ValueError):
    """Parameters do not belong to the given configuration."""


def _fingerprint(kind: str, cfg: dict, shapes: dict) -> str:
    blob = json.dumps({"kind": kind, "config": cfg,
                       "shapes": {k: list(v) for k, v in sorted(shapes.items())}},
                      sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class AsrModelConfig:
    mel_dim: int = 16
    vocab_size: int = 44
    enc_conv_blocks: int = 1
    enc_layers: int = 4
    dec_conv_blocks: int = 1
    dec_layers: int = 2
    attn_dim: int = 64
    heads: int = 4
    ffn_dim: int = 128
    dropout: float = 0.15
    conv_channels: int = 16
    shallow_layer_count: Optional[int] = None

    def __post_init__(self):
        if self.attn_dim % self.heads:
            raise ValueError("attn_dim must be divisible by heads")
        if self.shallow_layer_count is None:
            object.__setattr__(self, "shallow_layer_count", math.ceil(self.enc_layers / 3))
        if not 0 < self.shallow_layer_count < self.enc_layers:
            raise ValueError("shallow_layer_count must lie in [1, enc_layers)")

    @property
    def subsampled_mel(self) -> int:
        f = self.mel_dim
        for _ in range(self.enc_conv_blocks):
            f = (f + 1) // 2
        return f

    def subsampled_frames(self, frames: int) -> int:
        for _ in range(self.enc_conv_blocks):
            frames = (frames + 1) // 2
        return frames

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LmConfig:
    vocab_size: int = 44
    layers: int = 2
    attn_dim: int = 64
    heads: int = 4
    ffn_dim: int = 128
    dropout: float = 0.15
    zero_init_output: bool = False

    def __post_init__(self):
        if self.attn_dim % self.heads:
            raise ValueError("attn_dim must be divisible by heads")

    def to_dict(self) -> dict:
        return asdict(self)


class _Net:
    kind = "net"

    def __init__(self, config, params: Optional[dict] = None, seed: int = 0, dtype=None):
        self.config = config
        if params is None:
            params = self._init_arrays(np.random.default_rng(seed))
        dtype = dtype or nx.default_dtype()
        self.params = {k: Tensor(np.array(v, dtype=dtype), requires_grad=True, name=k)
                       for k, v in params.items()}
        expect = self.expected_shapes()
        got = {k: v.shape for k, v in self.params.items()}
        if expect != got:
            missing = sorted(set(expect) ^ set(got)) or [k for k in expect if expect[k] != got[k]]
            raise FingerprintMismatch(f"parameters do not match config: {missing[:5]}")

    def _init_arrays(self, rng) -> dict:
        raise NotImplementedError

    def expected_shapes(self) -> dict:
        init = self._init_arrays(np.random.default_rng(0))
        return {k: v.shape for k, v in init.items()}

    @property
    def fingerprint(self) -> str:
        return _fingerprint(self.kind, self.config.to_dict(),
                            {k: v.shape for k, v in self.params.items()})

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def arrays(self) -> dict:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_arrays(self, arrays: dict):
        for k, t in self.params.items():
            t.data = np.array(arrays[k], dtype=t.dtype)

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def n_params(self) -> int:
        return sum(t.size for t in self.params.values())


class AsrModel(_Net):
    """Conv front-end + transformer encoder, conv-embedded transformer decoder.

    Encoder and decoder self-attention use clipped relative positions; the
    model has no absolute position encoding.
    """
    kind = "asr"

    def _init_arrays(self, rng) -> dict:
        c = self.config
        init = ParamInit(rng)
        cin = 1
        for i in range(c.enc_conv_blocks):
            init.uniform(f"enc.conv{i}.w", (3, 3, cin, c.conv_channels), 9 * cin)
            init.const(f"enc.conv{i}.b", (c.conv_channels,), 0.0)
            cin = c.conv_channels
        init.linear("enc.in_proj", c.conv_channels * c.subsampled_mel, c.attn_dim)
        for i in range(c.enc_layers):
            pre = f"enc.layer{i}"
            init.norm(f"{pre}.ln1", c.attn_dim)
            init.attention(f"{pre}.attn", c.attn_dim, c.heads, relative=True)
            init.norm(f"{pre}.ln2", c.attn_dim)
            init.ffn(f"{pre}.ffn", c.attn_dim, c.ffn_dim)
        init.norm("enc.ln_out", c.attn_dim)
        init.uniform("dec.embed", (c.vocab_size, c.attn_dim), 1)
        for i in range(c.dec_conv_blocks):
            init.uniform(f"dec.conv{i}.w", (3, c.attn_dim, c.attn_dim), 3 * c.attn_dim)
            init.const(f"dec.conv{i}.b", (c.attn_dim,), 0.0)
        for i in range(c.dec_layers):
            pre = f"dec.layer{i}"
            init.norm(f"{pre}.ln1", c.attn_dim)
            init.attention(f"{pre}.self", c.attn_dim, c.heads, relative=True)
            init.norm(f"{pre}.ln2", c.attn_dim)
            init.attention(f"{pre}.cross", c.attn_dim, c.heads, relative=False)
            init.norm(f"{pre}.ln3", c.attn_dim)
            init.ffn(f"{pre}.ffn", c.attn_dim, c.ffn_dim)
        init.norm("dec.ln_out", c.attn_dim)
        init.linear("dec.out", c.attn_dim, c.vocab_size)
        return init.arrays

    def shallow_param_names(self, upto: Optional[int] = None) -> list:
        """Conv front-end, input projection and the first ``upto`` encoder layers."""
        upto = self.config.shallow_layer_count if upto is None else upto
        prefixes = ("enc.conv", "enc.in_proj") + tuple(f"enc.layer{i}." for i in range(upto))
        return [k for k in self.params if k.startswith(prefixes)]

    def encoder_param_names(self) -> list:
        return [k for k in self.params if k.startswith("enc.")]

    # ------------------------------------------------------------------ encoder
    def encode(self, audio: np.ndarray, frame_mask: Optional[np.ndarray] = None, train: bool = False,
               rng=None, gates: Optional[dict] = None, taps: bool = False):
        """Encode ``audio (B, T, mel)``.

        ``gates`` maps "after encoder layer k" (1-based count, or "out" for
        after the final norm) to an open flag; a closed gate stops gradient
        flow into everything below it.
        Returns ``(enc (B, T', d), enc_mask (B, T'), taps list)``.
        """
        c = self.config
        p = self.params
        audio = np.asarray(audio, dtype=self.dtype)
        if audio.ndim != 3 or audio.shape[2] != c.mel_dim or audio.shape[1] == 0:
            raise nx.ShapeError("asr.encode", audio.shape, detail=f"expected (B, T>0, {c.mel_dim})")
        B, T, _ = audio.shape
        mask = np.ones((B, T), dtype=bool) if frame_mask is None else np.asarray(frame_mask, bool)
        drop = rng["dropout"] if (train and rng is not None) else None
        x = Tensor(audio[..., None])
        for i in range(c.enc_conv_blocks):
            x = nx.conv2d(x, p[f"enc.conv{i}.w"], p[f"enc.conv{i}.b"], stride=(2, 2), padding=(1, 1))
            x = nx.relu(x)
            mask = mask[:, ::2]
            x = nx.mask_const(x, mask[:, :, None, None].astype(self.dtype))
        _, t2, f2, ch = x.shape
        x = x.reshape(B, t2, f2 * ch)
        x = dense(p, "enc.in_proj", x)
        x = nx.dropout(x, c.dropout, drop, train)
        amask = key_mask(mask, self.dtype)
        gates = gates or {}
        tapped = []
        for i in range(c.enc_layers):
            pre = f"enc.layer{i}"
            h = layer_norm(p, f"{pre}.ln1", x)
            h = attention(p, f"{pre}.attn", h, h, c.heads, amask, relative=True)
            x = x + nx.dropout(h, c.dropout, drop, train)
            h = layer_norm(p, f"{pre}.ln2", x)
            h = feed_forward(p, f"{pre}.ffn", h, c.dropout, drop, train)
            x = x + nx.dropout(h, c.dropout, drop, train)
            if taps:
                tapped.append(x.data)
            if (i + 1) in gates:
                x = nx.grad_gate(x, bool(gates[i + 1]))
        x = layer_norm(p, "enc.ln_out", x)
        if "out" in gates:
            x = nx.grad_gate(x, bool(gates["out"]))
        return x, mask, tapped

    # ------------------------------------------------------------------ decoder
    def decode(self, enc: Tensor, enc_mask: np.ndarray, history: np.ndarray, train: bool = False,
               rng=None) -> Tensor:
        """Logits ``(B, U, V)`` for every history position (teacher forcing)."""
        c = self.config
        p = self.params
        history = np.asarray(history, dtype=np.int64)
        if history.ndim != 2 or history.shape[1] == 0:
            raise nx.ShapeError("asr.decode", history.shape, detail="history must be (B, U>=1)")
        B, U = history.shape
        drop = rng["dropout"] if (train and rng is not None) else None
        y = nx.embedding(p["dec.embed"], history)
        y = nx.mask_const(y, (history != PAD)[..., None].astype(self.dtype))
        for i in range(c.dec_conv_blocks):
            y = nx.relu(nx.conv1d(y, p[f"dec.conv{i}.w"], p[f"dec.conv{i}.b"], padding=(2, 0)))
        y = nx.dropout(y, c.dropout, drop, train)
        self_mask = causal_mask(U, self.dtype)
        cross_mask = key_mask(enc_mask, self.dtype)
        for i in range(c.dec_layers):
            pre = f"dec.layer{i}"
            h = layer_norm(p, f"{pre}.ln1", y)
            h = attention(p, f"{pre}.self", h, h, c.heads, self_mask, relative=True)
            y = y + nx.dropout(h, c.dropout, drop, train)
            h = layer_norm(p, f"{pre}.ln2", y)
            h = attention(p, f"{pre}.cross", h, enc, c.heads, cross_mask, relative=False)
            y = y + nx.dropout(h, c.dropout, drop, train)
            h = layer_norm(p, f"{pre}.ln3", y)
            h = feed_forward(p, f"{pre}.ffn", h, c.dropout, drop, train)
            y = y + nx.dropout(h, c.dropout, drop, train)
        y = layer_norm(p, "dec.ln_out", y)
        return dense(p, "dec.out", y)

    def forward(self, audio, frame_mask, history, train=False, rng=None, gates=None, taps=False):
        enc, emask, tapped = self.encode(audio, frame_mask, train, rng, gates, taps)
        logits = self.decode(enc, emask, history, train, rng)
        return logits, tapped

    def next_log_probs(self, enc: Tensor, enc_mask: np.ndarray, history: np.ndarray) -> np.ndarray:
        """Log-probabilities of the next token after each row of ``history``."""
        with nx.no_grad():
            logits = self.decode(enc, enc_mask, history)
            return nx.log_softmax(logits[:, -1, :]).data


class TransformerLM(_Net):
    """Causal transformer LM; sinusoidal absolute positions are added to the embeddings.

    Absolute positions let the LM learn where sentences end, which relative
    attention alone only recovers slowly.
    """
    kind = "lm"

    def _init_arrays(self, rng) -> dict:
        c = self.config
        init = ParamInit(rng)
        init.uniform("lm.embed", (c.vocab_size, c.attn_dim), 1)
        for i in range(c.layers):
            pre = f"lm.layer{i}"
            init.norm(f"{pre}.ln1", c.attn_dim)
            init.attention(f"{pre}.self", c.attn_dim, c.heads, relative=False)
            init.norm(f"{pre}.ln2", c.attn_dim)
            init.ffn(f"{pre}.ffn", c.attn_dim, c.ffn_dim)
        init.norm("lm.ln_out", c.attn_dim)
        init.linear("lm.out", c.attn_dim, c.vocab_size)
        if c.zero_init_output:
            init.const("lm.out.w", (c.attn_dim, c.vocab_size), 0.0)
        return init.arrays

    def logits(self, history: np.ndarray, train: bool = False, rng=None) -> Tensor:
        c = self.config
        p = self.params
        history = np.asarray(history, dtype=np.int64)
        if history.ndim != 2 or history.shape[1] == 0:
            raise nx.ShapeError("lm.forward", history.shape, detail="history must be (B, U>=1)")
        U = history.shape[1]
        drop = rng["dropout"] if (train and rng is not None) else None
        y = nx.embedding(p["lm.embed"], history)
        y = y + nx.Tensor(sinusoid_positions(U, c.attn_dim).astype(self.dtype))
        y = nx.dropout(y, c.dropout, drop, train)
        mask = causal_mask(U, self.dtype)
        for i in range(c.layers):
            pre = f"lm.layer{i}"
            h = layer_norm(p, f"{pre}.ln1", y)
            h = attention(p, f"{pre}.self", h, h, c.heads, mask, relative=False)
            y = y + nx.dropout(h, c.dropout, drop, train)
            h = layer_norm(p, f"{pre}.ln2", y)
            h = feed_forward(p, f"{pre}.ffn", h, c.dropout, drop, train)
            y = y + nx.dropout(h, c.dropout, drop, train)
        y = layer_norm(p, "lm.ln_out", y)
        return dense(p, "lm.out", y)

    def next_log_probs(self, history: np.ndarray) -> np.ndarray:
        with nx.no_grad():
            return nx.log_softmax(self.logits(history)[:, -1, :]).data


def asr_forward(model: AsrModel, audio: np.ndarray, target_history: Sequence[int], mode: str = "eval",
                gate_open: bool = True, taps: bool = False, rng=None):
    """Single-utterance forward: ``audio (T, mel)`` and a BOS-initial history.

    Returns ``(logits (U, V), taps)``; the gate sits after the last shallow layer.
    """
    hist = np.asarray(target_history, dtype=np.int64)
    if hist.size == 0 or hist[0] != BOS:
        raise ValueError("target history must start with BOS")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be train or eval, got {mode!r}")
    gates = {model.config.shallow_layer_count: gate_open}
    logits, tapped = model.forward(np.asarray(audio)[None], None, hist[None], mode == "train", rng,
                                   gates, taps)
    return logits[0], [t[0] for t in tapped]


def lm_forward(lm: TransformerLM, history: Sequence[int]) -> np.ndarray:
    """Next-token log-probabilities after ``history``."""
    hist = np.asarray(history, dtype=np.int64)
    return lm.next_log_probs(hist[None])[0]
