"""scikit-learn style wrappers around the recognizer and the language model.

They cover the single-stage cases (supervised fit, decode, score). The
multi-stage joint training lives in the pipeline and CLI, where several
pair sets and rounds are involved.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import numerics as nx
from .decode import decode_corpus, score_corpus
from .model import AsrModel, AsrModelConfig, LmConfig, TransformerLM
from .pairgen import AudioBank, PairRecord, PairSet
from .synthtask import BOS, EOS
from .train import TrainConfig, run_round, train_lm
from .validation import check_audio_list, check_token_sequences


class SpeechRecognizer(BaseEstimator):
    """Encoder-decoder recognizer trained supervised on (audio, tokens) pairs.

    ``predict`` returns token lists; ``score`` is ``1 - WER``.
    """

    def __init__(self, vocab_size=44, enc_layers=4, dec_layers=2, attn_dim=64, heads=4, ffn_dim=128,
                 dropout=0.15, updates=1000, peak_lr=1e-3, batch_size=16, spec_augment=True,
                 beam=1, lm=None, lm_weight=0.0, seed=0):
        self.vocab_size = vocab_size
        self.enc_layers = enc_layers
        self.dec_layers = dec_layers
        self.attn_dim = attn_dim
        self.heads = heads
        self.ffn_dim = ffn_dim
        self.dropout = dropout
        self.updates = updates
        self.peak_lr = peak_lr
        self.batch_size = batch_size
        self.spec_augment = spec_augment
        self.beam = beam
        self.lm = lm
        self.lm_weight = lm_weight
        self.seed = seed

    def fit(self, X, y):
        X = check_audio_list(X)
        y = check_token_sequences(y, self.vocab_size, n=len(X))
        cfg = AsrModelConfig(mel_dim=X[0].shape[1], vocab_size=self.vocab_size, enc_layers=self.enc_layers,
                             dec_layers=self.dec_layers, attn_dim=self.attn_dim, heads=self.heads,
                             ffn_dim=self.ffn_dim, dropout=self.dropout)
        audio = {f"u{i}": a.astype(np.float32) for i, a in enumerate(X)}
        pairs = PairSet([PairRecord(k, k, t, "gold") for k, t in zip(audio, y)], AudioBank(audio))
        tc = TrainConfig(peak_lr=self.peak_lr, batch_size=self.batch_size, dropout=self.dropout,
                         spec_augment_real=self.spec_augment, seed=self.seed)
        model = AsrModel(cfg, seed=self.seed)
        res = run_round(model, {"speech": pairs}, tc, 1, "baseline", updates=self.updates)
        self.model_ = res.final.build()
        self.checkpoint_ = res.final
        self.n_features_in_ = cfg.mel_dim
        self.training_log_ = res.log
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = check_audio_list(X, self.n_features_in_)
        lm = self.lm.model_ if isinstance(self.lm, TokenLanguageModel) else self.lm
        use_lm = lm is not None and self.lm_weight > 0
        return decode_corpus(self.model_, [a.astype(np.float32) for a in X], beam=self.beam,
                             lm=lm if use_lm else None, lm_weight=self.lm_weight if use_lm else 0.0)

    def score(self, X, y):
        hyps = self.predict(X)
        y = check_token_sequences(y, self.vocab_size, n=len(hyps))
        return 1.0 - score_corpus([str(i) for i in range(len(y))], y, hyps).wer


class TokenLanguageModel(BaseEstimator):
    """Causal transformer LM over token sequences (BOS is prepended, EOS appended)."""

    def __init__(self, vocab_size=44, layers=2, attn_dim=64, heads=4, ffn_dim=128, dropout=0.15,
                 updates=1000, peak_lr=1e-3, batch_size=16, seed=0):
        self.vocab_size = vocab_size
        self.layers = layers
        self.attn_dim = attn_dim
        self.heads = heads
        self.ffn_dim = ffn_dim
        self.dropout = dropout
        self.updates = updates
        self.peak_lr = peak_lr
        self.batch_size = batch_size
        self.seed = seed

    def fit(self, X, y=None):
        X = check_token_sequences(X, self.vocab_size)
        cfg = LmConfig(vocab_size=self.vocab_size, layers=self.layers, attn_dim=self.attn_dim,
                       heads=self.heads, ffn_dim=self.ffn_dim, dropout=self.dropout)
        tc = TrainConfig(peak_lr=self.peak_lr, batch_size=self.batch_size, dropout=self.dropout,
                         seed=self.seed)
        res = train_lm(TransformerLM(cfg, seed=self.seed), X, tc, self.updates)
        self.model_ = res.final.build()
        self.checkpoint_ = res.final
        return self

    def predict_log_proba(self, X):
        """Next-token log-probabilities after each history (BOS is prepended)."""
        check_is_fitted(self, "model_")
        X = check_token_sequences(X, self.vocab_size, allow_empty=True)
        return np.stack([self.model_.next_log_probs(np.array([(BOS,) + h]))[0] for h in X])

    def score(self, X, y=None):
        """Mean per-token log-likelihood, EOS included."""
        check_is_fitted(self, "model_")
        X = check_token_sequences(X, self.vocab_size)
        total, count = 0.0, 0
        for seq in X:
            with nx.no_grad():
                logp = nx.log_softmax(self.model_.logits(np.array([(BOS,) + seq]))).data[0]
            targets = list(seq) + [EOS]
            total += float(logp[np.arange(len(targets)), targets].sum())
            count += len(targets)
        return total / count
