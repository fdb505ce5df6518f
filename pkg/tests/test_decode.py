import itertools
from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cjt import numerics as nx
from cjt.decode import (DEFAULT_BEAM, DEFAULT_LM_WEIGHT, align, beam_decode, beam_decode_batch,
                        beam_search, greedy_decode, greedy_decode_batch, score_corpus, wer)
from cjt.model import AsrModel, AsrModelConfig
from cjt.synthtask import BOS, EOS
from cjt.train import Adam


# ------------------------------------------------------------------ WER
def edit_distance(a, b):
    @lru_cache(maxsize=None)
    def go(i, j):
        if i == len(a):
            return len(b) - j
        if j == len(b):
            return len(a) - i
        return min(go(i + 1, j + 1) + (a[i] != b[j]), go(i + 1, j) + 1, go(i, j + 1) + 1)
    return go(0, 0)


def test_identical_sequences_have_zero_wer():
    assert wer([4, 5, 6], [4, 5, 6])[0] == 0.0


def test_single_substitution():
    rate, ali = wer(["a", "b", "c"], ["a", "x", "c"])
    assert rate == pytest.approx(1 / 3)
    assert [op for op, _, _ in ali.ops] == ["match", "sub", "match"]
    assert ali.hyp_correct == [True, False, True]


def test_empty_reference_rejected():
    with pytest.raises(ValueError):
        wer([], [1])


def test_tie_break_prefers_substitution_then_deletion():
    # the backtrace runs from the end, so the tie is resolved at the last position
    assert align(["a", "b"], ["c"]).to_string() == "DS"
    assert align(["a"], ["b", "c"]).to_string() == "IS"


def test_wer_matches_exhaustive_recursion_on_1000_pairs():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        ref = list(rng.integers(0, 4, size=rng.integers(1, 9)))
        hyp = list(rng.integers(0, 4, size=rng.integers(1, 9)))
        rate, ali = wer(ref, hyp)
        assert ali.errors == edit_distance(tuple(ref), tuple(hyp))
        assert rate == ali.errors / len(ref)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=1, max_size=8), st.lists(st.integers(0, 3), min_size=1, max_size=8))
def test_alignment_is_consistent(ref, hyp):
    ali = align(ref, hyp)
    c = ali.counts()
    assert c["match"] + c["sub"] + c["del"] == len(ref)
    assert c["match"] + c["sub"] + c["ins"] == len(hyp)
    assert len(ali.hyp_correct) == len(hyp) and sum(ali.hyp_correct) == c["match"]
    back = align(hyp, ref).counts()
    # the total is symmetric; the split between S and I/D depends on the tie-break
    assert back["sub"] + back["ins"] + back["del"] == c["sub"] + c["ins"] + c["del"]
    assert back["del"] - back["ins"] == c["ins"] - c["del"]
    assert wer(ref, ref)[0] == 0.0


def test_score_report_totals():
    rep = score_corpus(["u1", "u2"], [[4, 5], [6, 7, 8]], [[4, 5], [6, 8]], split="dev")
    assert rep.errors == 1 and rep.ref_tokens == 5 and rep.wer == pytest.approx(0.2)
    lines = rep.to_jsonl().splitlines()
    assert len(lines) == 3 and '"wer": "0.200000"' in lines[-1]


# ------------------------------------------------------------------ beam search on tables
def table_step(table):
    """Next-token log-probs looked up from the full history (a dict keyed by tuples)."""
    def step(owners, hist=None):
        hist = owners if hist is None else hist
        return np.stack([table[tuple(h)] for h in hist])
    return step


def random_table(rng, V, depth):
    table = {}
    for n in range(depth + 1):
        for prefix in itertools.product(range(V), repeat=n):
            logits = rng.normal(size=V) * 2
            table[(BOS,) + prefix] = logits - np.log(np.exp(logits).sum())
    return table


def exhaustive_best(table, V, max_len):
    best = -np.inf
    for n in range(max_len):
        for prefix in itertools.product([v for v in range(V) if v != EOS], repeat=n):
            hist, score = (BOS,), 0.0
            for tok in prefix + (EOS,):
                score += table[hist][tok]
                hist = hist + (tok,)
            best = max(best, score)
    return best


@pytest.mark.parametrize("seed", range(10))
def test_wide_beam_matches_exhaustive_search(seed):
    V = 4
    table = random_table(np.random.default_rng(seed), V, 2)
    hyps = beam_search(table_step(table), 1, beam=100, max_len=[2])
    assert hyps[0][0].finished
    assert hyps[0][0].score == pytest.approx(exhaustive_best(table, V, 2), abs=1e-12)


def best_finished(table, k, max_len=3):
    # an unfinished fallback is not a complete hypothesis, so it counts as -inf
    h = beam_search(table_step(table), 1, beam=k, max_len=[max_len])[0][0]
    return h.score if h.finished else -np.inf


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 8))
def test_exhaustive_width_dominates_every_narrower_beam(seed, k):
    table = random_table(np.random.default_rng(seed), 4, 3)
    assert best_finished(table, 64) >= best_finished(table, k)
    assert best_finished(table, 64) == pytest.approx(exhaustive_best(table, 4, 3), abs=1e-12)


def test_beam_width_monotonicity_holds_almost_always():
    bad = 0
    for seed in range(300):
        table = random_table(np.random.default_rng(seed), 4, 3)
        scores = [best_finished(table, k) for k in range(1, 6)]
        bad += any(b < a - 1e-12 for a, b in zip(scores, scores[1:]))
    assert bad <= 3


def test_beam_width_monotonicity_known_counterexample():
    # a wider beam can push the greedy path out before it reaches EOS
    table = random_table(np.random.default_rng(931), 4, 3)
    assert best_finished(table, 2) < best_finished(table, 1) < best_finished(table, 3)


def test_fused_score_never_increases_along_a_prefix():
    table = random_table(np.random.default_rng(3), 4, 3)
    lm = random_table(np.random.default_rng(4), 4, 3)
    hyps = beam_search(table_step(table), 1, 5, [3], table_step(lm), 0.7)
    for h in hyps[0]:
        partial = [0.0]
        hist = (BOS,)
        for tok in h.tokens[1:]:
            partial.append(partial[-1] + table[hist][tok] + 0.7 * lm[hist][tok])
            hist = hist + (tok,)
        assert all(b <= a for a, b in zip(partial, partial[1:]))
        assert partial[-1] == pytest.approx(h.score)


def test_zero_lm_weight_ignores_lm():
    table = random_table(np.random.default_rng(5), 4, 3)
    lm = random_table(np.random.default_rng(6), 4, 3)
    a = beam_search(table_step(table), 1, 3, [3])
    b = beam_search(table_step(table), 1, 3, [3], table_step(lm), 0.0)
    assert [h.tokens for h in a[0]] == [h.tokens for h in b[0]]


def test_bad_beam_arguments():
    with pytest.raises(ValueError):
        beam_search(lambda o, h: None, 1, 0, [1])
    with pytest.raises(ValueError):
        beam_search(lambda o, h: None, 1, 1, [1], lm_weight=-1.0)


def test_defaults():
    assert DEFAULT_BEAM == 20 and DEFAULT_LM_WEIGHT == 0.4


# ------------------------------------------------------------------ models
class OneHotModel:
    """Emits a fixed token sequence with probability one, ignoring the audio."""

    def __init__(self, tokens, V=8):
        self.seq = list(tokens) + [EOS]
        self.V = V
        self.dtype = np.float64
        self.config = AsrModelConfig(mel_dim=4, vocab_size=V, enc_layers=2, attn_dim=8, heads=2)

    def encode(self, audio, mask):
        return nx.Tensor(audio), mask[:, ::2], []

    def next_log_probs(self, enc, emask, hist):
        out = np.full((hist.shape[0], self.V), -np.inf)
        pos = min(hist.shape[1] - 1, len(self.seq) - 1)
        out[:, self.seq[pos]] = 0.0
        return out


def test_greedy_emits_one_hot_sequence():
    m = OneHotModel([4, 6, 5])
    assert greedy_decode(m, np.zeros((6, 4))) == [4, 6, 5]
    assert beam_decode(m, np.zeros((6, 4)), beam=3, lm=None) == [4, 6, 5]


def test_greedy_respects_length_budget():
    m = OneHotModel([4] * 20)
    assert greedy_decode(m, np.zeros((4, 4))) == [4] * 6


@pytest.fixture(scope="module")
def random_model():
    cfg = AsrModelConfig(mel_dim=6, vocab_size=10, enc_layers=2, dec_layers=1, attn_dim=16, heads=2,
                         ffn_dim=16, conv_channels=4, shallow_layer_count=1, dropout=0.0)
    with nx.precision(np.float64):
        return AsrModel(cfg, seed=11)


def test_beam_one_equals_greedy_on_100_inputs(random_model):
    rng = np.random.default_rng(1)
    audios = [rng.normal(size=(int(rng.integers(2, 12)), 6)) for _ in range(100)]
    assert greedy_decode_batch(random_model, audios) == beam_decode_batch(random_model, audios, 1, None, 0.0)


def test_batched_greedy_matches_single(random_model):
    rng = np.random.default_rng(2)
    audios = [rng.normal(size=(int(rng.integers(2, 12)), 6)) for _ in range(8)]
    assert greedy_decode_batch(random_model, audios) == [greedy_decode(random_model, a) for a in audios]


def test_overfit_model_reproduces_its_transcript():
    cfg = AsrModelConfig(mel_dim=6, vocab_size=10, enc_layers=2, dec_layers=1, attn_dim=16, heads=2,
                         ffn_dim=16, conv_channels=4, shallow_layer_count=1, dropout=0.0)
    model = AsrModel(cfg, seed=0)
    audio = np.random.default_rng(0).normal(size=(1, 12, 6)).astype(np.float32)
    gold = [4, 7, 5, 9]
    hist, tgt = np.array([[BOS] + gold]), np.array([gold + [EOS]])
    opt = Adam(model.params)
    for _ in range(80):
        model.zero_grad()
        logits, _ = model.forward(audio, None, hist)
        nx.smoothed_cross_entropy(logits, tgt).backward()
        opt.step(3e-3)
    assert greedy_decode(model, audio[0]) == gold


def test_impossible_tokens_never_enter_a_wide_beam():
    lp = np.full(5, -np.inf)
    lp[[EOS, 3]] = np.log([0.5, 0.5])
    hyps = beam_search(lambda o, h: np.tile(lp, (len(h), 1)), 1, beam=50, max_len=[3])[0]
    assert all(set(h.tokens[1:]) <= {EOS, 3} for h in hyps)
    assert hyps and all(h.finished for h in hyps)
