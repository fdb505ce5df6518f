import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from cjt.estimators import SpeechRecognizer, TokenLanguageModel
from cjt.validation import check_audio_list, check_token_sequences

SMALL = dict(enc_layers=2, dec_layers=1, attn_dim=16, heads=2, ffn_dim=16, dropout=0.0)


def _data(tiny_corpus, split="paired", n=12):
    man = list(tiny_corpus.manifests[split])[:n]
    return [tiny_corpus.audio[r.id] for r in man], [tiny_corpus.vocab.encode(r.transcript) for r in man]


def test_params_round_trip_through_clone():
    est = SpeechRecognizer(updates=5, beam=3, **SMALL)
    twin = clone(est)
    assert twin.get_params() == est.get_params()
    assert twin.set_params(beam=1).beam == 1


def test_fit_predict_score(tiny_corpus):
    X, y = _data(tiny_corpus)
    est = SpeechRecognizer(updates=120, peak_lr=3e-3, spec_augment=False, **SMALL).fit(X, y)
    hyps = est.predict(X)
    assert len(hyps) == len(X) and all(isinstance(h, list) for h in hyps)
    assert est.score(X, y) > 0.0
    assert est.n_features_in_ == 16


def test_predict_before_fit():
    with pytest.raises(NotFittedError):
        SpeechRecognizer().predict([np.zeros((4, 16))])


def test_language_model_estimator():
    seqs = [[4, 5] * 3] * 16
    lm = TokenLanguageModel(vocab_size=8, layers=1, attn_dim=16, heads=2, ffn_dim=16, dropout=0.0,
                            updates=120, peak_lr=3e-3, batch_size=8).fit(seqs)
    lp = lm.predict_log_proba([[4], []])
    assert lp.shape == (2, 8)
    np.testing.assert_allclose(np.exp(lp).sum(axis=1), 1.0, atol=1e-5)
    assert np.exp(lp[0, 5]) > 0.9
    assert lm.score(seqs) > np.log(0.5)


def test_audio_validation():
    with pytest.raises(ValueError):
        check_audio_list([])
    with pytest.raises(ValueError):
        check_audio_list([np.zeros((0, 4))])
    with pytest.raises(ValueError):
        check_audio_list([np.zeros((3, 4)), np.zeros((3, 5))])
    with pytest.raises(ValueError):
        check_audio_list([np.full((3, 4), np.nan)])
    with pytest.raises(ValueError):
        check_audio_list([np.zeros((3, 4))], mel_dim=16)
    assert len(check_audio_list(np.zeros((2, 3, 4)))) == 2


def test_token_validation():
    assert check_token_sequences([[1, 2]], 4) == [(1, 2)]
    with pytest.raises(ValueError):
        check_token_sequences([[1, 9]], 4)
    with pytest.raises(ValueError):
        check_token_sequences([[]], 4)
    with pytest.raises(ValueError):
        check_token_sequences([[1]], 4, n=2)
