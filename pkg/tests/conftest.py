import numpy as np
import pytest

from cjt.model import AsrModelConfig
from cjt.pairgen import AudioBank, PairRecord, PairSet, gold_pairs
from cjt.synthtask import CorpusSizes, generate_corpus, make_profiles

TINY_MODEL = AsrModelConfig(mel_dim=16, vocab_size=44, enc_layers=3, dec_layers=1, attn_dim=16,
                            heads=2, ffn_dim=32, conv_channels=4, shallow_layer_count=1, dropout=0.0)


@pytest.fixture(scope="session")
def tiny_corpus():
    return generate_corpus(5, CorpusSizes(paired_n=30, unpaired_speech_n=40, unpaired_text_n=120, eval_n=8))


@pytest.fixture(scope="session")
def tiny_bank(tiny_corpus):
    _, tts = make_profiles(tiny_corpus.task, tiny_corpus.vocab)
    return AudioBank(tiny_corpus.audio, tts)


@pytest.fixture(scope="session")
def tiny_gold(tiny_corpus, tiny_bank):
    return gold_pairs(tiny_corpus.manifests["paired"], tiny_corpus.vocab, tiny_bank)


@pytest.fixture(scope="session")
def confident_pairs(tiny_corpus, tiny_bank):
    """The unpaired speech labelled with its sealed text and random confidences."""
    rng = np.random.default_rng(0)
    recs = []
    for r in tiny_corpus.manifests["unpaired_speech"]:
        target = tuple(tiny_corpus.vocab.encode(r.sealed))
        recs.append(PairRecord(r.id, r.audio, target, "speech-PseL",
                               tuple(float(x) for x in rng.random(len(target)))))
    return PairSet(recs, tiny_bank)


_VERDICTS: list = []


def record_verdict(line: str):
    _VERDICTS.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
