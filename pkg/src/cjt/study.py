"""Comparison study: the baselines and ablations the method is judged against.

One call trains every variant for a single seed and returns plain numbers,
so several seeds can be aggregated by median.
"""
from __future__ import annotations

import logging
import os
import time
from dataclasses import replace

import numpy as np

from . import pipeline as pl
from .analysis import confidence_histogram, layer_similarity_sweep
from .pairgen import pair_set_stats

log = logging.getLogger(__name__)

MASK_MULTIPLIER = 2.5
MAX_MASK_PROB = 0.9


def _wer(cfg, corpus, ckpt, splits=("test_clean", "test_other"), lm=None, beam=1, lm_weight=0.0):
    model = ckpt.build()
    reports = pl.evaluate(cfg, corpus, model, lm, beam, lm_weight, splits)
    return {s: reports[s].wer for s in splits}


def run_study(cfg: pl.ExperimentConfig, keep_dir=None) -> dict:
    """Train all variants for ``cfg.seed``; returns a flat dict of metrics.

    With ``keep_dir`` every trained checkpoint is saved there by name.
    """
    clock = time.time()
    out: dict = {"seed": cfg.seed}

    def note(msg):
        log.info("[seed %d, %4.0fs] %s", cfg.seed, time.time() - clock, msg)

    def keep(name, ck):
        if keep_dir is not None:
            os.makedirs(keep_dir, exist_ok=True)
            ck.save(os.path.join(keep_dir, f"{name}.ckpt"))
        return ck

    corpus = pl.build_corpus(cfg)
    refs = corpus.references("unpaired_speech")
    teacher = keep("teacher", pl.train_teacher(cfg, corpus).final)
    lm_ck = keep("lm", pl.train_language_model(cfg, corpus).final)
    note("teacher and LM trained")
    psel = pl.make_pseudo_labels(cfg, corpus, teacher, lm_ck)
    out["pl_wer"] = pair_set_stats(psel, refs).pseudo_label_wer
    syna = pl.make_synth_pairs(cfg, corpus)
    note(f"pseudo-label WER {out['pl_wer']:.4f}")

    r1 = cfg.train.updates_round1
    psel_only = pl.train_asr(cfg, {"speech": psel}, r1, "psel-only", round_tag="cjt-round1").final
    cjt = pl.cjt_round1(cfg, psel, syna).final
    syna_only = pl.train_asr(cfg, {"text": syna}, r1, "syna-only", round_tag="cjt-round1").final
    for tag, ck in (("teacher", teacher), ("psel_only", psel_only), ("cjt", cjt), ("syna_only", syna_only)):
        keep(tag, ck)
        out[tag] = _wer(cfg, corpus, ck)
    note(f"round one done: {out}")

    # round two variants all start from the same round-one model and confidences
    psel_conf = pl.attach_confidences(cfg, cjt, psel)
    mask_prob = float(min(MAX_MASK_PROB, MASK_MULTIPLIER * out["pl_wer"]))
    out["mask_prob"] = mask_prob
    base = pl.train_config(cfg, mask_prob=mask_prob)
    variants = {
        "cjt_continued": replace(base, mask_strategy="none", syngr_scope="none"),
        "thres": replace(base, mask_strategy="thres", syngr_scope="none"),
        "rand": replace(base, mask_strategy="rand", syngr_scope="none"),
        "thres_syngr": replace(base, mask_strategy="thres", syngr_scope="shallow"),
    }
    finals = {}
    for tag, tc in variants.items():
        finals[tag] = keep(tag, pl.cjt_round2(cfg, cjt, psel_conf, syna, tc).final)
        out[tag] = _wer(cfg, corpus, finals[tag])
        note(f"{tag}: {out[tag]}")

    lm = lm_ck.build()
    p = cfg.pipeline
    out["thres_syngr_fused"] = _wer(cfg, corpus, finals["thres_syngr"], lm=lm, beam=p.beam,
                                    lm_weight=p.lm_weight)
    note(f"fusion: {out['thres_syngr_fused']}")

    hist_psel = confidence_histogram(psel_only.build(), psel, refs, p.hist_bins)
    hist_cjt = confidence_histogram(cjt.build(), psel, refs, p.hist_bins)
    out["conf"] = {tag: {"correct": h.mean("correct"), "incorrect": h.mean("incorrect")}
                   for tag, h in (("psel_only", hist_psel), ("cjt", hist_cjt))}

    reference = pl.train_asr(cfg, {"speech": pl.gold_reference_pairs(corpus)},
                             p.reference_updates, "reference", round_tag="baseline").final.build()
    probe = [corpus.audio[r.id] for r in corpus.manifests["dev_clean"]]
    sweep = layer_similarity_sweep({"syna_only": syna_only.build(), "cjt": cjt.build()}, reference,
                                   probe, p.probe_frames)
    shallow = cfg.model.shallow_layer_count or 1
    out["pwcca"] = {tag: [r.similarity for r in res] for tag, res in sweep.items()}
    out["pwcca_shallow"] = {tag: float(np.mean(v[:shallow])) for tag, v in out["pwcca"].items()}
    note(f"analysis done: {out['conf']} {out['pwcca_shallow']}")
    out["seconds"] = time.time() - clock
    return out
