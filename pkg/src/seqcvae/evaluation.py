"""Evaluation report over sampled caption sets.

The report mirrors the usual captioning tables: oracle best-1 accuracy
(``B1..B4, C``; ROUGE/METEOR/SPICE are not implemented and reported as null)
and diversity statistics computed on the consensus-ranked top captions.
"""
from __future__ import annotations

import json
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .corpus import Dataset, VocabIndex, training_sentence_index
from .metrics import NgramStats, distinct_fraction, div_n, mbleu4, novel_count, oracle_best1, unique_ngrams_by_position
from .model import SeqCVAEModel, make_batch
from .rngs import substream
from .sampler import DEFAULT_NEIGHBORS, SampleSet, consensus_rerank, nearest_neighbors

REPORT_FIELDS = ("B1", "B2", "B3", "B4", "C", "R", "M", "S", "distinct_pct", "novel", "mbleu4", "div1", "div2")


def rank_by_consensus(
    samples: Mapping[str, Sequence[str]],
    conditions: Mapping[str, np.ndarray],
    train: Dataset,
    neighbors: int = DEFAULT_NEIGHBORS,
) -> Dict[str, List[int]]:
    """Consensus ranking of each caption set against its neighbours' training references."""
    stats = NgramStats.from_references(train.captions.values())
    ids = train.cond_ids
    mat = np.stack([train.features[i] for i in ids])
    out = {}
    for cid, caps in samples.items():
        nn = nearest_neighbors(conditions[cid], mat, neighbors)
        refs = [c for i in nn for c in train.captions[ids[i]]]
        out[cid] = consensus_rerank(list(caps), refs, stats)[0]
    return out


def evaluate_captions(
    samples: Mapping[str, Sequence[str]],
    train: Dataset,
    test: Dataset,
    rankings: Optional[Mapping[str, Sequence[int]]] = None,
    top: int = 5,
) -> Dict[str, Optional[float]]:
    """Report over caption sets keyed by test condition id.

    Oracle accuracy uses all samples of a set; ``novel``, ``mbleu4`` and
    ``div1``/``div2`` use the ``top`` captions under ``rankings`` (sample
    order when absent); ``distinct_pct`` uses all samples.
    """
    if not samples:
        raise ValueError("no sample sets to evaluate")
    missing = [c for c in samples if c not in test.captions]
    if missing:
        raise ValueError(f"sample sets for unknown conditions: {missing[:3]}")
    test_stats = NgramStats.from_references(test.captions.values())
    acc = {k: [] for k in ("B1", "B2", "B3", "B4", "C")}
    top_sets = []
    for cid, caps in samples.items():
        caps = list(caps)
        _, _, sc = oracle_best1(caps, test.captions[cid], "C", test_stats)
        for k in acc:
            acc[k].append(sc[k])
        order = list(rankings[cid]) if rankings is not None else list(range(len(caps)))
        top_sets.append([caps[i] for i in order[:top]])
    report: Dict[str, Optional[float]] = {k: float(np.mean(v)) for k, v in acc.items()}
    report.update({"R": None, "M": None, "S": None})
    report["distinct_pct"] = 100.0 * float(np.mean([distinct_fraction(list(c)) for c in samples.values()]))
    report["novel"] = int(novel_count(top_sets, training_sentence_index(train)))
    report["mbleu4"] = float(np.mean([mbleu4(t) for t in top_sets])) if min(len(t) for t in top_sets) >= 2 else None
    report["div1"] = float(np.mean([div_n(t, 1) for t in top_sets]))
    report["div2"] = float(np.mean([div_n(t, 2) for t in top_sets]))
    return report


def evaluate_sample_sets(sets: Sequence[SampleSet], vocab: VocabIndex, train: Dataset, test: Dataset, top: int = 5, rerank: bool = True, neighbors: int = DEFAULT_NEIGHBORS):
    """:func:`evaluate_captions` on sampler output; stores consensus rankings on ``sets``."""
    samples = {ss.cond_id: ss.texts(vocab) for ss in sets}
    rankings = None
    if rerank:
        rankings = rank_by_consensus(samples, test.features, train, neighbors)
        for ss in sets:
            ss.ranking = list(rankings[ss.cond_id])
    return evaluate_captions(samples, train, test, rankings, top)


def set_diversity(sets: Sequence[SampleSet], vocab: VocabIndex) -> Dict[str, float]:
    """Distinct fraction and Div-n over the full K samples of each set, averaged over sets."""
    texts = [ss.texts(vocab) for ss in sets]
    return {
        "distinct": float(np.mean([distinct_fraction(t) for t in texts])),
        "div1": float(np.mean([div_n(t, 1) for t in texts])),
        "div2": float(np.mean([div_n(t, 2) for t in texts])),
    }


def ngram_histograms(samples: Mapping[str, Sequence[str]], ns=(2, 4)) -> Dict[int, Dict[int, int]]:
    return {n: unique_ngrams_by_position(list(samples.values()), n) for n in ns}


def write_histograms_csv(hists: Dict[int, Dict[int, int]], path) -> None:
    positions = sorted({t for h in hists.values() for t in h})
    with open(path, "w") as fh:
        fh.write("position," + ",".join(f"unique_{n}grams" for n in hists) + "\n")
        for t in positions:
            fh.write(f"{t}," + ",".join(str(hists[n].get(t, 0)) for n in hists) + "\n")


def heldout_kl_per_step(model: SeqCVAEModel, dataset: Dataset, vocab: VocabIndex, seed: int = 0, max_len: int = 16) -> float:
    """Mean KL(q_t || p_t) per generated position on ``dataset`` (one posterior sample)."""
    batch = make_batch(dataset.records(vocab, max_len), model.dtype)
    eps = model.draw_eps(batch, substream(seed, "heldout-kl"))
    with ad.no_grad():
        lb = model.elbo_loss(batch, 1.0, eps=eps)
    return float(lb.kl.data) * batch.size / float(batch.mask.sum())


def iwae_check(model: SeqCVAEModel, dataset: Dataset, vocab: VocabIndex, n_captions: int = 100, n_samples: int = 512, seed: int = 0, max_len: int = 16, chunk: int = 64):
    """Per-caption ELBO and importance-weighted log-likelihood estimate.

    The ELBO is averaged over the same posterior draws that feed the
    importance-weighted estimate ``log mean_s exp(log p(x, z_s) - log q(z_s | x))``.
    """
    records = dataset.records(vocab, max_len)[:n_captions]
    rng = substream(seed, "iwae")
    elbo = np.zeros(len(records))
    iw = np.zeros(len(records))
    for i, rec in enumerate(records):
        logw = []
        kl_terms = []
        recon_terms = []
        for s in range(0, n_samples, chunk):
            m = min(chunk, n_samples - s)
            batch = make_batch([rec] * m, model.dtype)
            eps = model.draw_eps(batch, rng)
            out = model.log_weights(batch, eps)
            logw.append(out["log_w"])
            kl_terms.append(out["kl"])
            recon_terms.append(out["log_px"])
        lw = np.concatenate(logw).astype(np.float64)
        mx = lw.max()
        iw[i] = mx + np.log(np.mean(np.exp(lw - mx)))
        elbo[i] = float(np.mean(np.concatenate(recon_terms)) - np.mean(np.concatenate(kl_terms)))
    return elbo, iw


def dump_report(report: dict, path, metadata: Optional[dict] = None) -> None:
    out = {k: report.get(k) for k in REPORT_FIELDS}
    out.update({k: v for k, v in report.items() if k not in REPORT_FIELDS})
    if metadata is not None:
        out["metadata"] = metadata
    with open(path, "w") as fh:
        json.dump(out, fh, indent=2, sort_keys=True)
        fh.write("\n")


__all__ = [
    "REPORT_FIELDS",
    "rank_by_consensus",
    "evaluate_captions",
    "evaluate_sample_sets",
    "set_diversity",
    "ngram_histograms",
    "write_histograms_csv",
    "heldout_kl_per_step",
    "iwae_check",
    "dump_report",
]
