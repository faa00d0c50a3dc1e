"""Acceptance criteria, one test per criterion; each records a PASS/FAIL line.

The desk protocol shared by criteria 3 and 5-8:

* corpus: built-in scene grammar, 600 scenes x 5 captions, seed 0, split
  500/50/50 scenes (train/val/test);
* backward LM: 600 pretraining steps, seed 0, shared by every run;
* training: 2000 Adam steps, lr 5e-3, batch 32, KL weight ramped linearly over
  the first 90% of steps, seeds 0, 1, 2;
* sampling: K = 20 per test condition, z from the learned prior, words greedy.

These runs are the slow part (about 12 minutes on one core); run only the fast
unit tests with ``pytest -m "not slow"``.
"""
import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from seqcvae.autodiff import Tensor
from seqcvae.blocks import GaussianParams, gaussian_log_density, kl_diag_gaussian
from seqcvae.checkpoint import (
    ShapeMismatchError,
    TruncatedCheckpointError,
    UnsupportedVersionError,
    load_checkpoint,
    save_checkpoint,
    write_container,
    Checkpoint,
)
from seqcvae.corpus import BOS, PAD, UNK, Dataset, build_vocab, default_grammar, generate_synthetic, split
from seqcvae.diagnostics import toy_gradcheck
from seqcvae.evaluation import dump_report, evaluate_sample_sets, heldout_kl_per_step, iwae_check, set_diversity
from seqcvae.metrics import NgramStats, bleu, cider, div_n, mbleu4
from seqcvae.model import Variant, make_batch
from seqcvae.sampler import decode_with_trajectory, interpolate, sample_captions, sample_dataset
from seqcvae.trainer import TrainConfig, build_model, model_from_checkpoint, pretrain_backward_lm, train

SEEDS = (0, 1, 2)
ABLATIONS = ("cvae_single_z", "seq_cvae_const_prior")
DESK = dict(max_steps=2000, lr=5e-3, kl_warmup=0.9, eval_interval=500)
K = 20


def report(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


# ---------------------------------------------------------------------------
# shared desk-scale runs


@pytest.fixture(scope="module")
def corpus():
    ds = generate_synthetic(default_grammar(), 600, 5, seed=0)
    train_ds, val, test = split(ds, (500 / 600, 50 / 600, 50 / 600), seed=0)
    vocab = build_vocab(train_ds)
    blm = pretrain_backward_lm(train_ds, vocab, TrainConfig(blm_steps=600))
    return train_ds, val, test, vocab, blm


@pytest.fixture(scope="module")
def desk_runs(corpus):
    train_ds, val, test, vocab, blm = corpus
    runs = {}
    t0 = time.time()
    for seed in SEEDS:
        for variant in ("seq_cvae", *ABLATIONS):
            cfg = TrainConfig(variant=variant, seed=seed, **DESK)
            res = train(train_ds, vocab, cfg, blm.checkpoint, val)
            sets = sample_dataset(res.model, test, K, 0.0, 16, seed=seed)
            div = set_diversity(sets, vocab)
            div["kl"] = heldout_kl_per_step(res.model, test, vocab)
            runs[variant, seed] = {"result": res, "sets": sets, **div}
    return runs, time.time() - t0


# ---------------------------------------------------------------------------


@pytest.mark.slow
def test_c01_gradient_integrity():
    worst, where, slowest = {}, {}, 0.0
    for v in Variant:
        t = time.time()
        errs = toy_gradcheck(v.value)
        slowest = max(slowest, time.time() - t)
        where[v.value] = max(errs, key=errs.get)
        worst[v.value] = errs[where[v.value]]
    top = max(worst, key=worst.get)
    ok = worst[top] < 1e-4 and slowest < 60
    report(1, ok, f"max rel err {worst[top]:.2e} ({top} {where[top]}) over {len(worst)} variants (< 1e-4), slowest {slowest:.1f}s (< 60s)")
    assert ok, worst


def test_c02_kl_correctness():
    rng = np.random.default_rng(2024)
    n, d = 100_000, 2
    errs = []
    for _ in range(20):
        qm, pm = rng.normal(0.0, 0.3, (2, d))
        qv, pv = rng.uniform(-0.5, 0.5, (2, d))
        closed = kl_diag_gaussian(GaussianParams(Tensor([qm]), Tensor([qv])), GaussianParams(Tensor([pm]), Tensor([pv]))).data[0]
        z = qm + np.exp(0.5 * qv) * rng.standard_normal((n, d))
        mc = np.mean(gaussian_log_density(z, qm, qv) - gaussian_log_density(z, pm, pv))
        errs.append(abs(closed - mc))
    p = GaussianParams(Tensor([[0.4, -1.2]]), Tensor([[0.3, -2.0]]))
    same = float(kl_diag_gaussian(p, p).data[0])
    ok = max(errs) < 1e-2 and same >= -1e-12 and same == 0.0
    report(2, ok, f"max |closed - MC| {max(errs):.2e} over 20 pairs (< 1e-2); KL(q||q) = {same}")
    assert ok


@pytest.mark.slow
def test_c03_bound_property(corpus, desk_runs):
    _, _, test, vocab, _ = corpus
    model = desk_runs[0]["seq_cvae", 0]["result"].model
    t = time.time()
    elbo, iw = iwae_check(model, test, vocab, n_captions=100, n_samples=512, seed=0)
    frac = float(np.mean(elbo <= iw + 0.05))
    ok = frac >= 0.95 and len(elbo) == 100
    report(3, ok, f"ELBO <= IW(512) + 0.05 on {frac:.0%} of 100 held-out captions (>= 95%); mean gap {np.mean(iw - elbo):.3f} nats; {time.time() - t:.0f}s")
    assert ok


def test_c04_metric_oracles():
    checks = {}
    checks["bleu_bp"] = abs(bleu("a b c d", ["a b c d e"]) - math.exp(1 - 5 / 4)) < 1e-9
    checks["bleu_identity"] = bleu("a man rides a horse", ["a man rides a horse"]) == 1.0
    stats2 = NgramStats.from_references([["a b c d"], ["e f g h"]])
    checks["cider_identity"] = abs(cider("a b c d", ["a b c d"], stats2) - 10.0) < 1e-9
    checks["cider_disjoint"] = cider("e f g h", ["a b c d"], stats2) == 0.0
    stats3 = NgramStats.from_references([["a b"], ["a c"], ["d e"]])
    lo, hi = math.log(3 / 2), math.log(3)
    checks["cider_3doc"] = abs(cider("a c", ["a b"], stats3) - 10 * (lo * lo / (lo * lo + hi * hi)) / 4) < 1e-9
    checks["mbleu4_identical"] = mbleu4(["a man rides a horse"] * 5) == 1.0
    checks["div1"] = div_n(["a b", "a c"], 1) == 0.75
    caps = ["a dog runs", "a dog runs", "the cat sleeps on a mat", "a b", "dog a runs"]
    rev = caps[::-1]
    from seqcvae.metrics import distinct_fraction, unique_ngrams_by_position

    checks["permutation"] = (
        distinct_fraction(caps) == distinct_fraction(rev)
        and div_n(caps, 2) == div_n(rev, 2)
        and abs(mbleu4(caps) - mbleu4(rev)) < 1e-12
        and unique_ngrams_by_position([caps], 2) == unique_ngrams_by_position([rev], 2)
    )
    ok = all(checks.values())
    report(4, ok, f"{sum(checks.values())}/{len(checks)} metric oracles hold" + ("" if ok else f"; failing: {[k for k, v in checks.items() if not v]}"))
    assert ok


@pytest.mark.slow
def test_c05_diversity_ordering(desk_runs):
    runs, elapsed = desk_runs
    mean = {v: {k: float(np.mean([runs[v, s][k] for s in SEEDS])) for k in ("distinct", "div2", "kl")} for v in ("seq_cvae", *ABLATIONS)}
    for v in mean:
        per_seed = ", ".join(f"{runs[v, s]['distinct']:.3f}/{runs[v, s]['div2']:.3f}" for s in SEEDS)
        print(f"  {v:22s} distinct {mean[v]['distinct']:.3f}  div2 {mean[v]['div2']:.3f}  (per seed distinct/div2: {per_seed})")
    seq = mean["seq_cvae"]
    wins_distinct = all(seq["distinct"] > mean[a]["distinct"] for a in ABLATIONS)
    wins_div2 = all(seq["div2"] > mean[a]["div2"] for a in ABLATIONS)
    ok = wins_distinct and wins_div2 and elapsed < 1800
    detail = "; ".join(f"{v} distinct {m['distinct']:.3f} div2 {m['div2']:.3f}" for v, m in mean.items())
    report(5, ok, f"mean over 3 seeds, K=20: {detail}; runtime {elapsed / 60:.1f} min (< 30)")
    assert ok


@pytest.mark.slow
def test_c06_aux_trend(desk_runs):
    runs, _ = desk_runs
    traces, ok = [], True
    for s in SEEDS:
        rows = {r["step"]: r for r in runs["seq_cvae", s]["result"].metrics}
        vals = [float(np.mean(rows[step]["aux_by_pos"])) for step in (500, 1000, 2000)]
        ok &= vals[0] >= vals[1] >= vals[2]
        traces.append("/".join(f"{v:.3f}" for v in vals))
    report(6, ok, f"mean per-position aux distance at 25/50/100% of training, per seed: {', '.join(traces)} (nonincreasing)")
    assert ok


@pytest.mark.slow
def test_c07_posterior_usage(corpus, desk_runs):
    train_ds, val, test, vocab, blm = corpus
    runs, _ = desk_runs
    seq_kl = [runs["seq_cvae", s]["kl"] for s in SEEDS]
    single_kl = []
    for s in SEEDS:
        cfg = TrainConfig(variant="cvae_single_z", seed=s, kl_anneal=False, **DESK)
        single_kl.append(heldout_kl_per_step(train(train_ds, vocab, cfg, blm.checkpoint, val).model, test, vocab))
    ok = min(seq_kl) > 0.05 and max(single_kl) < 0.05
    report(7, ok, f"held-out KL/step: seq_cvae {[round(k, 4) for k in seq_kl]} (> 0.05); cvae_single_z without annealing {[round(k, 4) for k in single_kl]} (< 0.05)")
    assert ok


@pytest.mark.slow
def test_c08_interpolation_exactness(corpus, desk_runs):
    _, _, test, vocab, _ = corpus
    model = desk_runs[0]["seq_cvae", 0]["result"].model
    alphas = [round(0.2 * i, 1) for i in range(6)]
    exact, in_vocab = 0, True
    for cid in test.cond_ids[:20]:
        cond = test.features[cid]
        ss = sample_captions(model, cond, 2, 1.0, 16, seed=8, cond_id=cid)
        ta, tb = ss.trajectories
        res = interpolate(model, cond, ta, tb, alphas)
        ends = (decode_with_trajectory(model, cond, ta).tokens, decode_with_trajectory(model, cond, tb).tokens)
        exact += res[0].caption.tokens == ends[0] and res[-1].caption.tokens == ends[1]
        for r in res:
            body = r.caption.tokens[1:]
            in_vocab &= all(0 <= t < len(vocab) and t not in (BOS, PAD, UNK) for t in body)
    ok = exact == 20 and in_vocab
    report(8, ok, f"{exact}/20 pairs with bit-exact endpoint decodes; all grid captions in-vocabulary: {in_vocab}")
    assert ok


def _tiny_run(seed, tmp):
    ds = generate_synthetic(default_grammar(feature_dim=8), 30, 3, seed=0)
    tr, va, te = split(ds, (0.6, 0.2, 0.2), seed=0)
    vocab = build_vocab(tr)
    cfg = TrainConfig(latent_dim=4, hidden_dim=12, embed_dim=8, cond_dim=8, blm_hidden_dim=12, batch_size=8, max_steps=30, eval_interval=10, seed=seed)
    blm = pretrain_backward_lm(tr, vocab, cfg, steps=10)
    res = train(tr, vocab, cfg, blm.checkpoint, va)
    sets = sample_dataset(res.model, te, 5, 1.0, 16, seed=seed)
    rep = evaluate_sample_sets(sets, vocab, tr, te)
    dump_report(rep, tmp)
    return res, te, vocab, blm, cfg


def test_c09_reproducibility_and_persistence(tmp_path):
    checks = {}
    a, te, vocab, blm, cfg = _tiny_run(0, tmp_path / "a.json")
    _tiny_run(0, tmp_path / "b.json")
    checks["report_bytes"] = (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    save_checkpoint(a.checkpoint, tmp_path / "m.sqcv")
    model, _, _ = model_from_checkpoint(load_checkpoint(tmp_path / "m.sqcv"))
    batch = make_batch(te.records(vocab, 16), a.model.dtype)
    eps = a.model.draw_eps(batch, np.random.default_rng(0))
    fa, fb = a.model.run(batch, eps), model.run(batch, eps)
    checks["forward_bits"] = all(x.data.tobytes() == y.data.tobytes() for x, y in zip(fa.recon + fa.kl, fb.recon + fb.kl))

    data = (tmp_path / "m.sqcv").read_bytes()
    try:
        Checkpoint.from_bytes(data[: len(data) - 7])
        checks["truncated"] = False
    except TruncatedCheckpointError:
        checks["truncated"] = True
    try:
        Checkpoint.from_bytes(write_container({"w": np.zeros(1)}, {}, version=99))
        checks["version"] = False
    except UnsupportedVersionError:
        checks["version"] = True
    try:
        build_model(TrainConfig(**{**cfg.to_dict(), "blm_hidden_dim": 13}), len(vocab), blm.checkpoint)
        checks["shape"] = False
    except ShapeMismatchError:
        checks["shape"] = True
    ok = all(checks.values())
    report(9, ok, "; ".join(f"{k} {'ok' if v else 'BROKEN'}" for k, v in checks.items()))
    assert ok


@pytest.mark.slow
def test_c10_capacity_sanity(corpus):
    train_ds, _, _, vocab, blm = corpus
    small = Dataset()
    for cid in train_ds.cond_ids[:20]:
        small.add(cid, train_ds.features[cid], train_ds.captions[cid][0])
    cfg = TrainConfig(max_steps=400, lr=5e-3, batch_size=20, eval_interval=100)
    res = train(small, vocab, cfg, blm.checkpoint, small)
    n_tok = make_batch(small.records(vocab, 16)).mask.sum()
    recon = res.metrics[-1]["recon"] * small.n_captions() / n_tok
    ln_v = math.log(len(vocab))
    first = blm.losses[0]
    decreasing = float(np.mean(blm.losses[-50:])) < float(np.mean(blm.losses[:50]))
    ok = recon < 0.1 and abs(first - ln_v) / ln_v < 0.05 and decreasing
    report(
        10,
        ok,
        f"overfit recon {recon:.4f} nats/token after 400 steps on 20 captions (< 0.1); "
        f"BLM loss starts {first:.4f} vs ln|V| {ln_v:.4f} ({abs(first - ln_v) / ln_v:.2%}, < 5%), "
        f"ends {np.mean(blm.losses[-50:]):.3f}",
    )
    assert ok
