"""Test-time generation from the intention model and decoder."""
from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .checkpoint import read_container, write_container
from .corpus import BOS, EOS, CaptionRecord, Dataset, VocabIndex
from .metrics import NgramStats, cider
from .model import SeqCVAEModel
from .rngs import substream

DEFAULT_NEIGHBORS = 8


@dataclass
class SampleSet:
    cond_id: str
    captions: List[CaptionRecord]
    trajectories: List[np.ndarray]
    prior_means: List[np.ndarray] = field(default_factory=list)
    scores: Dict[str, List[float]] = field(default_factory=dict)
    ranking: List[int] = field(default_factory=list)

    def __post_init__(self):
        if len(self.captions) != len(self.trajectories):
            raise ValueError("captions and trajectories differ in count")
        if not self.ranking:
            self.ranking = list(range(len(self.captions)))

    @property
    def k(self) -> int:
        return len(self.captions)

    def texts(self, vocab: VocabIndex) -> List[str]:
        return [vocab.decode(c.tokens) for c in self.captions]

    def ranked_texts(self, vocab: VocabIndex, top: Optional[int] = None) -> List[str]:
        texts = self.texts(vocab)
        order = self.ranking if top is None else self.ranking[:top]
        return [texts[i] for i in order]


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _choose(logits: np.ndarray, temperature: float, rngs: Sequence[np.random.Generator]) -> np.ndarray:
    if temperature == 0:
        return logits.argmax(axis=1)
    probs = _softmax(logits.astype(np.float64) / temperature)
    cdf = np.cumsum(probs, axis=1)
    out = np.empty(len(rngs), dtype=np.int64)
    for i, g in enumerate(rngs):
        out[i] = min(int(np.searchsorted(cdf[i], g.random() * cdf[i, -1], side="right")), logits.shape[1] - 1)
    return out


def sample_captions(
    model: SeqCVAEModel,
    cond,
    k: int = 20,
    temperature: float = 1.0,
    max_len: int = 16,
    seed: int = 0,
    cond_id: str = "",
    mean_mode: bool = False,
    raw_text_vocab: Optional[VocabIndex] = None,
) -> SampleSet:
    """Ancestral sampling: alternate z_t ~ prior and x_t ~ decoder until EOS.

    ``temperature == 0`` picks words greedily; ``mean_mode`` uses the prior mean
    instead of a sample.  Caption ``k`` draws from its own stream
    ``(seed, cond_id, k)``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    dt = model.dtype
    cond_arr = np.asarray(cond, dtype=dt).reshape(1, -1)
    rngs = [substream(seed, "sample", cond_id, j) for j in range(k)]
    Z = model.latent_dim
    with ad.no_grad():
        cond_t = ad.Tensor(np.repeat(cond_arr, k, axis=0))
        state = model.initial_state(k)
        z_prev = ad.Tensor(np.zeros((k, Z), dtype=dt))
        x_prev = np.full(k, BOS, dtype=np.int64)
        done = np.zeros(k, dtype=bool)
        words: List[List[int]] = [[] for _ in range(k)]
        trajs: List[List[np.ndarray]] = [[] for _ in range(k)]
        means: List[List[np.ndarray]] = [[] for _ in range(k)]
        z = None
        for t in range(1, max_len + 1):
            if not (model.single_latent and z is not None):
                p = model.gen_prior(state, z_prev, x_prev, cond_t)
                if mean_mode:
                    z_np = p.mean.data.copy()
                else:
                    eps = np.stack([g.standard_normal(Z) for g in rngs]).astype(dt)
                    z_np = p.mean.data + np.exp(0.5 * p.log_var.data) * eps
                mu_np = p.mean.data
                z = ad.Tensor(z_np)
            logits = model.gen_decode(state, x_prev, z, cond_t)
            x_t = _choose(logits.data, temperature, rngs)
            for i in np.flatnonzero(~done):
                words[i].append(int(x_t[i]))
                trajs[i].append(z.data[i].copy())
                means[i].append(np.array(mu_np[i], copy=True))
                if x_t[i] == EOS:
                    done[i] = True
            if done.all():
                break
            z_prev, x_prev = z, x_t
    records, traj_arrays = [], []
    for i in range(k):
        truncated = not words[i] or words[i][-1] != EOS
        toks = (BOS, *words[i]) + ((EOS,) if truncated else ())
        text = raw_text_vocab.decode(toks) if raw_text_vocab is not None else ""
        records.append(CaptionRecord(toks, cond_arr[0], text, cond_id, truncated))
        traj_arrays.append(np.stack(trajs[i]))
    return SampleSet(cond_id, records, traj_arrays, [np.stack(m) for m in means])


def decode_with_trajectory(model: SeqCVAEModel, cond, trajectory: np.ndarray, max_len: int = 16, cond_id: str = "") -> CaptionRecord:
    """Greedy decoding with z_t taken from ``trajectory`` (last entry reused past its end)."""
    traj = np.asarray(trajectory, dtype=model.dtype)
    if traj.ndim != 2 or traj.shape[0] < 1:
        raise ValueError("trajectory must be a nonempty (T, Z) array")
    cond_arr = np.asarray(cond, dtype=model.dtype).reshape(1, -1)
    words = []
    with ad.no_grad():
        cond_t = ad.Tensor(cond_arr)
        state = model.initial_state(1)
        x_prev = np.array([BOS])
        for t in range(max_len):
            z = ad.Tensor(traj[min(t, traj.shape[0] - 1)][None, :])
            logits = model.gen_decode(state, x_prev, z, cond_t)
            x = int(logits.data[0].argmax())
            words.append(x)
            if x == EOS:
                break
            x_prev = np.array([x])
    truncated = words[-1] != EOS
    toks = (BOS, *words) + ((EOS,) if truncated else ())
    return CaptionRecord(toks, cond_arr[0], "", cond_id, truncated)


def pad_trajectory(traj: np.ndarray, length: int) -> np.ndarray:
    traj = np.asarray(traj)
    if traj.shape[0] >= length:
        return traj
    return np.concatenate([traj, np.repeat(traj[-1:], length - traj.shape[0], axis=0)])


@dataclass
class InterpolationResult:
    alpha: float
    caption: CaptionRecord
    extrapolated: bool


def interpolate(
    model: SeqCVAEModel, cond, traj_a: np.ndarray, traj_b: np.ndarray, alphas: Sequence[float], max_len: int = 16
) -> List[InterpolationResult]:
    """Decode ``(1 - a) * z^A_t + a * z^B_t`` at every position for each ``a``."""
    L = max(len(traj_a), len(traj_b))
    a_pad = pad_trajectory(traj_a, L)
    b_pad = pad_trajectory(traj_b, L)
    out = []
    for a in alphas:
        a = float(a)
        mixed = (1.0 - a) * a_pad + a * b_pad
        out.append(InterpolationResult(a, decode_with_trajectory(model, cond, mixed, max_len), not 0.0 <= a <= 1.0))
    return out


def nearest_neighbors(query: np.ndarray, features: np.ndarray, m: int = DEFAULT_NEIGHBORS, exclude: Optional[int] = None) -> List[int]:
    """Indices of the ``m`` rows of ``features`` closest to ``query`` (Euclidean, ties by index)."""
    d = np.sum((np.asarray(features) - np.asarray(query)[None, :]) ** 2, axis=1)
    order = [int(i) for i in np.argsort(d, kind="stable") if i != exclude]
    return order[:m]


def consensus_rerank(captions: Sequence[str], neighbor_refs: Sequence[str], stats: NgramStats) -> Tuple[List[int], List[float]]:
    """Rank captions by CIDEr against the pooled references of neighbouring conditions."""
    if not neighbor_refs:
        raise ValueError("consensus_rerank needs neighbour references")
    scores = [cider(c, neighbor_refs, stats) if c.strip() else 0.0 for c in captions]
    ranking = sorted(range(len(captions)), key=lambda i: (-scores[i], i))
    return ranking, scores


def rerank_sample_set(
    ss: SampleSet,
    vocab: VocabIndex,
    train: Dataset,
    stats: NgramStats,
    m: int = DEFAULT_NEIGHBORS,
    train_matrix: Optional[np.ndarray] = None,
) -> SampleSet:
    ids = train.cond_ids
    mat = train_matrix if train_matrix is not None else np.stack([train.features[i] for i in ids])
    nn = nearest_neighbors(ss.captions[0].condition, mat, m)
    refs = [c for i in nn for c in train.captions[ids[i]]]
    ranking, scores = consensus_rerank(ss.texts(vocab), refs, stats)
    ss.ranking = ranking
    ss.scores["consensus_cider"] = scores
    return ss


def sample_dataset(
    model: SeqCVAEModel,
    dataset: Dataset,
    k: int = 20,
    temperature: float = 1.0,
    max_len: int = 16,
    seed: int = 0,
    mean_mode: bool = False,
    workers: int = 1,
    vocab: Optional[VocabIndex] = None,
) -> List[SampleSet]:
    def one(cid):
        return sample_captions(model, dataset.features[cid], k, temperature, max_len, seed, cid, mean_mode, vocab)

    ids = dataset.cond_ids
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            return list(ex.map(one, ids))
    return [one(c) for c in ids]


def write_sample_sets(sets: Sequence[SampleSet], vocab: VocabIndex, jsonl_path, traj_path) -> None:
    traj_path = Path(traj_path)
    blobs = {}
    with open(jsonl_path, "w") as fh:
        for ss in sets:
            for j, tr in enumerate(ss.trajectories):
                blobs[f"{ss.cond_id}/{j:04d}"] = np.asarray(tr, dtype=np.float64)
            obj = {
                "cond_id": ss.cond_id,
                "captions": ss.texts(vocab),
                "scores": {k: [float(x) for x in v] for k, v in ss.scores.items()},
                "ranking": list(ss.ranking),
                "trajectories_path": traj_path.name,
            }
            fh.write(json.dumps(obj, sort_keys=True) + "\n")
    traj_path.write_bytes(write_container(blobs, {"kind": "trajectories"}))


def read_sample_sets(jsonl_path) -> Tuple[List[dict], Dict[str, List[np.ndarray]]]:
    """Sample-set JSON objects plus trajectories grouped by cond_id."""
    jsonl_path = Path(jsonl_path)
    objs = [json.loads(line) for line in jsonl_path.read_text().splitlines() if line.strip()]
    trajs: Dict[str, List[np.ndarray]] = {}
    if objs:
        _, blobs = read_container((jsonl_path.parent / objs[0]["trajectories_path"]).read_bytes())
        for name in sorted(blobs):
            cid, _ = name.rsplit("/", 1)
            trajs.setdefault(cid, []).append(blobs[name])
    return objs, trajs


def pca_2d(x: np.ndarray) -> np.ndarray:
    """Project rows onto the two leading principal directions."""
    x = np.asarray(x, dtype=np.float64)
    centered = x - x.mean(axis=0, keepdims=True)
    if not np.any(centered):
        return np.zeros((x.shape[0], 2))
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    proj = centered @ vt[:2].T
    if proj.shape[1] < 2:
        proj = np.concatenate([proj, np.zeros((proj.shape[0], 2 - proj.shape[1]))], axis=1)
    return proj


def export_latent_means(
    model: SeqCVAEModel, vocab: VocabIndex, dataset: Dataset, path, k: int = 1, seed: int = 0, max_len: int = 16, temperature: float = 1.0
) -> List[dict]:
    """Write one CSV row per generated word: cond_id, position, word, prior mean, PCA pair."""
    rows = []
    for ss in sample_dataset(model, dataset, k, temperature, max_len, seed):
        for rec, mu in zip(ss.captions, ss.prior_means):
            for t, (tok, m) in enumerate(zip(rec.tokens[1:], mu), start=1):
                rows.append({"cond_id": ss.cond_id, "t": t, "word": vocab.itos[tok], "mu": m})
    if rows:
        proj = pca_2d(np.stack([r["mu"] for r in rows]))
        for r, p in zip(rows, proj):
            r["pc1"], r["pc2"] = float(p[0]), float(p[1])
    Z = model.latent_dim
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cond_id", "t", "word", *[f"mu_{i}" for i in range(Z)], "pc1", "pc2"])
        for r in rows:
            w.writerow([r["cond_id"], r["t"], r["word"], *[repr(float(v)) for v in r["mu"]], repr(r["pc1"]), repr(r["pc2"])])
    return rows


__all__ = [
    "SampleSet",
    "sample_captions",
    "decode_with_trajectory",
    "interpolate",
    "InterpolationResult",
    "pad_trajectory",
    "nearest_neighbors",
    "consensus_rerank",
    "rerank_sample_set",
    "sample_dataset",
    "write_sample_sets",
    "read_sample_sets",
    "pca_2d",
    "export_latent_means",
    "DEFAULT_NEIGHBORS",
]
