"""Optimisation loops: backward-LM pretraining and end-to-end training."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, ParameterStore
from .checkpoint import Checkpoint, ShapeMismatchError, check_shapes, save_checkpoint
from .corpus import CaptionRecord, Dataset, VocabIndex
from .model import DEFAULT_AUX_WEIGHT, BackwardLM, Batch, LossBreakdown, ModelConfig, SeqCVAEModel, Variant, make_batch
from .rngs import substream, subseed

log = logging.getLogger(__name__)

METRICS_HEADER = ["step", "recon", "kl", "aux", "kl_weight", "aux_by_pos_json"]


@dataclass
class TrainConfig:
    variant: str = "seq_cvae"
    latent_dim: int = 16
    hidden_dim: int = 64
    embed_dim: int = 32
    cond_dim: int = 32
    blm_hidden_dim: int = 64
    g_hidden_dim: Optional[int] = None
    lr: float = 1e-3
    optimizer: str = "adam"
    momentum: float = 0.9
    batch_size: int = 32
    max_steps: int = 1500
    kl_warmup: float = 0.1
    kl_anneal: bool = True
    aux_weight: float = DEFAULT_AUX_WEIGHT
    seed: int = 0
    eval_interval: int = 100
    eval_size: int = 200
    grad_clip: float = 5.0
    dtype: str = "float32"
    max_len: int = 16
    freeze_blm: bool = True
    blm_steps: int = 600
    blm_lr: float = 3e-3

    def __post_init__(self):
        Variant.parse(self.variant)
        for name in ("latent_dim", "hidden_dim", "embed_dim", "cond_dim", "blm_hidden_dim", "batch_size", "max_steps", "eval_interval", "max_len"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0 or self.blm_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.aux_weight < 0:
            raise ValueError("aux_weight must be >= 0")
        if not 0 <= self.kl_warmup <= 1:
            raise ValueError("kl_warmup is a fraction of max_steps in [0, 1]")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size,
            variant=self.variant,
            latent_dim=self.latent_dim,
            hidden_dim=self.hidden_dim,
            embed_dim=self.embed_dim,
            cond_dim=self.cond_dim,
            blm_hidden_dim=self.blm_hidden_dim,
            g_hidden_dim=self.g_hidden_dim,
            aux_weight=self.aux_weight,
            dtype=self.dtype,
        )


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, last_good: Optional[Checkpoint]):
        super().__init__(f"non-finite loss at step {step}; last good checkpoint at step {last_good.step if last_good else None}")
        self.step = step
        self.last_good = last_good


# ---------------------------------------------------------------------------
# optimisers


class SGD:
    def __init__(self, store: ParameterStore, names: Sequence[str], lr: float, momentum: float = 0.9):
        self.store, self.names, self.lr, self.momentum = store, list(names), lr, momentum
        self.velocity = {n: np.zeros_like(store[n].data) for n in self.names}

    def step(self, grads: Dict[str, np.ndarray]) -> None:
        for n in self.names:
            v = self.velocity[n]
            v *= self.momentum
            v += grads[n]
            self.store[n].data = self.store[n].data - self.lr * v


class Adam:
    def __init__(self, store: ParameterStore, names: Sequence[str], lr: float = 1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.store, self.names, self.lr = store, list(names), lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(store[n].data) for n in self.names}
        self.v = {n: np.zeros_like(store[n].data) for n in self.names}

    def step(self, grads: Dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for n in self.names:
            g = grads[n]
            m, v = self.m[n], self.v[n]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p = self.store[n]
            p.data = (p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype, copy=False)


def make_optimizer(kind: str, store, names, lr, momentum=0.9):
    if kind == "adam":
        return Adam(store, names, lr)
    return SGD(store, names, lr, momentum)


def clip_gradients(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for n in grads:
            grads[n] = grads[n] * scale
    return norm


def kl_weight_at(step: int, config: TrainConfig) -> float:
    """Linear ramp from 0 to 1 over the first ``kl_warmup`` fraction of steps."""
    if not config.kl_anneal:
        return 1.0
    warm = config.kl_warmup * config.max_steps
    if warm <= 0:
        return 1.0
    return min(1.0, step / warm)


def _batches(records: Sequence[CaptionRecord], batch_size: int, rng: np.random.Generator):
    n = len(records)
    while True:
        order = rng.permutation(n)
        for s in range(0, n, batch_size):
            idx = order[s : s + batch_size]
            if len(idx) < min(batch_size, n):
                break
            yield [records[i] for i in idx]


def params_digest(params: Dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for n in sorted(params):
        h.update(n.encode())
        h.update(np.ascontiguousarray(params[n]).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# backward language model


@dataclass
class PretrainResult:
    checkpoint: Checkpoint
    losses: List[float]


def _blm_store(vocab_size: int, config: TrainConfig):
    store = ParameterStore(subseed(config.seed, "init"), config.dtype)
    blm = BackwardLM(store, vocab_size, config.embed_dim, config.blm_hidden_dim)
    return store, blm


def pretrain_backward_lm(train: Dataset, vocab: VocabIndex, config: TrainConfig, steps: Optional[int] = None) -> PretrainResult:
    """Fit the right-to-left previous-token predictor; returns per-token losses per step."""
    records = train.records(vocab, config.max_len)
    if not records:
        raise ValueError("cannot pretrain on an empty corpus")
    store, blm = _blm_store(len(vocab), config)
    opt = make_optimizer(config.optimizer, store, store.names(), config.blm_lr, config.momentum)
    rng = substream(config.seed, "train-blm")
    batches = _batches(records, config.batch_size, rng)
    losses = []
    steps = config.blm_steps if steps is None else steps
    for step in range(steps):
        batch = make_batch(next(batches), store.dtype)
        store.zero_grad()
        total, n_tok = blm.loss(batch)
        loss = ad.mul(total, np.asarray(1.0 / n_tok, dtype=store.dtype))
        ad.backward(loss)
        losses.append(float(loss.data))
        grads = store.grads()
        clip_gradients(grads, config.grad_clip)
        opt.step(grads)
    ckpt = Checkpoint(
        kind="blm",
        config=config.to_dict(),
        params=store.state_dict(),
        vocab=vocab.to_dict(),
        step=steps,
        rng_state=rng.bit_generator.state,
        meta={"final_loss": losses[-1] if losses else None},
    )
    return PretrainResult(ckpt, losses)


def blm_token_loss(blm_ckpt: Checkpoint, dataset: Dataset, vocab: VocabIndex, config: TrainConfig) -> float:
    """Mean per-token cross-entropy of a backward LM checkpoint on ``dataset``."""
    store, blm = _blm_store(len(vocab), config)
    store.load_state_dict(blm_ckpt.params)
    batch = make_batch(dataset.records(vocab, config.max_len), store.dtype)
    with ad.no_grad():
        total, n_tok = blm.loss(batch)
    return float(total.data) / n_tok


# ---------------------------------------------------------------------------
# end-to-end training


def build_model(config: TrainConfig, vocab_size: int, blm_ckpt: Optional[Checkpoint] = None) -> SeqCVAEModel:
    model = SeqCVAEModel(config.model_config(vocab_size), seed=subseed(config.seed, "init"))
    if blm_ckpt is not None:
        expected = {n: model.store[n].shape for n in model.store.subset("blm.")}
        check_shapes(blm_ckpt.params, expected)
        model.store.load_state_dict({n: blm_ckpt.params[n] for n in expected})
    if config.freeze_blm:
        model.store.freeze("blm.")
    return model


def model_from_checkpoint(ckpt: Checkpoint) -> tuple:
    """Rebuild ``(model, vocab, config)`` from a training checkpoint."""
    if ckpt.kind != "seqcvae":
        raise ValueError(f"expected a seqcvae checkpoint, got kind {ckpt.kind!r}")
    config = TrainConfig.from_dict(ckpt.config)
    vocab = VocabIndex.from_dict(ckpt.vocab)
    model = SeqCVAEModel(config.model_config(len(vocab)), seed=subseed(config.seed, "init"))
    check_shapes(ckpt.params, {n: t.shape for n, t in model.store.items()})
    model.store.load_state_dict(ckpt.params)
    return model, vocab, config


def make_checkpoint(model: SeqCVAEModel, vocab: VocabIndex, config: TrainConfig, step: int, rng, meta=None) -> Checkpoint:
    return Checkpoint(
        kind="seqcvae",
        config=config.to_dict(),
        params=model.store.state_dict(),
        vocab=vocab.to_dict(),
        step=step,
        rng_state=rng.bit_generator.state if rng is not None else None,
        meta=meta or {},
    )


@dataclass
class TrainResult:
    model: SeqCVAEModel
    checkpoint: Checkpoint
    metrics: List[dict]
    checkpoints: List[Checkpoint] = field(default_factory=list)


def evaluate_loss(model: SeqCVAEModel, batch: Batch, kl_weight: float, seed: int) -> LossBreakdown:
    eps = model.draw_eps(batch, substream(seed, "eval-eps"))
    with ad.no_grad():
        return model.elbo_loss(batch, kl_weight, eps=eps)


def metrics_row(step: int, lb: LossBreakdown) -> dict:
    return {
        "step": step,
        "recon": float(lb.reconstruction.data),
        "kl": float(lb.kl.data),
        "aux": float(lb.aux.data),
        "kl_weight": lb.kl_weight,
        "aux_by_pos": [float(x) for x in lb.aux_by_pos],
    }


def write_metrics_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        for r in rows:
            w.writerow([r["step"], repr(r["recon"]), repr(r["kl"]), repr(r["aux"]), repr(r["kl_weight"]), json.dumps(r["aux_by_pos"])])


def read_metrics_csv(path) -> List[dict]:
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows.append(
                {
                    "step": int(r["step"]),
                    "recon": float(r["recon"]),
                    "kl": float(r["kl"]),
                    "aux": float(r["aux"]),
                    "kl_weight": float(r["kl_weight"]),
                    "aux_by_pos": json.loads(r["aux_by_pos_json"]),
                }
            )
    return rows


def train(
    train_ds: Dataset,
    vocab: VocabIndex,
    config: TrainConfig,
    blm_ckpt: Optional[Checkpoint] = None,
    eval_ds: Optional[Dataset] = None,
    eval_steps: Sequence[int] = (),
    checkpoint_dir=None,
    log_path=None,
    on_step: Optional[Callable[[int, dict], None]] = None,
) -> TrainResult:
    """Minimise the batch-averaged loss by mini-batch gradient descent.

    Metrics are computed on a fixed evaluation batch (``eval_ds`` or a slice
    of the training captions) with fixed noise at step 0, every
    ``eval_interval`` steps, at any step listed in ``eval_steps`` and at the end.
    """
    records = train_ds.records(vocab, config.max_len)
    if not records:
        raise ValueError("cannot train on an empty corpus")
    model = build_model(config, len(vocab), blm_ckpt)
    store = model.store
    names = [n for n, t in store.items() if t.requires_grad]
    opt = make_optimizer(config.optimizer, store, names, config.lr, config.momentum)
    rng = substream(config.seed, "train")
    batches = _batches(records, config.batch_size, rng)

    eval_records = (eval_ds.records(vocab, config.max_len) if eval_ds is not None and len(eval_ds) else records)
    eval_records = eval_records[: config.eval_size]
    eval_batch = make_batch(eval_records, store.dtype)
    wanted = set(eval_steps) | {0, config.max_steps}
    wanted.update(range(0, config.max_steps + 1, config.eval_interval))

    rows: List[dict] = []
    ckpts: List[Checkpoint] = []
    last_good: Optional[Checkpoint] = None

    def record(step: int):
        nonlocal last_good
        lb = evaluate_loss(model, eval_batch, kl_weight_at(step, config), config.seed)
        row = metrics_row(step, lb)
        rows.append(row)
        last_good = make_checkpoint(model, vocab, config, step, rng)
        if checkpoint_dir is not None:
            save_checkpoint(last_good, Path(checkpoint_dir) / f"ckpt_step{step:06d}.sqcv")
        ckpts.append(last_good)
        log.info("step %d recon %.4f kl %.4f aux %.6f", step, row["recon"], row["kl"], row["aux"])

    record(0)
    for step in range(1, config.max_steps + 1):
        batch = make_batch(next(batches), store.dtype)
        eps = model.draw_eps(batch, rng)
        kw = kl_weight_at(step, config)
        store.zero_grad()
        try:
            lb = model.elbo_loss(batch, kw, eps=eps, frozen_blm=config.freeze_blm)
            if not np.isfinite(lb.total.data):
                raise NonFiniteError("loss")
            ad.backward(lb.total)
        except NonFiniteError:
            raise TrainingDivergedError(step, last_good) from None
        grads = {n: store[n].grad if store[n].grad is not None else np.zeros_like(store[n].data) for n in names}
        clip_gradients(grads, config.grad_clip)
        opt.step(grads)
        if on_step is not None:
            on_step(step, lb.values())
        if step in wanted:
            record(step)

    if log_path is not None:
        write_metrics_csv(rows, log_path)
    return TrainResult(model, ckpts[-1], rows, ckpts)


__all__ = [
    "TrainConfig",
    "TrainingDivergedError",
    "SGD",
    "Adam",
    "clip_gradients",
    "kl_weight_at",
    "pretrain_backward_lm",
    "blm_token_loss",
    "build_model",
    "model_from_checkpoint",
    "make_checkpoint",
    "train",
    "TrainResult",
    "PretrainResult",
    "evaluate_loss",
    "write_metrics_csv",
    "read_metrics_csv",
    "params_digest",
    "METRICS_HEADER",
]
