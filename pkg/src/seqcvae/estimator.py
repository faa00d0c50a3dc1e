"""scikit-learn style front end: ``SeqCVAE().fit(X, captions).sample(X)``."""
from __future__ import annotations

from dataclasses import fields
from typing import List, Optional, Sequence, Union

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .corpus import Dataset, VocabIndex, build_vocab
from .model import make_batch
from .sampler import SampleSet, sample_captions
from .trainer import TrainConfig, evaluate_loss, model_from_checkpoint, pretrain_backward_lm, train

Captions = Union[Sequence[str], Sequence[Sequence[str]]]


def _as_dataset(X: np.ndarray, y: Captions) -> Dataset:
    if len(y) != X.shape[0]:
        raise ValueError(f"X has {X.shape[0]} rows but {len(y)} caption entries were given")
    ds = Dataset()
    for i, (row, caps) in enumerate(zip(X, y)):
        caps = [caps] if isinstance(caps, str) else list(caps)
        if not caps:
            raise ValueError(f"row {i} has no captions")
        for c in caps:
            ds.add(f"c{i:06d}", row, c)
    return ds


class SeqCVAE(BaseEstimator):
    """Diverse caption generator with a per-word latent intention sequence.

    ``fit(X, y)`` takes condition vectors ``X`` (n, d) and, per row, one caption
    string or a list of them.  It pretrains the backward language model, then
    trains the variational model with the backward model frozen.

    ``predict(X)`` returns one caption per row (prior mean, greedy words);
    ``sample(X, k)`` returns ``k`` captions per row.
    """

    def __init__(
        self,
        variant="seq_cvae",
        latent_dim=16,
        hidden_dim=64,
        embed_dim=32,
        blm_hidden_dim=64,
        lr=1e-3,
        optimizer="adam",
        batch_size=32,
        max_steps=2000,
        kl_warmup=0.1,
        kl_anneal=True,
        aux_weight=5e-4,
        blm_steps=600,
        max_len=16,
        temperature=1.0,
        dtype="float32",
        random_state=0,
    ):
        self.variant = variant
        self.latent_dim = latent_dim
        self.hidden_dim = hidden_dim
        self.embed_dim = embed_dim
        self.blm_hidden_dim = blm_hidden_dim
        self.lr = lr
        self.optimizer = optimizer
        self.batch_size = batch_size
        self.max_steps = max_steps
        self.kl_warmup = kl_warmup
        self.kl_anneal = kl_anneal
        self.aux_weight = aux_weight
        self.blm_steps = blm_steps
        self.max_len = max_len
        self.temperature = temperature
        self.dtype = dtype
        self.random_state = random_state

    def _train_config(self, cond_dim: int) -> TrainConfig:
        known = {f.name for f in fields(TrainConfig)}
        kw = {k: v for k, v in self.get_params().items() if k in known}
        return TrainConfig(cond_dim=cond_dim, seed=int(self.random_state), eval_interval=max(1, self.max_steps // 4), **kw)

    def fit(self, X, y: Captions, eval_X=None, eval_y: Optional[Captions] = None):
        X = check_array(X, dtype=np.float64)
        data = _as_dataset(X, y)
        config = self._train_config(X.shape[1])
        self.vocab_ = build_vocab(data)
        blm = pretrain_backward_lm(data, self.vocab_, config)
        eval_ds = _as_dataset(check_array(eval_X, dtype=np.float64), eval_y) if eval_X is not None else None
        res = train(data, self.vocab_, config, blm.checkpoint, eval_ds)
        self.model_ = res.model
        self.checkpoint_ = res.checkpoint
        self.blm_losses_ = blm.losses
        self.history_ = res.metrics
        self.n_features_in_ = X.shape[1]
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("SeqCVAE instance is not fitted yet; call fit first")

    def _check_X(self, X) -> np.ndarray:
        self._check_fitted()
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, model was fitted with {self.n_features_in_}")
        return X

    def sample_sets(self, X, k: int = 20, seed: Optional[int] = None) -> List[SampleSet]:
        X = self._check_X(X)
        seed = self.random_state if seed is None else seed
        return [
            sample_captions(self.model_, row, k, self.temperature, self.max_len, seed, f"c{i:06d}", raw_text_vocab=self.vocab_)
            for i, row in enumerate(X)
        ]

    def sample(self, X, k: int = 20, seed: Optional[int] = None) -> List[List[str]]:
        return [ss.texts(self.vocab_) for ss in self.sample_sets(X, k, seed)]

    def predict(self, X) -> List[str]:
        X = self._check_X(X)
        out = []
        for i, row in enumerate(X):
            ss = sample_captions(self.model_, row, 1, 0.0, self.max_len, self.random_state, f"c{i:06d}", mean_mode=True)
            out.append(ss.texts(self.vocab_)[0])
        return out

    def score(self, X, y: Captions) -> float:
        """Negative per-token loss bound (higher is better) on held-out captions."""
        X = self._check_X(X)
        records = _as_dataset(X, y).records(self.vocab_, self.max_len)
        batch = make_batch(records, self.model_.dtype)
        lb = evaluate_loss(self.model_, batch, 1.0, self.random_state)
        return -(float(lb.reconstruction.data) + float(lb.kl.data)) * batch.size / float(batch.mask.sum())

    def save(self, path) -> None:
        self._check_fitted()
        save_checkpoint(self.checkpoint_, path)

    @classmethod
    def load(cls, path) -> "SeqCVAE":
        ckpt: Checkpoint = load_checkpoint(path)
        model, vocab, config = model_from_checkpoint(ckpt)
        known = cls._get_param_names()
        est = cls(**{k: v for k, v in config.to_dict().items() if k in known}, random_state=config.seed)
        est.model_, est.vocab_, est.checkpoint_ = model, vocab, ckpt
        est.n_features_in_ = config.cond_dim
        return est


__all__ = ["SeqCVAE"]
