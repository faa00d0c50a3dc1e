"""Toy-sized gradient checking of the full loss."""
from __future__ import annotations

from typing import Dict

import numpy as np

from . import autodiff as ad
from .corpus import BOS, EOS, CaptionRecord
from .model import ModelConfig, SeqCVAEModel, make_batch
from .rngs import substream

TOY_SIZES = dict(vocab_size=12, latent_dim=4, hidden_dim=8, embed_dim=6, cond_dim=5, blm_hidden_dim=8)


def toy_model(variant="seq_cvae", seed: int = 0, scale: float = 0.5) -> SeqCVAEModel:
    """Float64 toy model with every parameter redrawn from N(0, scale^2).

    The default initialisation leaves many gradient entries near 1e-7, where
    central differences on an O(10) loss are dominated by rounding; larger
    weights keep every entry well above that floor.
    """
    cfg = ModelConfig(variant=variant, aux_weight=0.5, dtype="float64", **TOY_SIZES)
    model = SeqCVAEModel(cfg, seed=seed)
    rng = substream(seed, "toy-weights")
    for name in model.store.names():
        t = model.store[name]
        t.data = rng.normal(0.0, scale, t.shape)
    return model


def toy_batch(seed: int = 0, lengths=(3, 2, 3, 1)):
    """Four captions of at most 3 generated tokens over a 12-word vocabulary."""
    rng = substream(seed, "toy-batch")
    recs = []
    for L in lengths:
        body = rng.integers(4, TOY_SIZES["vocab_size"], size=L - 1)
        toks = (BOS, *(int(t) for t in body), EOS)
        recs.append(CaptionRecord(toks, rng.standard_normal(TOY_SIZES["cond_dim"]), ""))
    return make_batch(recs, np.float64)


def toy_gradcheck(variant="seq_cvae", seed: int = 0, eps: float = 1e-4, kl_weight: float = 0.7) -> Dict[str, float]:
    """Max relative gradient error per trainable parameter on the toy problem."""
    model = toy_model(variant, seed)
    batch = toy_batch(seed)
    noise = model.draw_eps(batch, substream(seed, "toy-eps"))
    return ad.grad_check(lambda: model.elbo_loss(batch, kl_weight, eps=noise).total, model.store, eps=eps, names=model.trainable_names())


__all__ = ["TOY_SIZES", "toy_model", "toy_batch", "toy_gradcheck"]
