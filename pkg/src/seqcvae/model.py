"""Sequential conditional VAE with a per-position latent ("intention") space.

Three recurrent networks are trained jointly:

* the decoder, an LSTM over ``[embed(x_{t-1}), z_t, I]`` emitting word logits;
* the intention model (learned prior), an LSTM over
  ``[z_{t-1}, embed(x_{t-1}), I]`` emitting a diagonal Gaussian over ``z_t``;
* the two-stage encoder, combining a forward LSTM over ``x_{<=t}`` with the
  hidden state of a frozen backward language model over ``x_{>=t}``.

The encoder mean is additionally regressed onto the backward state through a
small MLP ``g``; that penalty, weighted by ``aux_weight``, is added to the loss.
"""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, ShapeError, Tensor
from .blocks import (
    MLP,
    Embedding,
    GaussianHead,
    GaussianParams,
    Linear,
    LSTMCell,
    LstmState,
    gaussian_log_density,
    kl_diag_gaussian,
    masked_update,
    reparameterize,
    standard_normal_params,
)
from .corpus import BOS, EOS, PAD, UNK, CaptionRecord


class Variant(str, enum.Enum):
    SEQ_CVAE = "seq_cvae"
    SEQ_CVAE_BRNN = "seq_cvae_brnn"
    SEQ_CVAE_PRIOR_NOX = "seq_cvae_prior_nox"
    SEQ_CVAE_CONST_PRIOR = "seq_cvae_const_prior"
    CVAE_SINGLE_Z = "cvae_single_z"
    ZFORCING_SHARED = "zforcing_shared"

    @classmethod
    def parse(cls, value) -> "Variant":
        if isinstance(value, cls):
            return value
        v = str(value).lower()
        for member in cls:
            if v in (member.value, member.name.lower()):
                return member
        raise ValueError(f"unknown variant {value!r}; choose from {[m.value for m in cls]}")


DEFAULT_AUX_WEIGHT = 5e-4


@dataclass
class ModelConfig:
    vocab_size: int
    variant: Variant = Variant.SEQ_CVAE
    latent_dim: int = 512
    hidden_dim: int = 512
    embed_dim: int = 512
    cond_dim: int = 512
    blm_hidden_dim: int = 512
    blm_embed_dim: Optional[int] = None
    g_hidden_dim: Optional[int] = None
    aux_weight: float = DEFAULT_AUX_WEIGHT
    dtype: str = "float32"

    def __post_init__(self):
        self.variant = Variant.parse(self.variant)
        for name in ("vocab_size", "latent_dim", "hidden_dim", "embed_dim", "cond_dim", "blm_hidden_dim"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.aux_weight < 0:
            raise ValueError("aux_weight must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        return d


@dataclass
class Batch:
    """``tokens`` is (B, T+1) with BOS in column 0; ``mask`` is (B, T) over x_1..x_T."""

    tokens: np.ndarray
    mask: np.ndarray
    cond: np.ndarray
    lengths: np.ndarray

    @property
    def size(self) -> int:
        return self.tokens.shape[0]

    @property
    def steps(self) -> int:
        return self.tokens.shape[1] - 1


def make_batch(records: Sequence[CaptionRecord], dtype=np.float64, pad_to: Optional[int] = None) -> Batch:
    if not records:
        raise ValueError("empty batch")
    T = max(r.length for r in records)
    if pad_to is not None:
        T = max(T, pad_to)
    B = len(records)
    tokens = np.full((B, T + 1), PAD, dtype=np.int64)
    mask = np.zeros((B, T), dtype=dtype)
    for i, r in enumerate(records):
        tokens[i, : len(r.tokens)] = r.tokens
        mask[i, : r.length] = 1.0
    cond = np.stack([np.asarray(r.condition, dtype=dtype) for r in records])
    return Batch(tokens, mask, cond, np.array([r.length for r in records]))


@dataclass
class LossBreakdown:
    reconstruction: Tensor
    kl: Tensor
    aux: Tensor
    kl_weight: float
    total: Tensor
    n_tokens: float = 0.0
    aux_by_pos: np.ndarray = field(default_factory=lambda: np.zeros(0))
    kl_by_pos: np.ndarray = field(default_factory=lambda: np.zeros(0))
    pos_counts: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def values(self) -> Dict[str, float]:
        return {
            "recon": float(self.reconstruction.data),
            "kl": float(self.kl.data),
            "aux": float(self.aux.data),
            "kl_weight": float(self.kl_weight),
            "total": float(self.total.data),
        }


@dataclass
class StepTerms:
    """Per-position quantities of one pass, each entry shaped (B,) or (B, Z)."""

    recon: List[Tensor] = field(default_factory=list)
    kl: List[Tensor] = field(default_factory=list)
    aux: List[Tensor] = field(default_factory=list)
    z: List[Tensor] = field(default_factory=list)
    q: List[GaussianParams] = field(default_factory=list)
    p: List[GaussianParams] = field(default_factory=list)
    mask: Optional[np.ndarray] = None


class BackwardLM:
    """Right-to-left LSTM whose state at position t summarises x_t..x_T.

    Trained to predict the preceding token x_{t-1} from that state.
    """

    def __init__(self, store: ParameterStore, vocab_size: int, embed_dim: int, hidden_dim: int, prefix: str = "blm"):
        self.prefix = prefix
        self.hidden_dim = hidden_dim
        self.vocab_size = vocab_size
        self.embed = Embedding(store, f"{prefix}.embed", vocab_size, embed_dim)
        self.cell = LSTMCell(store, f"{prefix}.lstm", embed_dim, hidden_dim)
        self.out = Linear(store, f"{prefix}.out", hidden_dim, vocab_size)

    def encode(self, batch: Batch) -> List[Tensor]:
        """States h^B_1..h^B_T (index 0 is position 1); zero at padded positions."""
        tokens = np.where(batch.tokens >= self.vocab_size, UNK, batch.tokens)
        state = self.cell.initial_state(batch.size)
        out: List[Optional[Tensor]] = [None] * batch.steps
        for t in range(batch.steps, 0, -1):
            new = self.cell.step(self.embed(tokens[:, t]), state)
            state = masked_update(new, state, batch.mask[:, t - 1])
            out[t - 1] = state.h
        return out

    def loss(self, batch: Batch) -> Tuple[Tensor, float]:
        """Summed cross-entropy of predicting x_{t-1} from h^B_t, and the token count."""
        states = self.encode(batch)
        total = None
        for t in range(1, batch.steps + 1):
            xe = ad.softmax_xent(self.out(states[t - 1]), batch.tokens[:, t - 1], batch.mask[:, t - 1])
            s = ad.tsum(xe)
            total = s if total is None else ad.add(total, s)
        return total, float(batch.mask.sum())


class SeqCVAEModel:
    """Parameters and forward passes for every model variant."""

    def __init__(self, config: ModelConfig, seed: int = 0, store: Optional[ParameterStore] = None):
        self.config = config
        c = config
        self.variant = c.variant
        self.dtype = np.dtype(c.dtype)
        self.store = store if store is not None else ParameterStore(seed, self.dtype)
        V, Z, H, E, D, HB = c.vocab_size, c.latent_dim, c.hidden_dim, c.embed_dim, c.cond_dim, c.blm_hidden_dim
        s = self.store
        self.blm = BackwardLM(s, V, c.blm_embed_dim or E, HB)

        shared = self.variant is Variant.ZFORCING_SHARED
        self.dec_embed = Embedding(s, "dec.embed", V, E)
        self.dec_cell = LSTMCell(s, "dec.lstm", E + Z + D, H)
        self.dec_out = Linear(s, "dec.out", H, V)

        self.int_embed = self.int_cell = self.int_head = None
        if self.variant in (Variant.SEQ_CVAE, Variant.SEQ_CVAE_BRNN, Variant.SEQ_CVAE_PRIOR_NOX):
            self.int_embed = Embedding(s, "int.embed", V, E)
            self.int_cell = LSTMCell(s, "int.lstm", Z + E + D, H)
            self.int_head = GaussianHead(s, "int.head", H, Z)
        elif shared:
            self.int_head = GaussianHead(s, "int.head", H + D, Z)

        self.enc_embed = self.enc_cell = None
        if not shared:
            self.enc_embed = Embedding(s, "enc.embed", V, E)
            self.enc_cell = LSTMCell(s, "enc.lstm", E, H)
        if self.variant is Variant.CVAE_SINGLE_Z:
            enc_in = H + HB + D
        else:
            enc_in = Z + H + HB + D
        self.enc_mlp = MLP(s, "enc.mlp", [enc_in, H], ["tanh"])
        self.enc_head = GaussianHead(s, "enc.head", H, Z)
        gh = c.g_hidden_dim if c.g_hidden_dim is not None else HB
        self.g = MLP(s, "g", [Z, gh, HB]) if gh > 0 else MLP(s, "g", [Z, HB])

    # -- sizes / helpers ---------------------------------------------------

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    @property
    def single_latent(self) -> bool:
        return self.variant is Variant.CVAE_SINGLE_Z

    def trainable_names(self, include_blm: bool = False) -> List[str]:
        return [n for n in self.store.names() if include_blm or not n.startswith("blm.")]

    def _const(self, arr) -> Tensor:
        return ad.Tensor(np.asarray(arr, dtype=self.dtype))

    def _check_latent(self, z: Tensor):
        if z.shape[-1] != self.latent_dim:
            raise ShapeError(f"latent dim {z.shape[-1]} != configured {self.latent_dim}")

    def _check_cond(self, cond: Tensor):
        if cond.shape[-1] != self.config.cond_dim:
            raise ShapeError(f"condition dim {cond.shape[-1]} != configured {self.config.cond_dim}")

    def initial_state(self, batch: int) -> Dict[str, LstmState]:
        st = {"dec": self.dec_cell.initial_state(batch)}
        if self.int_cell is not None:
            st["int"] = self.int_cell.initial_state(batch)
        if self.enc_cell is not None:
            st["enc"] = self.enc_cell.initial_state(batch)
        return st

    # -- single steps --------------------------------------------------------

    def decoder_step(self, prev_token, z_t: Tensor, cond: Tensor, state: LstmState) -> Tuple[Tensor, LstmState]:
        """Logits over the vocabulary for x_t given x_{t-1}, z_t and I."""
        self._check_latent(z_t)
        self._check_cond(cond)
        inp = ad.concat([self.dec_embed(np.asarray(prev_token)), z_t, cond])
        state = self.dec_cell.step(inp, state)
        return self.dec_out(state.h), state

    def intention_step(
        self, z_prev: Tensor, x_prev, cond: Tensor, state: Optional[LstmState]
    ) -> Tuple[GaussianParams, Optional[LstmState]]:
        """Prior over z_t given z_{t-1}, x_{t-1}, I and the recurrent state."""
        self._check_latent(z_prev)
        self._check_cond(cond)
        B = z_prev.shape[0]
        if self.variant in (Variant.SEQ_CVAE_CONST_PRIOR, Variant.CVAE_SINGLE_Z):
            return standard_normal_params(B, self.latent_dim, self.dtype), state
        if self.variant is Variant.ZFORCING_SHARED:
            # ``state`` is the shared LSTM state h_{t-1}
            return self.int_head(ad.concat([state.h, cond])), state
        if self.variant is Variant.SEQ_CVAE_PRIOR_NOX:
            emb = self._const(np.zeros((B, self.config.embed_dim)))
        else:
            emb = self.int_embed(np.asarray(x_prev))
        state = self.int_cell.step(ad.concat([z_prev, emb, cond]), state)
        return self.int_head(state.h), state

    def encoder_step(self, z_prev: Optional[Tensor], hF_t: Tensor, hB_t: Tensor, cond: Tensor) -> Tuple[GaussianParams, Tensor]:
        """Posterior over z_t and the unweighted regression distance ||g(mu) - h^B_t||^2."""
        parts = [hF_t, hB_t, cond] if self.single_latent else [z_prev, hF_t, hB_t, cond]
        q = self.enc_head(self.enc_mlp(ad.concat(parts)))
        hB_const = ad.Tensor(hB_t.data) if not hB_t.requires_grad else hB_t
        dist = ad.sq_l2(ad.sub(self.g(q.mean), hB_const))
        return q, dist

    def backward_lm_encode(self, batch: Batch, frozen: bool = True) -> List[Tensor]:
        if frozen:
            with ad.no_grad():
                states = self.blm.encode(batch)
            return [ad.Tensor(h.data) for h in states]
        return self.blm.encode(batch)

    # -- generation-time stepping (variant aware) ---------------------------

    def gen_prior(self, gen_state: Dict[str, LstmState], z_prev: Tensor, x_prev, cond: Tensor) -> GaussianParams:
        if self.variant is Variant.ZFORCING_SHARED:
            p, _ = self.intention_step(z_prev, x_prev, cond, gen_state["dec"])
            return p
        p, st = self.intention_step(z_prev, x_prev, cond, gen_state.get("int"))
        if st is not None:
            gen_state["int"] = st
        return p

    def gen_decode(self, gen_state: Dict[str, LstmState], x_prev, z_t: Tensor, cond: Tensor) -> Tensor:
        logits, gen_state["dec"] = self.decoder_step(x_prev, z_t, cond, gen_state["dec"])
        return logits

    # -- full passes -------------------------------------------------------

    def draw_eps(self, batch: Batch, rng: np.random.Generator) -> np.ndarray:
        steps = 1 if self.single_latent else batch.steps
        return rng.standard_normal((steps, batch.size, self.latent_dim)).astype(self.dtype)

    def run(self, batch: Batch, eps: np.ndarray, frozen_blm: bool = True, use_mean: bool = False) -> StepTerms:
        """Teacher-forced pass with posterior samples ``mean + std * eps``."""
        cond = self._const(batch.cond)
        self._check_cond(cond)
        B, T = batch.size, batch.steps
        hB = self.backward_lm_encode(batch, frozen_blm)
        terms = StepTerms(mask=batch.mask)
        toks = batch.tokens
        if self.single_latent:
            return self._run_single(batch, eps, cond, hB, terms, use_mean)

        state = self.initial_state(B)
        z_prev = self._const(np.zeros((B, self.latent_dim)))
        for t in range(1, T + 1):
            m = batch.mask[:, t - 1]
            x_prev, x_t = toks[:, t - 1], toks[:, t]
            if self.variant is Variant.ZFORCING_SHARED:
                hF = state["dec"].h
                p = self.intention_step(z_prev, x_prev, cond, state["dec"])[0]
            else:
                state["enc"] = self.enc_cell.step(self.enc_embed(x_t), state["enc"])
                hF = state["enc"].h
                p, st = self.intention_step(z_prev, x_prev, cond, state.get("int"))
                if st is not None:
                    state["int"] = st
            q, dist = self.encoder_step(z_prev, hF, hB[t - 1], cond)
            z = q.mean if use_mean else reparameterize(q, eps[t - 1])
            logits, state["dec"] = self.decoder_step(x_prev, z, cond, state["dec"])
            mt = self._const(m)
            terms.recon.append(ad.softmax_xent(logits, x_t, m))
            terms.kl.append(ad.mul(kl_diag_gaussian(q, p), mt))
            terms.aux.append(ad.mul(dist, mt))
            terms.z.append(z)
            terms.q.append(q)
            terms.p.append(p)
            z_prev = z
        return terms

    def _run_single(self, batch, eps, cond, hB, terms, use_mean):
        B, T = batch.size, batch.steps
        st = self.enc_cell.initial_state(B)
        for t in range(1, T + 1):
            new = self.enc_cell.step(self.enc_embed(batch.tokens[:, t]), st)
            st = masked_update(new, st, batch.mask[:, t - 1])
        q, dist = self.encoder_step(None, st.h, hB[0], cond)
        p = standard_normal_params(B, self.latent_dim, self.dtype)
        z = q.mean if use_mean else reparameterize(q, eps[0])
        terms.kl.append(kl_diag_gaussian(q, p))
        terms.aux.append(dist)
        terms.z.append(z)
        terms.q.append(q)
        terms.p.append(p)
        dec = self.dec_cell.initial_state(B)
        for t in range(1, T + 1):
            logits, dec = self.decoder_step(batch.tokens[:, t - 1], z, cond, dec)
            terms.recon.append(ad.softmax_xent(logits, batch.tokens[:, t], batch.mask[:, t - 1]))
        return terms

    def elbo_loss(
        self,
        batch: Batch,
        kl_weight: float = 1.0,
        eps: Optional[np.ndarray] = None,
        rng: Optional[np.random.Generator] = None,
        frozen_blm: bool = True,
    ) -> LossBreakdown:
        """Negative annealed bound plus the weighted regression penalty, batch-averaged."""
        if batch.size == 0:
            raise ValueError("empty batch")
        if eps is None:
            eps = self.draw_eps(batch, rng if rng is not None else np.random.default_rng(0))
        terms = self.run(batch, eps, frozen_blm)
        return self.summarize(terms, batch, kl_weight)

    def summarize(self, terms: StepTerms, batch: Batch, kl_weight: float) -> LossBreakdown:
        inv_b = np.asarray(1.0 / batch.size, dtype=self.dtype)

        def total_of(xs: List[Tensor]) -> Tensor:
            acc = None
            for x in xs:
                acc = x if acc is None else ad.add(acc, x)
            return ad.mul(ad.tsum(acc), inv_b)

        recon = total_of(terms.recon)
        kl = total_of(terms.kl)
        aux = ad.mul(total_of(terms.aux), np.asarray(self.config.aux_weight, dtype=self.dtype))
        total = ad.add(ad.add(recon, ad.mul(kl, np.asarray(kl_weight, dtype=self.dtype))), aux)
        counts = batch.mask.sum(axis=0)
        if self.single_latent:
            n = float(batch.size)
            aux_pos = np.array([terms.aux[0].data.sum() / n])
            kl_pos = np.array([terms.kl[0].data.sum() / n])
        else:
            safe = np.maximum(counts, 1)
            aux_pos = np.array([a.data.sum() for a in terms.aux]) / safe
            kl_pos = np.array([k.data.sum() for k in terms.kl]) / safe
        return LossBreakdown(
            recon, kl, aux, float(kl_weight), total, float(batch.mask.sum()), aux_pos, kl_pos, counts
        )

    def single_z_variant_loss(self, batch: Batch, kl_weight: float = 1.0, eps=None, rng=None) -> LossBreakdown:
        if not self.single_latent:
            raise ValueError("single_z_variant_loss requires the cvae_single_z variant")
        return self.elbo_loss(batch, kl_weight, eps, rng)

    # -- likelihood estimates (no gradients) --------------------------------

    def log_weights(self, batch: Batch, eps: np.ndarray) -> Dict[str, np.ndarray]:
        """Per-item ``ln p(x|z) + ln p(z) - ln q(z|x)`` and its parts for one draw."""
        with ad.no_grad():
            terms = self.run(batch, eps)
        log_px = -sum(r.data for r in terms.recon)
        kl = sum(k.data for k in terms.kl)
        log_pz = np.zeros(batch.size)
        log_qz = np.zeros(batch.size)
        masks = [np.ones(batch.size)] if self.single_latent else [batch.mask[:, t] for t in range(batch.steps)]
        for z, q, p, m in zip(terms.z, terms.q, terms.p, masks):
            log_qz += m * gaussian_log_density(z.data, q.mean.data, q.log_var.data)
            log_pz += m * gaussian_log_density(z.data, p.mean.data, p.log_var.data)
        return {"log_px": log_px, "log_pz": log_pz, "log_qz": log_qz, "kl": kl, "log_w": log_px + log_pz - log_qz}


__all__ = [
    "Variant",
    "ModelConfig",
    "Batch",
    "make_batch",
    "LossBreakdown",
    "StepTerms",
    "BackwardLM",
    "SeqCVAEModel",
    "DEFAULT_AUX_WEIGHT",
]
