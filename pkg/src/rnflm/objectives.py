"""Training and evaluation objectives.

All losses are averaged per sentence.  ``LossBreakdown.total`` is always the
exact recombination of the reported components under the active objective.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import Batch
from .divergences import DiagGaussian, kl_diag_gaussian_rows, log_standard_normal, mmd_gaussian
from .errors import ContractError
from .nets import TextVAE, reparameterize
from .rnf import ClusterSet, KernelConfig, stack_forward_regularized


@dataclass(frozen=True)
class AnnealSchedule:
    """Linear ramp of the KL weight ``alpha``; the MMD weight is ``lambda_base - alpha``."""

    alpha_start: float = 0.0
    alpha_end: float = 0.8
    ramp_epochs: int = 21
    lambda_base: float = 10.0

    def alpha(self, epoch: float) -> float:
        if epoch <= 0:
            return self.alpha_start
        if epoch >= self.ramp_epochs:
            return self.alpha_end
        return self.alpha_start + (self.alpha_end - self.alpha_start) * epoch / self.ramp_epochs


def anneal(epoch: float, sched: AnnealSchedule = AnnealSchedule()) -> tuple[float, float]:
    alpha = sched.alpha(epoch)
    return alpha, sched.lambda_base - alpha


@dataclass
class LossBreakdown:
    nll: Tensor  # reconstruction, nats / sentence
    kl: Tensor
    total: Tensor
    mmd: Tensor | None = None
    sum_raw_logdet: Tensor | None = None
    sum_reg_logdet: Tensor | None = None
    weights: dict[str, float] = field(default_factory=dict)
    n_tokens: int = 0
    n_sentences: int = 0

    def values(self) -> dict[str, float | None]:
        def val(t):
            return None if t is None else float(t.data)

        return {"nll": val(self.nll), "kl": val(self.kl), "mmd": val(self.mmd),
                "log_j_raw": val(self.sum_raw_logdet), "log_j_reg": val(self.sum_reg_logdet),
                "total": val(self.total)}


@dataclass
class StepNoise:
    """Random inputs of one objective evaluation, drawn up front for replayability."""

    eps: np.ndarray
    prior: np.ndarray | None = None
    dropout_rng: np.random.Generator | None = None

    @classmethod
    def draw(cls, rng: np.random.Generator, batch_size: int, latent: int, prior_samples: int = 0,
             dropout: bool = True) -> "StepNoise":
        eps = rng.standard_normal((batch_size, latent))
        prior = rng.standard_normal((prior_samples, latent)) if prior_samples else None
        drop = np.random.default_rng(rng.integers(2**63)) if dropout else None
        return cls(eps, prior, drop)


def _encode_sample(model: TextVAE, batch: Batch, noise: StepNoise, train: bool):
    q = model.encode(batch, train=train, rng=noise.dropout_rng)
    return q, reparameterize(q, noise.eps)


def elbo(model: TextVAE, batch: Batch, noise: StepNoise, beta: float = 1.0, train: bool = True,
         bypass_flows: bool = False) -> LossBreakdown:
    """Negative ELBO: ``NLL_recon + beta * KL`` with the closed-form Gaussian KL.

    ``bypass_flows`` decodes straight from ``z_0`` and leaves any flow stack
    untouched (used for plain-VAE pre-training of a flow model).
    """
    if len(model.flows) and not bypass_flows:
        raise ContractError("elbo expects a model without flows; use flow_elbo")
    q, z = _encode_sample(model, batch, noise, train)
    dec = model.decode_teacher_forced(z, batch, rng=noise.dropout_rng)
    nll = -ag.mean(dec.sentence_ll)
    kl = ag.mean(kl_diag_gaussian_rows(q))
    return LossBreakdown(nll, kl, nll + beta * kl, weights={"beta": beta},
                         n_tokens=dec.n_tokens, n_sentences=batch.size)


def flow_kl_rows(q: DiagGaussian, z0: Tensor, zT: Tensor, sum_raw_logdet: Tensor) -> Tensor:
    """Single-sample ``log q_T(z_T|x) - log p(z_T)`` per row.

    Written as the closed-form KL of ``q(z_0|x)`` plus the correction
    ``log p(z_0) - log p(z_T) - sum log|det|``, which is exactly zero for an
    identity stack.
    """
    shift = log_standard_normal(z0) - log_standard_normal(zT)
    return kl_diag_gaussian_rows(q) + shift - sum_raw_logdet


def flow_elbo(model: TextVAE, batch: Batch, noise: StepNoise, beta: float = 1.0, train: bool = True) -> LossBreakdown:
    """Negative flow ELBO with one reparameterized sample per sentence.

    The reported ``kl`` is the single-sample estimate of KL(q(z_T|x) || p(z_T)):
    closed-form KL(q(z_0|x) || p) + [log p(z_0) - log p(z_T)] - sum log|det|.
    With identity flows the correction terms vanish exactly and this equals
    :func:`elbo`.
    """
    q, z0 = _encode_sample(model, batch, noise, train)
    zT, raw, _ = stack_forward_regularized(model.flows, z0, None, None)
    dec = model.decode_teacher_forced(zT, batch, rng=noise.dropout_rng)
    nll = -ag.mean(dec.sentence_ll)
    kl = ag.mean(flow_kl_rows(q, z0, zT, raw))
    return LossBreakdown(nll, kl, nll + beta * kl, sum_raw_logdet=ag.mean(raw), weights={"beta": beta},
                         n_tokens=dec.n_tokens, n_sentences=batch.size)


def wae_rnf_loss(model: TextVAE, batch: Batch, noise: StepNoise, alpha: float, lam: float,
                 clusters: ClusterSet | None = None, kernel: KernelConfig | None = None,
                 train: bool = True) -> LossBreakdown:
    """``NLL(x | z') + lam * MMD(z_0, prior) + alpha * (KL - mean sum log|det df'/dz|)``.

    MMD compares pre-flow posterior samples with standard-normal prior
    samples.  With clusters the log-dets are kernel regularized; without them
    raw log-dets are used (plain WAE-NF, or WAE when there are no flows).
    """
    if noise.prior is None:
        raise ContractError("wae_rnf_loss needs prior samples")
    if clusters is not None and kernel is None:
        raise ContractError("kernel config required with clusters")
    q, z0 = _encode_sample(model, batch, noise, train)
    zT, raw, reg = stack_forward_regularized(model.flows, z0, clusters, kernel)
    dec = model.decode_teacher_forced(zT, batch, rng=noise.dropout_rng)
    nll = -ag.mean(dec.sentence_ll)
    kl = ag.mean(kl_diag_gaussian_rows(q))
    mmd = mmd_gaussian(z0, Tensor(noise.prior))
    raw_mean = ag.mean(raw)
    reg_mean = ag.mean(reg) if reg is not None else None
    logdet_term = reg_mean if reg_mean is not None else raw_mean
    total = nll + lam * mmd + alpha * (kl - logdet_term)
    has_flows = len(model.flows) > 0
    return LossBreakdown(nll, kl, total, mmd=mmd, sum_raw_logdet=raw_mean if has_flows else None,
                         sum_reg_logdet=reg_mean if has_flows else None,
                         weights={"alpha": alpha, "lambda": lam}, n_tokens=dec.n_tokens,
                         n_sentences=batch.size)


def recombine(lb: LossBreakdown, objective: str) -> float:
    """Recompute ``total`` from the reported components (float arithmetic)."""
    v = lb.values()
    if objective in ("vae", "vae-nf"):
        return v["nll"] + lb.weights["beta"] * v["kl"]
    logdet = v["log_j_reg"] if v["log_j_reg"] is not None else (v["log_j_raw"] or 0.0)
    if objective == "wae-nf":
        logdet = v["log_j_raw"]
    elif objective == "wae":
        logdet = 0.0
    return v["nll"] + lb.weights["lambda"] * v["mmd"] + lb.weights["alpha"] * (v["kl"] - logdet)


@dataclass
class SentenceTerms:
    """Per-sentence evaluation quantities (no graph)."""

    rec_nll: np.ndarray
    kl: np.ndarray  # single-sample KL(q(z_T|x) || p), closed form without flows
    raw_logdet: np.ndarray | None
    reg_logdet: np.ndarray | None
    z0: np.ndarray
    mu: np.ndarray
    log_sigma: np.ndarray
    n_tokens: int


def sentence_terms(model: TextVAE, batch: Batch, eps: np.ndarray, use_flows: bool = True,
                   clusters: ClusterSet | None = None, kernel: KernelConfig | None = None) -> SentenceTerms:
    """Eval-mode terms of the flow ELBO for each sentence of ``batch``."""
    with ag.no_grad():
        q = model.encode(batch, train=False)
        z0 = reparameterize(q, eps)
        kl = kl_diag_gaussian_rows(q).data
        raw = reg = None
        zT = z0
        if use_flows and len(model.flows):
            zT, raw_t, reg_t = stack_forward_regularized(model.flows, z0, clusters, kernel)
            raw = raw_t.data
            reg = None if reg_t is None else reg_t.data
            kl = flow_kl_rows(q, z0, zT, raw_t).data
        dec = model.decode_teacher_forced(zT, batch)
    return SentenceTerms(-dec.sentence_ll.data, kl, raw, reg, z0.data, q.mu.data, q.log_sigma.data, dec.n_tokens)
