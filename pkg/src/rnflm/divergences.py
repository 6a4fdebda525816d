"""KL, MMD and mutual-information estimators over latent codes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import autograd as ag
from .autograd import Tensor
from .errors import ContractError, ShapeError
from .flows import stack_forward

LOG_2PI = float(np.log(2.0 * np.pi))
SAMPLE_SOURCES = ("prior", "aggregate-posterior", "flow-image")


@dataclass
class DiagGaussian:
    mu: Tensor
    log_sigma: Tensor

    @property
    def sigma(self) -> Tensor:
        return ag.exp(self.log_sigma)


@dataclass
class SampleSet:
    samples: Tensor
    source: str = "prior"

    def __post_init__(self):
        self.samples = ag.astensor(self.samples)
        if self.source not in SAMPLE_SOURCES:
            raise ContractError(f"unknown sample source {self.source!r}")
        if self.samples.ndim != 2:
            raise ShapeError(f"SampleSet needs an n x d matrix, got {self.samples.shape}")


def kl_diag_gaussian_rows(q: DiagGaussian) -> Tensor:
    """Per-row ``KL(N(mu, sigma^2) || N(0, I))``."""
    ls = q.log_sigma
    terms = ag.square(q.mu) + ag.exp(2.0 * ls) - 1.0 - 2.0 * ls
    return 0.5 * ag.sum_(terms, axis=-1)


def kl_diag_gaussian(q: DiagGaussian) -> Tensor:
    """Closed-form KL to the standard normal, summed over all rows."""
    return ag.sum_(kl_diag_gaussian_rows(q))


def log_standard_normal(z: Tensor) -> Tensor:
    z = ag.astensor(z)
    return -0.5 * ag.sum_(ag.square(z), axis=-1) - 0.5 * z.shape[-1] * LOG_2PI


def _gaussian_gram(a: Tensor, b: Tensor) -> Tensor:
    diff = ag.reshape(a, (a.shape[0], 1, a.shape[1])) - ag.reshape(b, (1, b.shape[0], b.shape[1]))
    return ag.exp(-ag.sum_(ag.square(diff), axis=-1))


def _offdiag_mean(gram: Tensor) -> Tensor:
    n = gram.shape[0]
    return ag.sum_(gram * (1.0 - np.eye(n))) / (n * (n - 1))


def mmd_gaussian(x, y) -> Tensor:
    """Unbiased MMD^2 estimate with kernel ``exp(-|z - z'|^2)``.

    Within-set terms average over distinct pairs.  For equal sample sizes
    the cross term also skips ``i == j`` (the paired U-statistic), which is
    still unbiased for independent sets and makes ``mmd(x, x)`` exactly 0.
    """
    x = x.samples if isinstance(x, SampleSet) else ag.astensor(x)
    y = y.samples if isinstance(y, SampleSet) else ag.astensor(y)
    if x.shape[0] < 2 or y.shape[0] < 2:
        raise ContractError("mmd_gaussian: need at least two samples on each side")
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ShapeError(f"mmd_gaussian: incompatible sample shapes {x.shape} and {y.shape}")
    kxx = _offdiag_mean(_gaussian_gram(x, x))
    kyy = _offdiag_mean(_gaussian_gram(y, y))
    if x.shape[0] == y.shape[0]:
        kxy = _offdiag_mean(_gaussian_gram(x, y))
    else:
        kxy = ag.mean(_gaussian_gram(x, y))
    return kxx + kyy - 2.0 * kxy


@dataclass
class MIEstimate:
    value: float
    stderr: float
    expected_kl: float
    marginal_kl: float

    @property
    def reported(self) -> float:
        return max(self.value, 0.0)


def mutual_information_from_posteriors(mu, log_sigma, m: int = 512, rng: np.random.Generator | None = None,
                                       flows=None) -> MIEstimate:
    """Monte-Carlo ``I(z; x) = E_x KL(q(z|x) || p) - KL(q(z) || p)``.

    ``q(z)`` is the mixture of the ``B`` given posteriors and its KL to the
    standard-normal prior is estimated from ``m`` mixture samples, components
    taken round-robin with one reparameterized draw each.  The first term is
    closed form.

    With a flow stack, densities are those of ``z' = F(z)`` (each corrected
    by the stack log-determinant) against a standard normal in ``z'`` space;
    the first term is then estimated on the same samples.
    """
    if m < 100:
        raise ContractError(f"mutual_information: need m >= 100 samples, got {m}")
    rng = rng if rng is not None else np.random.default_rng(0)
    mu = np.asarray(mu, dtype=np.float64)
    log_sigma = np.asarray(log_sigma, dtype=np.float64)
    batch, dim = mu.shape
    sigma = np.exp(log_sigma)
    comp = np.arange(m) % batch
    z = mu[comp] + sigma[comp] * rng.standard_normal((m, dim))
    # log N(z_s; mu_b, sigma_b) for every sample s and component b
    std = (z[:, None, :] - mu[None, :, :]) / sigma[None, :, :]
    log_comp = -0.5 * np.sum(std**2, axis=2) - np.sum(log_sigma, axis=1)[None, :] - 0.5 * dim * LOG_2PI
    log_mix = logsumexp(log_comp, axis=1) - np.log(batch)
    if flows is None or len(flows) == 0:
        expected_kl = float(np.mean(0.5 * np.sum(mu**2 + sigma**2 - 1.0 - 2.0 * log_sigma, axis=1)))
        diffs = log_mix - log_standard_normal(z).data
        marginal_kl = float(np.mean(diffs))
        stderr = float(np.std(diffs, ddof=1) / np.sqrt(m))
        return MIEstimate(expected_kl - marginal_kl, stderr, expected_kl, marginal_kl)
    with ag.no_grad():
        z_img, logdet = stack_forward(flows, Tensor(z))
    log_p = log_standard_normal(z_img).data
    own = log_comp[np.arange(m), comp] - logdet.data
    mix = log_mix - logdet.data
    per_sample = own - mix
    return MIEstimate(
        float(np.mean(per_sample)),
        float(np.std(per_sample, ddof=1) / np.sqrt(m)),
        float(np.mean(own - log_p)),
        float(np.mean(mix - log_p)),
    )
