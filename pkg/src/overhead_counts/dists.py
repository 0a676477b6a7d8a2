"""Count distributions: negative log-likelihoods, gradients and the softplus link.

Three families model the count of each category independently:

- Poisson(λ)
- negative binomial in mean-dispersion form, NB(r, m), variance m + m²/r
- Gaussian(μ, σ) evaluated as a density at the integer count

Network heads emit unconstrained values; ``link`` maps them through softplus
and floors them at ``PARAM_FLOOR``. Every scalar function broadcasts over numpy
arrays and returns a float for scalar input.
"""

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import digamma, expit, gammaln

from .constants import FAMILIES, FAMILY_HEADS, PARAM_FLOOR, SOFTPLUS_LINEAR_CUTOFF
from .errors import DomainError, NumericError, ShapeError

_LOG_2PI = math.log(2.0 * math.pi)


def _out(value: np.ndarray) -> np.ndarray | float:
    return float(value) if np.ndim(value) == 0 else value


def _check_positive(name: str, value: np.ndarray) -> None:
    if not np.all(value > 0):
        raise DomainError(f"{name} must be strictly positive (min {np.min(value)})")


def _check_counts(k: np.ndarray) -> None:
    if np.any(k < 0):
        raise DomainError(f"counts must be non-negative (min {np.min(k)})")


# =============================================================================
# Link
# =============================================================================

def softplus(x):
    """ln(1 + e^x), overflow-safe; linear regime above the cutoff."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NumericError("softplus input must be finite")
    big = np.maximum(x, SOFTPLUS_LINEAR_CUTOFF)
    small = np.minimum(x, SOFTPLUS_LINEAR_CUTOFF)
    out = np.where(x > SOFTPLUS_LINEAR_CUTOFF, big + np.exp(-big), np.log1p(np.exp(small)))
    return _out(out)


def softplus_grad(x):
    """Derivative of softplus: the logistic function."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NumericError("softplus input must be finite")
    return _out(expit(x))


# =============================================================================
# Parameters
# =============================================================================

@dataclass(eq=False)
class CountParams:
    """Per-category distribution parameters.

    ``mean`` holds λ (Poisson), m (NB) or μ (Gaussian); ``spread`` holds r
    (NB dispersion) or σ (Gaussian standard deviation) and is None for
    Poisson. Arrays are C-vectors or N x C batches.
    """

    family: str
    mean: np.ndarray
    spread: np.ndarray | None = None

    def __post_init__(self):
        self.family = FAMILIES.normalize(self.family)
        self.mean = np.asarray(self.mean, dtype=np.float64)
        _check_positive(f"{self.family} mean", self.mean)
        needs_spread = FAMILY_HEADS[self.family] == 2
        if needs_spread != (self.spread is not None):
            raise ShapeError(
                f"{self.family} takes {FAMILY_HEADS[self.family]} parameter vector(s)"
            )
        if self.spread is not None:
            self.spread = np.asarray(self.spread, dtype=np.float64)
            if self.spread.shape != self.mean.shape:
                raise ShapeError(
                    f"Parameter shapes differ: {self.mean.shape} vs {self.spread.shape}"
                )
            _check_positive(f"{self.family} spread", self.spread)

    @property
    def category_count(self) -> int:
        return self.mean.shape[-1]

    @property
    def dispersion(self) -> np.ndarray | None:
        return self.spread if self.family == "nb" else None

    @property
    def stddev(self) -> np.ndarray | None:
        return self.spread if self.family == "gaussian" else None

    def row(self, index: int) -> "CountParams":
        """Parameters of one sample from a batch."""
        spread = self.spread[index] if self.spread is not None else None
        return CountParams(self.family, self.mean[index], spread)


def link(family: str, raw: Sequence[np.ndarray]) -> CountParams:
    """Map raw head outputs to parameters: softplus, floored at ``PARAM_FLOOR``."""
    family = FAMILIES.normalize(family)
    if len(raw) != FAMILY_HEADS[family]:
        raise ShapeError(f"{family} expects {FAMILY_HEADS[family]} head output(s), got {len(raw)}")
    values = [np.maximum(softplus(np.asarray(r, dtype=np.float64)), PARAM_FLOOR) for r in raw]
    return CountParams(family, values[0], values[1] if len(values) > 1 else None)


def expected_count(params: CountParams) -> np.ndarray:
    """Mean of each category's distribution."""
    return params.mean.copy()


# =============================================================================
# Negative Log-Likelihoods
# =============================================================================

def nll_poisson(rate, k):
    """-ln P(k | λ) = λ - k ln λ + ln k!"""
    rate = np.asarray(rate, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    _check_positive("Poisson rate", rate)
    _check_counts(k)
    return _out(rate - k * np.log(rate) + gammaln(k + 1.0))


def nll_poisson_grad(rate, k):
    """d/dλ of the Poisson NLL."""
    rate = np.asarray(rate, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    _check_positive("Poisson rate", rate)
    return _out(1.0 - k / rate)


def nll_negbinomial(r, m, k):
    """-ln P(k | r, m) for the mean-dispersion negative binomial.

    P(k) = Γ(k+r) / (k! Γ(r)) (r/(r+m))^r (m/(r+m))^k
    """
    r = np.asarray(r, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    _check_positive("NB dispersion", r)
    _check_positive("NB mean", m)
    _check_counts(k)
    log_p = (
        gammaln(k + r) - gammaln(k + 1.0) - gammaln(r)
        - r * np.log1p(m / r)
        - k * np.log1p(r / m)
    )
    return _out(-log_p)


def nll_negbinomial_grad(r, m, k):
    """(d/dr, d/dm) of the NB NLL."""
    r = np.asarray(r, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    _check_positive("NB dispersion", r)
    _check_positive("NB mean", m)
    d_r = -(digamma(k + r) - digamma(r) - np.log1p(m / r) + (m - k) / (r + m))
    d_m = (r + k) / (r + m) - k / m
    return _out(d_r), _out(d_m)


def nll_gaussian(mu, sigma, k):
    """-ln N(k | μ, σ²), the density at the integer count."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    _check_positive("Gaussian stddev", sigma)
    return _out(0.5 * (_LOG_2PI + 2.0 * np.log(sigma)) + (k - mu) ** 2 / (2.0 * sigma ** 2))


def nll_gaussian_grad(mu, sigma, k):
    """(d/dμ, d/dσ) of the Gaussian NLL."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    _check_positive("Gaussian stddev", sigma)
    resid2 = (k - mu) ** 2 / sigma ** 2
    return _out((mu - k) / sigma ** 2), _out((1.0 - resid2) / sigma)


def nll_matrix(params: CountParams, counts: np.ndarray) -> np.ndarray:
    """Elementwise NLL of ``counts`` under ``params`` (same shape)."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.shape != params.mean.shape:
        raise ShapeError(f"Counts shape {counts.shape} does not match parameters {params.mean.shape}")
    if params.family == "poisson":
        return np.asarray(nll_poisson(params.mean, counts))
    if params.family == "nb":
        return np.asarray(nll_negbinomial(params.spread, params.mean, counts))
    return np.asarray(nll_gaussian(params.mean, params.spread, counts))


def param_grads(params: CountParams, counts: np.ndarray) -> list[np.ndarray]:
    """Gradients of the elementwise NLL wrt [mean, spread]."""
    counts = np.asarray(counts, dtype=np.float64)
    if params.family == "poisson":
        return [np.asarray(nll_poisson_grad(params.mean, counts))]
    if params.family == "nb":
        d_r, d_m = nll_negbinomial_grad(params.spread, params.mean, counts)
        return [np.asarray(d_m), np.asarray(d_r)]
    d_mu, d_sigma = nll_gaussian_grad(params.mean, params.spread, counts)
    return [np.asarray(d_mu), np.asarray(d_sigma)]


def sample_nll(params: CountParams, hist) -> float:
    """Mean over categories of the per-category NLL for one observation."""
    counts = np.asarray(getattr(hist, "counts", hist), dtype=np.float64)
    if params.mean.ndim != 1 or counts.shape != params.mean.shape:
        raise ShapeError(
            f"Histogram has {counts.shape[-1] if counts.ndim else 0} categories, "
            f"parameters have shape {params.mean.shape}"
        )
    return float(nll_matrix(params, counts).mean())


def raw_loss_and_grad(
    family: str,
    raw: Sequence[np.ndarray],
    counts: np.ndarray,
) -> tuple[float, list[np.ndarray]]:
    """Mean NLL over a batch and its gradient wrt the raw (pre-link) head outputs.

    The mean runs over samples and categories. Entries held at the floor
    receive zero gradient.
    """
    params = link(family, raw)
    nll = nll_matrix(params, counts)
    scale = 1.0 / nll.size
    grads = []
    for r, d_param in zip(raw, param_grads(params, counts)):
        r = np.asarray(r, dtype=np.float64)
        active = softplus(r) > PARAM_FLOOR
        grads.append(np.where(active, d_param * expit(r), 0.0) * scale)
    return float(nll.mean()), grads


# =============================================================================
# Oracle
# =============================================================================

def pmf_oracle(family: str, params: Sequence[float], k: int) -> float:
    """Probability (or density) of count k by direct formula, without log-gamma.

    ``params`` is (λ,) for Poisson, (r, m) for NB and (μ, σ) for Gaussian.
    """
    family = FAMILIES.normalize(family)
    if k < 0:
        raise DomainError(f"count must be non-negative (got {k})")
    if family == "poisson":
        (lam,) = params
        if lam <= 0:
            raise DomainError(f"Poisson rate must be strictly positive (got {lam})")
        p = math.exp(-lam)
        for i in range(1, k + 1):
            p *= lam / i
        return p
    if family == "nb":
        r, m = params
        if r <= 0 or m <= 0:
            raise DomainError(f"NB parameters must be strictly positive (got r={r}, m={m})")
        p = (r / (r + m)) ** r
        q = m / (r + m)
        for i in range(1, k + 1):
            p *= (i - 1 + r) / i * q
        return p
    mu, sigma = params
    if sigma <= 0:
        raise DomainError(f"Gaussian stddev must be strictly positive (got {sigma})")
    return math.exp(-((k - mu) ** 2) / (2.0 * sigma ** 2)) / (sigma * math.sqrt(2.0 * math.pi))
