"""Evidential regression on a Normal-Inverse-Gamma prior.

A NIG prior over the mean and variance of a Gaussian observation model
yields a closed-form Student-t predictive and a closed-form split of
predictive variance into a data (aleatoric) part and a knowledge
(epistemic) part:

    data_var      = beta / (alpha - 1)
    knowledge_var = beta / (nu * (alpha - 1))
    total_var     = beta * (nu + 1) / (nu * (alpha - 1))

Training minimizes the Student-t negative log likelihood plus a small
multiple of an error-ratio regularizer that rewards matching observed
absolute errors to the predicted median absolute deviation.  The
squared-error variant of that ratio is deliberately not implemented;
only the absolute-error form below is supported.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DomainError
from .special import lgamma as _lgamma_np

# Median absolute deviation of a standard normal in standard deviations:
# sqrt(2) * erfinv(1/2), equivalently the 75th percentile of N(0, 1).
MAD_COEF = 0.6744897501960817

# Additive floor keeping transformed parameters strictly inside their domain.
PARAM_FLOOR = 1e-6

_LOG_PI = math.log(math.pi)


@dataclass(frozen=True)
class NigParams:
    """One Normal-Inverse-Gamma parameter tuple (lam, nu, alpha, beta)."""

    lam: float
    nu: float
    alpha: float
    beta: float

    def __post_init__(self):
        vals = (self.lam, self.nu, self.alpha, self.beta)
        if not all(math.isfinite(v) for v in vals):
            raise DomainError(f"NIG parameters must be finite, got {vals}")
        if self.nu <= 0.0:
            raise DomainError(f"nu must be positive, got {self.nu}")
        if self.alpha <= 1.0:
            raise DomainError(f"alpha must exceed 1, got {self.alpha}")
        if self.beta <= 0.0:
            raise DomainError(f"beta must be positive, got {self.beta}")


@dataclass(frozen=True)
class UncertaintyBreakdown:
    data_var: float
    knowledge_var: float
    total_var: float


def decompose_arrays(nu, alpha, beta):
    """Vectorized variance decomposition; returns (data, knowledge, total)."""
    nu = np.asarray(nu, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if np.any(alpha <= 1.0):
        raise DomainError("variance decomposition requires alpha > 1")
    if np.any(nu <= 0.0) or np.any(beta <= 0.0):
        raise DomainError("variance decomposition requires nu > 0 and beta > 0")
    data = beta / (alpha - 1.0)
    knowledge = beta / (nu * (alpha - 1.0))
    return data, knowledge, data + knowledge


def decompose(p: NigParams) -> UncertaintyBreakdown:
    """Split predictive variance into data and knowledge parts."""
    data, knowledge, total = decompose_arrays(p.nu, p.alpha, p.beta)
    return UncertaintyBreakdown(float(data), float(knowledge), float(total))


def nig_log_density(mu, sigma2, p: NigParams):
    """Log of the NIG density evaluated at mean mu and variance sigma2."""
    if sigma2 <= 0.0:
        raise DomainError(f"sigma2 must be positive, got {sigma2}")
    lam, nu, alpha, beta = p.lam, p.nu, p.alpha, p.beta
    return float(
        alpha * math.log(beta)
        + 0.5 * math.log(nu)
        - _lgamma_np(alpha)
        - 0.5 * math.log(2.0 * math.pi * sigma2)
        - (alpha + 1.0) * math.log(sigma2)
        - (2.0 * beta + nu * (lam - mu) ** 2) / (2.0 * sigma2)
    )


def student_t_log_pdf(x, p: NigParams):
    """Log pdf of the marginal predictive: a location-scale Student-t.

    Degrees of freedom 2 * alpha, location lam, squared scale
    beta * (1 + nu) / (nu * alpha).
    """
    lam, nu, alpha, beta = p.lam, p.nu, p.alpha, p.beta
    dof = 2.0 * alpha
    scale2 = beta * (1.0 + nu) / (nu * alpha)
    z2 = (x - lam) ** 2 / (dof * scale2)
    return float(
        _lgamma_np(0.5 * (dof + 1.0))
        - _lgamma_np(0.5 * dof)
        - 0.5 * math.log(dof * math.pi * scale2)
        - 0.5 * (dof + 1.0) * math.log1p(z2)
    )


# -- differentiable losses (tensor graph) -----------------------------------


def nll_loss_t(x, lam, nu, alpha, beta):
    """Student-t negative log likelihood, elementwise over tensors."""
    x, lam = T.as_tensor(x), T.as_tensor(lam)
    nu, alpha, beta = T.as_tensor(nu), T.as_tensor(alpha), T.as_tensor(beta)
    resid2 = T.square(x - lam)
    spread = (2.0 * beta) * (nu + 1.0)
    return (
        0.5 * (_LOG_PI - T.log(nu))
        - alpha * T.log(spread)
        + (alpha + 0.5) * T.log(resid2 * nu + spread)
        + T.lgamma(alpha)
        - T.lgamma(alpha + 0.5)
    )


def ratio_regularizer_t(x, lam, nu, alpha, beta, clip_bracket=False):
    """Error-ratio evidence regularizer, elementwise over tensors.

    ( |x - lam| / (MAD_COEF * sqrt(data_var)) - 1 ) * (nu + alpha)

    With ``clip_bracket`` the bracket is clamped below at -1 so that
    well-calibrated points cannot accumulate unbounded negative reward.
    """
    x, lam = T.as_tensor(x), T.as_tensor(lam)
    nu, alpha, beta = T.as_tensor(nu), T.as_tensor(alpha), T.as_tensor(beta)
    if np.any(alpha.data <= 1.0):
        raise DomainError("ratio regularizer requires alpha > 1")
    mad = MAD_COEF * T.sqrt(beta / (alpha - 1.0))
    bracket = T.absolute(x - lam) / mad - 1.0
    if clip_bracket:
        bracket = T.clip(bracket, -1.0, np.inf)
    return bracket * (nu + alpha)


def total_loss_t(x, lam, nu, alpha, beta, epsilon=0.01, clip_bracket=False):
    """NLL plus epsilon times the ratio regularizer, elementwise."""
    return nll_loss_t(x, lam, nu, alpha, beta) + epsilon * ratio_regularizer_t(
        x, lam, nu, alpha, beta, clip_bracket=clip_bracket
    )


# -- scalar convenience wrappers --------------------------------------------


def nll_loss(x_obs, p: NigParams):
    return float(nll_loss_t(x_obs, p.lam, p.nu, p.alpha, p.beta).data)


def ratio_regularizer(x_obs, p: NigParams, clip_bracket=False):
    return float(
        ratio_regularizer_t(
            x_obs, p.lam, p.nu, p.alpha, p.beta, clip_bracket=clip_bracket
        ).data
    )


def total_loss(x_obs, p: NigParams, epsilon=0.01, clip_bracket=False):
    return nll_loss(x_obs, p) + epsilon * ratio_regularizer(
        x_obs, p, clip_bracket=clip_bracket
    )


# -- positivity transform ----------------------------------------------------


def _softplus_np(x):
    return np.logaddexp(0.0, x)


def positivity_transform(raw):
    """Map three unconstrained reals to valid (nu, alpha, beta).

    nu, beta pass through softplus; alpha additionally gains 1.  All
    three get a small floor so the constraints are strict.
    """
    raw = np.asarray(raw, dtype=np.float64)
    nu = _softplus_np(raw[..., 0]) + PARAM_FLOOR
    alpha = 1.0 + _softplus_np(raw[..., 1]) + PARAM_FLOOR
    beta = _softplus_np(raw[..., 2]) + PARAM_FLOOR
    if raw.ndim == 1 and raw.shape[0] == 3:
        return float(nu), float(alpha), float(beta)
    return nu, alpha, beta


def positivity_transform_t(raw_nu, raw_alpha, raw_beta):
    """Tensor version of positivity_transform for the training graph."""
    nu = T.softplus(raw_nu) + PARAM_FLOOR
    alpha = T.softplus(raw_alpha) + (1.0 + PARAM_FLOOR)
    beta = T.softplus(raw_beta) + PARAM_FLOOR
    return nu, alpha, beta


def inverse_softplus(y):
    """Raw value whose softplus is y; used to teacher-force NIG inputs."""
    y = np.asarray(y, dtype=np.float64)
    return y + np.log1p(-np.exp(-y))
