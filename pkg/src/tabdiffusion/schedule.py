"""Linear variance schedules and the closed-form Gaussian quantities of the
forward process.

Timesteps are 1-based throughout (t = 1..T). ``alpha_bar_prev(1)`` is 1 by
convention, which makes the t = 1 posterior a point mass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_var: np.ndarray
    beta_start: float
    beta_end: float

    @property
    def T(self) -> int:
        return len(self.beta)

    def check_t(self, t):
        ts = np.asarray(t)
        if ts.size and (ts.min() < 1 or ts.max() > self.T):
            raise IndexError(f"timestep out of range 1..{self.T}: {t}")

    def ab(self, t):
        """alpha_bar at (1-based) t; t = 0 gives 1."""
        t = np.asarray(t)
        return np.where(t == 0, 1.0, self.alpha_bar[np.maximum(t, 1) - 1])

    def alpha_bar_prev(self, t):
        return self.ab(np.asarray(t) - 1)

    def params(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}


def linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 1e-2) -> NoiseSchedule:
    if int(T) != T or T < 1:
        raise ConfigError(f"T must be a positive integer, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, int(T)) if T > 1 else np.array([beta_start])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    prev = np.concatenate([[1.0], alpha_bar[:-1]])
    posterior_var = (1.0 - prev) / (1.0 - alpha_bar) * beta
    return NoiseSchedule(
        beta=_frozen(beta),
        alpha=_frozen(alpha),
        alpha_bar=_frozen(alpha_bar),
        posterior_var=_frozen(posterior_var),
        beta_start=float(beta_start),
        beta_end=float(beta_end),
    )


def _col(v, ndim):
    """Broadcast a per-sample coefficient against a (batch, ...) array."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 0:
        return v
    return v.reshape(v.shape + (1,) * (ndim - 1))


def forward_sample(sched: NoiseSchedule, x0, t, eps) -> np.ndarray:
    """Draw from q(x_t | x_0) given the noise: sqrt(ab_t) x0 + sqrt(1 - ab_t) eps.

    `t` may be an int or one int per row of `x0`.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != x0.shape:
        raise ContractError(f"eps shape {eps.shape} != x0 shape {x0.shape}")
    sched.check_t(t)
    ab = _col(sched.ab(t), x0.ndim)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def posterior_params(sched: NoiseSchedule, x0, xt, t: int):
    """Mean and variance of q(x_{t-1} | x_t, x_0)."""
    sched.check_t(t)
    ab_t = sched.alpha_bar[t - 1]
    ab_prev = sched.ab(t - 1)
    beta_t = sched.beta[t - 1]
    coef_x0 = np.sqrt(ab_prev) * beta_t / (1.0 - ab_t)
    coef_xt = np.sqrt(sched.alpha[t - 1]) * (1.0 - ab_prev) / (1.0 - ab_t)
    mean = coef_x0 * np.asarray(x0, dtype=np.float64) + coef_xt * np.asarray(xt, dtype=np.float64)
    return mean, float(sched.posterior_var[t - 1])


def sample_timesteps(rng: np.random.Generator, T: int, n: int) -> np.ndarray:
    """n independent draws from Uniform{1..T}."""
    return rng.integers(1, T + 1, size=n)


def training_pair(sched: NoiseSchedule, x0, t, rng: np.random.Generator):
    x0 = np.asarray(x0, dtype=np.float64)
    eps = rng.standard_normal(x0.shape)
    return forward_sample(sched, x0, t, eps), eps


def gaussian_kl(mean1, var1, mean2, var2) -> np.ndarray:
    """KL(N(mean1, var1 I) || N(mean2, var2 I)) summed over the last axis.

    Variances are scalars (isotropic).
    """
    mean1, mean2 = np.asarray(mean1, float), np.asarray(mean2, float)
    d = mean1.shape[-1]
    return 0.5 * (d * (var1 / var2 - 1.0 + np.log(var2 / var1))
                  + np.sum((mean1 - mean2) ** 2, axis=-1) / var2)


def vlb_terms(sched: NoiseSchedule, model, x0, rng: np.random.Generator | None = None) -> np.ndarray:
    """Diagnostic L_{t-1} terms for t = 2..T, averaged over the rows of x0.

    The model's reverse variance is taken to be the posterior variance, so each
    term reduces to the squared mean gap scaled by 1 / (2 var). Not used for
    training.
    """
    from .denoiser import mu_from_eps

    rng = rng or np.random.default_rng(0)
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    out = np.zeros(sched.T - 1)
    for t in range(2, sched.T + 1):
        xt, _ = training_pair(sched, x0, t, rng)
        mean_q, var = posterior_params(sched, x0, xt, t)
        mean_p = mu_from_eps(sched, xt, t, model.predict(xt, t))
        out[t - 2] = float(np.mean(gaussian_kl(mean_q, var, mean_p, var)))
    return out
