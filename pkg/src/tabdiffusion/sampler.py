"""Reverse-process generation: ancestral DDPM steps, deterministic DDIM steps
and sigma = 0 reconstruction of forward-noised records.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .denoiser import mu_from_eps, x0_from_eps
from .errors import ConfigError, ContractError, NumericalError
from .schedule import NoiseSchedule

MODES = ("ddpm", "ddim")
SIGMA_MODES = ("posterior", "zero")


@dataclass
class SampleConfig:
    mode: str = "ddpm"
    sigma_mode: str = "posterior"
    T_use: int | None = None
    seed: int = 0
    record_trajectory: bool = False
    literal: bool = False  # DDIM only: alternative update, see ddim_step

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.sigma_mode not in SIGMA_MODES:
            raise ConfigError(f"sigma_mode must be one of {SIGMA_MODES}, got {self.sigma_mode!r}")
        if self.T_use is not None and self.T_use < 1:
            raise ConfigError("T_use must be >= 1")


@dataclass
class Trajectory:
    """States visited by a batch of chains; residuals[i, j] = ||x_{i+1} - x_i|| for chain j."""

    ts: list[int] = field(default_factory=list)
    states: list[np.ndarray] = field(default_factory=list)
    residuals: list[np.ndarray] = field(default_factory=list)

    def append(self, t: int, x: np.ndarray):
        if self.states:
            self.residuals.append(np.linalg.norm(x - self.states[-1], axis=-1))
        self.ts.append(t)
        self.states.append(x.copy())

    def residual_matrix(self) -> np.ndarray:
        return np.array(self.residuals)


@dataclass
class SampleResult:
    x: np.ndarray
    trajectory: Trajectory | None = None


def timestep_sequence(T: int, T_use: int | None = None) -> np.ndarray:
    """Ascending timesteps visited by the sampler, uniformly strided."""
    T_use = T if T_use is None else int(T_use)
    if T_use > T:
        raise ConfigError(f"T_use={T_use} exceeds trained T={T}")
    if T_use == T:
        return np.arange(1, T + 1)
    return np.unique(np.round(np.linspace(1, T, T_use)).astype(int))


def ddpm_step(model, sched: NoiseSchedule, x_t, t: int, z, sigma_mode: str = "posterior",
              s: int | None = None, eps=None) -> np.ndarray:
    """One ancestral step from t to s (default t - 1).

    With s = t - 1 the mean is exactly :func:`mu_from_eps`; for strided
    sequences the step uses the effective beta 1 - ab_t / ab_s.
    """
    if t < 1:
        raise IndexError(f"timestep must be >= 1, got {t}")
    s = t - 1 if s is None else s
    if not 0 <= s < t:
        raise ContractError(f"need 0 <= s < t, got s={s}, t={t}")
    eps = model.predict(x_t, t) if eps is None else eps
    if s == t - 1:
        mean = mu_from_eps(sched, x_t, t, eps)
        var = sched.posterior_var[t - 1]
    else:
        ab_t, ab_s = sched.ab(t), sched.ab(s)
        beta = 1.0 - ab_t / ab_s
        mean = (x_t - beta / np.sqrt(1.0 - ab_t) * eps) / np.sqrt(1.0 - beta)
        var = (1.0 - ab_s) / (1.0 - ab_t) * beta
    if sigma_mode == "zero":
        return mean
    return mean + np.sqrt(var) * z


def ddim_step(model, sched: NoiseSchedule, x_t, t: int, s: int, eps=None, literal: bool = False) -> np.ndarray:
    """Deterministic move from t to s <= t.

    The default is sqrt(ab_s) * x0_hat + sqrt(1 - ab_s) * eps_hat. With
    ``literal=True`` the alternative rule
    (lam_s / lam_t) * (x_t - ab_t * eps) + ab_s * eps with
    lam = sqrt(1 - ab) / sqrt(ab) is used instead; it does not reduce to the
    standard integrator and is kept only for comparison.
    """
    if s > t:
        raise ContractError(f"DDIM target s={s} is after t={t}")
    x_t = np.asarray(x_t, dtype=np.float64)
    if s == t:
        return x_t.copy()
    eps = model.predict(x_t, t) if eps is None else eps
    ab_t, ab_s = float(sched.ab(t)), float(sched.ab(s))
    if literal:
        lam_t = np.sqrt(1.0 - ab_t) / np.sqrt(ab_t)
        lam_s = np.sqrt(1.0 - ab_s) / np.sqrt(ab_s)
        return (lam_s / lam_t) * (x_t - ab_t * eps) + ab_s * eps
    x0_hat = x0_from_eps(sched, x_t, t, eps)
    return np.sqrt(ab_s) * x0_hat + np.sqrt(1.0 - ab_s) * eps


def initial_noise(seed: int, n: int, dim: int):
    """x_T ~ N(0, I) and the generator used for any later draws."""
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, dim)), rng


def _check_finite(x, t):
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite state after step t={t}", step=int(t))


def sample(model, sched: NoiseSchedule, cfg: SampleConfig, n: int, x_T=None) -> SampleResult:
    """Run the reverse process for n chains starting from x_T ~ N(0, I)."""
    dim = model.feature_dim
    x, rng = initial_noise(cfg.seed, n, dim)
    if x_T is not None:
        x = np.array(x_T, dtype=np.float64)
    seq = timestep_sequence(sched.T, cfg.T_use)
    traj = Trajectory() if cfg.record_trajectory else None
    if traj is not None:
        traj.append(int(seq[-1]), x)
    for i in range(len(seq) - 1, -1, -1):
        t = int(seq[i])
        s = int(seq[i - 1]) if i > 0 else 0
        if cfg.mode == "ddim":
            x = ddim_step(model, sched, x, t, s, literal=cfg.literal)
        else:
            z = rng.standard_normal(x.shape) if s > 0 else np.zeros_like(x)
            x = ddpm_step(model, sched, x, t, z, cfg.sigma_mode, s=s)
        _check_finite(x, t)
        if traj is not None:
            traj.append(s, x)
    return SampleResult(x, traj)


def forward_trajectory(sched: NoiseSchedule, x0, rng: np.random.Generator) -> np.ndarray:
    """Run q(x_t | x_{t-1}) for t = 1..T with freshly drawn noise; returns x_T."""
    x = np.asarray(x0, dtype=np.float64).copy()
    for t in range(1, sched.T + 1):
        x = np.sqrt(sched.alpha[t - 1]) * x + np.sqrt(sched.beta[t - 1]) * rng.standard_normal(x.shape)
    return x


def reconstruct(model, sched: NoiseSchedule, x0, seed: int = 0, sigma_mode: str = "zero",
                x_T=None) -> np.ndarray:
    """Noise `x0` all the way to x_T, then denoise that exact x_T.

    With sigma_mode="zero" the reverse chain is deterministic, so the output is
    a function of the recorded x_T alone.
    """
    rng = np.random.default_rng(seed)
    if x_T is None:
        x_T = forward_trajectory(sched, x0, rng)
    cfg = SampleConfig(mode="ddpm", sigma_mode=sigma_mode, seed=seed + 1)
    x0 = np.atleast_2d(x0)
    return sample(model, sched, cfg, len(x0), x_T=x_T).x
