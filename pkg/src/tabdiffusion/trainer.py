"""Noise-prediction training loop with Adam."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .errors import ConfigError, ContractError, NumericalError
from .schedule import NoiseSchedule, forward_sample, sample_timesteps
from .tensor import ParamSet, Tape, Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 128
    max_steps: int = 2000
    tol: float = 0.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    weighted: bool = False
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(state: AdamState, params: ParamSet, grads: dict[str, np.ndarray], cfg) -> None:
    """Apply one bias-corrected Adam update to `params` in place."""
    missing = [name for name in params if name not in grads]
    if missing:
        raise ContractError(f"no gradient for parameters {missing}")
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps_adam)


def loss_weights(sched: NoiseSchedule, ts) -> np.ndarray:
    """beta^2 / (2 sigma^2 alpha (1 - ab)) with sigma^2 = beta."""
    ts = np.asarray(ts)
    beta = sched.beta[ts - 1]
    return beta / (2.0 * sched.alpha[ts - 1] * (1.0 - sched.alpha_bar[ts - 1]))


def loss_batch(model, sched: NoiseSchedule, x0_batch, ts, eps_batch, weighted: bool = False) -> Tensor:
    """Mean over the batch of ||eps - eps_theta(x_t, t)||^2."""
    x0_batch = np.asarray(x0_batch, dtype=np.float64)
    xt = forward_sample(sched, x0_batch, ts, eps_batch)
    diff = tn.sub(model(Tensor(xt), ts), Tensor(eps_batch))
    per_row = tn.sum(tn.square(diff), axis=1)
    if weighted:
        per_row = per_row * loss_weights(sched, ts)
    return tn.mean(per_row)


@dataclass
class TrainResult:
    model: object
    history: list[tuple[int, float]]
    adam: AdamState

    @property
    def losses(self) -> np.ndarray:
        return np.array([loss for _, loss in self.history])


def train(model, sched: NoiseSchedule, data, cfg: TrainConfig, on_checkpoint=None) -> TrainResult:
    """Fit `model` to the rows of `data`.

    Each step draws a minibatch, one timestep per record, and fresh noise from
    a generator seeded by (cfg.seed, step), so a failing batch can be replayed.
    Stops after cfg.max_steps or once the loss drops to cfg.tol.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or len(data) == 0:
        raise ContractError("training data must be a non-empty 2-d array")
    if data.shape[1] != model.feature_dim:
        raise ContractError(f"data has {data.shape[1]} features, model expects {model.feature_dim}")

    adam = AdamState()
    history: list[tuple[int, float]] = []
    n = len(data)
    batch = min(cfg.batch_size, n)
    for step in range(1, cfg.max_steps + 1):
        rng = np.random.default_rng([cfg.seed, step])
        idx = rng.choice(n, size=batch, replace=False)
        ts = sample_timesteps(rng, sched.T, batch)
        eps = rng.standard_normal((batch, data.shape[1]))
        with Tape() as tape:
            loss = loss_batch(model, sched, data[idx], ts, eps, cfg.weighted)
            grads = tape.backward(loss, model.params.values())
        value = float(loss.data)
        if not np.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise NumericalError(
                f"non-finite loss at step {step} (batch seed [{cfg.seed}, {step}])",
                step=step, seed=[cfg.seed, step])
        adam_step(adam, model.params, grads, cfg)
        history.append((step, value))
        if cfg.checkpoint_every and on_checkpoint and step % cfg.checkpoint_every == 0:
            on_checkpoint(step, model, history)
        if cfg.tol > 0 and value <= cfg.tol:
            log.info("loss %.3g <= tol at step %d", value, step)
            break
    return TrainResult(model, history, adam)


def smoothed(values, window: int = 20) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    window = max(1, min(window, len(values)))
    return np.convolve(values, np.ones(window) / window, mode="valid")
