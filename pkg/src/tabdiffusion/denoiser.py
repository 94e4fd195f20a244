"""Time-conditioned noise predictors: a 1-d convolutional U-Net and an MLP."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as tn
from .errors import ConfigError, DimensionError
from .schedule import NoiseSchedule, _col
from .tensor import ParamSet, Tensor

RES_SCALE = 1.0 / math.sqrt(2.0)
HE_GAIN = math.sqrt(2.0)
# 1 / sqrt(E[silu(z)^2]) for z ~ N(0, 1): keeps activations near unit
# variance through a silu -> linear pair
SILU_GAIN = 1.6765


class TimestepEmbedding:
    """Sinusoidal features [sin(t w_i), cos(t w_i)] with geometric frequencies."""

    def __init__(self, dim: int, max_period: float = 10000.0):
        if dim < 2 or dim % 2:
            raise ConfigError(f"embedding dim must be even and positive, got {dim}")
        self.dim = dim
        half = dim // 2
        self.freqs = np.exp(-math.log(max_period) * np.arange(half) / half)

    def __call__(self, t, batch: int | None = None) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        if t.ndim == 0:
            t = np.full(batch or 1, float(t))
        args = t[:, None] * self.freqs[None, :]
        return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def _uniform(rng, shape, fan_in, gain=SILU_GAIN):
    # variance gain**2 / fan_in
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class _Builder:
    """Parameter factory that keeps initialization order deterministic."""

    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)
        self.params = ParamSet()

    def linear(self, name, fan_in, fan_out, zero=False, gain=SILU_GAIN):
        w = np.zeros((fan_in, fan_out)) if zero else _uniform(self.rng, (fan_in, fan_out), fan_in, gain)
        self.params.add(f"{name}.w", w)
        self.params.add(f"{name}.b", np.zeros(fan_out))

    def conv(self, name, cin, cout, k, zero=False, gain=SILU_GAIN):
        w = np.zeros((cout, cin, k)) if zero else _uniform(self.rng, (cout, cin, k), cin * k, gain)
        self.params.add(f"{name}.w", w)
        self.params.add(f"{name}.b", np.zeros(cout))


def _linear(p: ParamSet, name: str, x: Tensor) -> Tensor:
    return tn.matmul(x, p[f"{name}.w"]) + p[f"{name}.b"]


def _conv(p: ParamSet, name: str, x: Tensor, stride=1) -> Tensor:
    w = p[f"{name}.w"]
    b = p[f"{name}.b"]
    y = tn.conv1d(x, w, stride=stride, padding=w.shape[2] // 2)
    return y + tn.reshape(b, (1, b.shape[0], 1))


class Denoiser:
    """Base class: eps_theta(x, t) on (batch, feature_dim) records."""

    arch = "base"

    def __init__(self, feature_dim: int, embed_dim: int, seed: int):
        if feature_dim < 1:
            raise ConfigError("feature_dim must be positive")
        self.feature_dim = int(feature_dim)
        self.embed_dim = int(embed_dim)
        self.seed = int(seed)
        self.embed = TimestepEmbedding(embed_dim)
        self._b = _Builder(seed)
        self.params = self._b.params

    def _time_mlp_params(self, width):
        self._b.linear("time.0", self.embed_dim, width, gain=HE_GAIN)
        self._b.linear("time.1", width, width, gain=HE_GAIN)

    def _time_features(self, t, batch) -> Tensor:
        emb = Tensor(self.embed(t, batch))
        h = tn.silu(_linear(self.params, "time.0", emb))
        return tn.silu(_linear(self.params, "time.1", h))

    def _check(self, x: Tensor, t):
        if x.ndim != 2 or x.shape[1] != self.feature_dim:
            raise DimensionError(f"expected (batch, {self.feature_dim}) input, got {x.shape}")
        t = np.asarray(t)
        if t.ndim == 1 and t.shape[0] != x.shape[0]:
            raise DimensionError(f"{t.shape[0]} timesteps for a batch of {x.shape[0]}")

    def __call__(self, x: Tensor, t) -> Tensor:
        raise NotImplementedError

    def predict(self, x, t) -> np.ndarray:
        """Inference without gradient recording."""
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        out = self(Tensor(np.atleast_2d(x)), t).data
        return out[0] if squeeze else out

    def hyperparams(self) -> dict:
        raise NotImplementedError

    def descriptor(self) -> dict:
        return {"arch": self.arch, "feature_dim": self.feature_dim, **self.hyperparams()}


class MLPDenoiser(Denoiser):
    arch = "mlp"

    def __init__(self, feature_dim: int, hidden: int = 256, depth: int = 3,
                 embed_dim: int = 32, seed: int = 0):
        super().__init__(feature_dim, embed_dim, seed)
        self.hidden, self.depth = int(hidden), int(depth)
        self._time_mlp_params(hidden)
        fan_in = feature_dim
        for i in range(depth):
            self._b.linear(f"layer{i}", fan_in, hidden, gain=HE_GAIN)
            self._b.linear(f"temb{i}", hidden, hidden, gain=HE_GAIN)
            fan_in = hidden
        self._b.linear("out", hidden, feature_dim, zero=True)

    def hyperparams(self):
        return {"hidden": self.hidden, "depth": self.depth, "embed_dim": self.embed_dim,
                "seed": self.seed}

    def trunk(self, x: Tensor, t) -> Tensor:
        temb = self._time_features(t, x.shape[0])
        h = x
        for i in range(self.depth):
            h = tn.silu(_linear(self.params, f"layer{i}", h) + _linear(self.params, f"temb{i}", temb))
        return h

    def __call__(self, x: Tensor, t) -> Tensor:
        x = tn.as_tensor(x)
        self._check(x, t)
        return _linear(self.params, "out", self.trunk(x, t))


class UNet1D(Denoiser):
    """Records are treated as 1-channel signals of length feature_dim.

    The length is right-padded with zeros to a multiple of 2**levels and the
    output cropped back, so any feature_dim is accepted.
    """

    arch = "unet1d"

    def __init__(self, feature_dim: int, channels=(32, 64), blocks: int = 2,
                 kernel: int = 3, embed_dim: int = 32, seed: int = 0):
        super().__init__(feature_dim, embed_dim, seed)
        if kernel % 2 == 0:
            raise ConfigError("kernel size must be odd")
        self.channels = tuple(int(c) for c in channels)
        self.blocks, self.kernel = int(blocks), int(kernel)
        self.multiple = 2 ** len(self.channels)
        self.padded_dim = -(-feature_dim // self.multiple) * self.multiple
        tdim = 4 * self.channels[0]
        self._time_mlp_params(tdim)

        b, k = self._b, kernel
        # layers fed by a linear input get unit gain; the rest follow a silu
        b.conv("in", 1, self.channels[0], k, gain=1.0)
        c_prev = self.channels[0]
        for lvl, c in enumerate(self.channels):
            for i in range(blocks):
                self._res_params(f"down{lvl}.{i}", c_prev, c, tdim)
                c_prev = c
            b.conv(f"down{lvl}.pool", c, c, 3, gain=1.0)
        self._res_params("mid", c_prev, c_prev, tdim)
        for lvl in reversed(range(len(self.channels))):
            c = self.channels[lvl]
            for i in range(blocks):
                cin = c_prev + c if i == 0 else c
                self._res_params(f"up{lvl}.{i}", cin, c, tdim)
                c_prev = c
        b.conv("out", c_prev, 1, k, zero=True)

    def _res_params(self, name, cin, cout, tdim):
        b = self._b
        b.conv(f"{name}.conv1", cin, cout, self.kernel)
        # a small time projection stops variance creeping up block after block
        b.linear(f"{name}.temb", tdim, cout, gain=0.5)
        b.conv(f"{name}.conv2", cout, cout, self.kernel)
        if cin != cout:
            b.conv(f"{name}.skip", cin, cout, 1, gain=1.0)

    def _res(self, name, x: Tensor, temb: Tensor) -> Tensor:
        p = self.params
        h = _conv(p, f"{name}.conv1", tn.silu(x))
        proj = _linear(p, f"{name}.temb", temb)
        h = h + tn.reshape(proj, (proj.shape[0], proj.shape[1], 1))
        h = _conv(p, f"{name}.conv2", tn.silu(h))
        skip = _conv(p, f"{name}.skip", x) if f"{name}.skip.w" in p else x
        return (h + skip) * RES_SCALE

    def hyperparams(self):
        return {"channels": list(self.channels), "blocks": self.blocks, "kernel": self.kernel,
                "embed_dim": self.embed_dim, "seed": self.seed}

    def trunk(self, x: Tensor, t) -> Tensor:
        batch = x.shape[0]
        temb = self._time_features(t, batch)
        h = tn.reshape(tn.pad_last(x, self.padded_dim - self.feature_dim), (batch, 1, self.padded_dim))
        h = _conv(self.params, "in", h)
        skips = []
        for lvl in range(len(self.channels)):
            for i in range(self.blocks):
                h = self._res(f"down{lvl}.{i}", h, temb)
            skips.append(h)
            h = _conv(self.params, f"down{lvl}.pool", h, stride=2)
        h = self._res("mid", h, temb)
        for lvl in reversed(range(len(self.channels))):
            h = tn.concat([tn.upsample_nearest(h, 2), skips[lvl]], axis=1)
            for i in range(self.blocks):
                h = self._res(f"up{lvl}.{i}", h, temb)
        return h

    def __call__(self, x: Tensor, t) -> Tensor:
        x = tn.as_tensor(x)
        self._check(x, t)
        h = _conv(self.params, "out", tn.silu(self.trunk(x, t)))
        return tn.crop_last(tn.reshape(h, (x.shape[0], self.padded_dim)), self.feature_dim)


ARCHITECTURES = {"mlp": MLPDenoiser, "unet1d": UNet1D}


def build_model(arch: str, feature_dim: int, **hp) -> Denoiser:
    try:
        cls = ARCHITECTURES[arch]
    except KeyError:
        raise ConfigError(f"unknown architecture {arch!r}; choose from {sorted(ARCHITECTURES)}") from None
    return cls(feature_dim, **hp)


def model_from_descriptor(desc: dict) -> Denoiser:
    desc = dict(desc)
    return build_model(desc.pop("arch"), desc.pop("feature_dim"), **desc)


def mu_from_eps(sched: NoiseSchedule, x_t, t, eps_hat) -> np.ndarray:
    """Reverse-step mean (x_t - beta_t / sqrt(1 - ab_t) * eps) / sqrt(alpha_t)."""
    x_t = np.asarray(x_t, dtype=np.float64)
    beta = _col(sched.beta[np.asarray(t) - 1], x_t.ndim)
    ab = _col(sched.ab(t), x_t.ndim)
    alpha = _col(sched.alpha[np.asarray(t) - 1], x_t.ndim)
    return (x_t - beta / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(alpha)


def x0_from_eps(sched: NoiseSchedule, x_t, t, eps_hat) -> np.ndarray:
    x_t = np.asarray(x_t, dtype=np.float64)
    ab = _col(sched.ab(t), x_t.ndim)
    return (x_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)
