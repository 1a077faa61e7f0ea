"""Measurement-conditioned reverse diffusion for spectrum cartography.

At every step the prior's clean-signal estimate is replaced by its posterior
mean given the observations, using a closed-form update for linear Gaussian
measurements and a truncated-Gaussian correction for quantized ones.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigError, NumericalError, ShapeMismatchError
from .observe import Observation, ObservationError, QuantizerSpec
from .schedule import DiffusionSchedule, forward_diffuse, reverse_step, tweedie_x0

INIT_MODES = ("pure_noise", "forward_diffused_fill")


@dataclass(frozen=True)
class GscConfig:
    """Sampler settings.

    ``steps_used`` is the step the chain starts from (``None`` means ``T``).
    ``x0_clip`` optionally clamps the prior's clean estimate before the
    measurement update, as commonly done for bounded images.
    """

    init_mode: str = "pure_noise"
    fill_value: float | None = None
    steps_used: int | None = None
    stability_clip: float = 40.0
    x0_clip: tuple[float, float] | None = None

    def __post_init__(self):
        if self.init_mode not in INIT_MODES:
            raise ConfigError(f"init_mode must be one of {INIT_MODES}, got {self.init_mode!r}")
        if self.steps_used is not None and int(self.steps_used) < 1:
            raise ConfigError("steps_used must be at least 1")
        if not self.stability_clip > 0:
            raise ConfigError("stability_clip must be positive")
        if self.x0_clip is not None:
            lo, hi = self.x0_clip
            if not lo < hi:
                raise ConfigError("x0_clip needs lower < upper")
            object.__setattr__(self, "x0_clip", (float(lo), float(hi)))

    def start_step(self, sched: DiffusionSchedule) -> int:
        t0 = sched.T if self.steps_used is None else int(self.steps_used)
        if t0 > sched.T:
            raise ConfigError(f"steps_used={t0} exceeds schedule length {sched.T}")
        return t0

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if d["x0_clip"] is not None:
            d["x0_clip"] = list(d["x0_clip"])
        return d


@dataclass
class PosteriorUpdateReport:
    """Per-step diagnostics, in the order the steps were run (``T`` first)."""

    branch: str
    steps: list = field(default_factory=list)
    gamma_sq: list = field(default_factory=list)
    gain: list = field(default_factory=list)
    clipped: list = field(default_factory=list)

    def record(self, t, gamma_sq, gain, clipped):
        self.steps.append(int(t))
        self.gamma_sq.append(float(gamma_sq))
        self.gain.append(float(gain))
        self.clipped.append(int(clipped))

    @property
    def total_clipped(self) -> int:
        return int(sum(self.clipped))

    def to_dict(self) -> dict:
        return {"branch": self.branch, "steps": self.steps, "gamma_sq": self.gamma_sq,
                "gain": self.gain, "clipped": self.clipped, "total_clipped": self.total_clipped}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _flat_view(x0_hat, obs: Observation):
    x = np.array(x0_hat, dtype=np.float64)
    if x.shape[-2:] != obs.shape:
        raise ShapeMismatchError(f"estimate shape {x.shape} does not match observation grid {obs.shape}")
    return x, x.reshape(x.shape[:-2] + (-1,))


def lmmse_update(x0_hat, obs: Observation, gamma_sq_t: float) -> np.ndarray:
    """Posterior mean of ``x0`` under ``x0 ~ N(x0_hat, gamma_sq_t I)`` and linear observations.

    Works on a single map or a batch ``(B, rows, cols)``; only observed
    pixels change.
    """
    if obs.is_quantized:
        raise ObservationError("lmmse_update needs a linear observation")
    if not gamma_sq_t > 0:
        raise ValueError("gamma_sq_t must be positive")
    out, flat = _flat_view(x0_hat, obs)
    idx = obs.mask.observed
    s2 = obs.noise_sigma ** 2
    g = gamma_sq_t
    flat[..., idx] = (s2 * flat[..., idx] + g * obs.values) / (g + s2)
    return out


def mills_shift(a, b, clip: float = 40.0):
    """Mean of a standard normal truncated to ``(a, b)``; scalar or array."""
    a_arr = np.asarray(a, dtype=np.float64)
    b_arr = np.asarray(b, dtype=np.float64)
    if np.any(~(a_arr < b_arr)):
        raise ValueError("mills_shift needs a < b")
    delta, _ = kernels.mills_shift(a_arr, b_arr, clip)
    return float(delta) if delta.ndim == 0 else delta


def _quantized_core(x0_hat, obs: Observation, gamma_sq_t: float, clip: float):
    if not obs.is_quantized:
        raise ObservationError("quantized_update needs a quantized observation")
    if not gamma_sq_t > 0:
        raise ValueError("gamma_sq_t must be positive")
    out, flat = _flat_view(x0_hat, obs)
    idx = obs.mask.observed
    lo, hi = obs.quantizer.interval(obs.levels())
    s = np.sqrt(gamma_sq_t + obs.noise_sigma ** 2)
    mu = flat[..., idx]
    delta, clipped = kernels.mills_shift((lo - mu) / s, (hi - mu) / s, clip)
    flat[..., idx] = mu + (gamma_sq_t / s) * delta
    return out, int(np.count_nonzero(clipped))


def quantized_update(x0_hat, obs: Observation, gamma_sq_t: float, clip: float = 40.0) -> np.ndarray:
    """Posterior mean of ``x0`` under ``x0 ~ N(x0_hat, gamma_sq_t I)`` and quantized observations."""
    return _quantized_core(x0_hat, obs, gamma_sq_t, clip)[0]


def _initial_state(obs, cfg, sched, t0, rngs, fill_value):
    shape = obs.shape
    if cfg.init_mode == "pure_noise":
        return np.stack([r.standard_normal(shape) for r in rngs])
    vals = obs.real_values()
    fill = float(np.mean(vals)) if fill_value is None else float(fill_value)
    base = np.full(obs.mask.rows * obs.mask.cols, fill)
    base[obs.mask.observed] = vals
    base = base.reshape(shape)
    return np.stack([forward_diffuse(base, t0, sched, r) for r in rngs])


def to_model_space(obs: Observation, shift: float, scale: float) -> Observation:
    """Express ``obs`` in the coordinates ``(x - shift) / scale`` a prior diffuses in.

    Linear values and the noise std are mapped affinely; a uniform quantizer
    maps to another uniform quantizer with the same level indices.
    """
    if shift == 0.0 and scale == 1.0:
        return obs
    sigma = obs.noise_sigma / scale
    if obs.quantizer is None:
        return Observation(obs.mask, (obs.values - shift) / scale, sigma)
    q = obs.quantizer
    q2 = QuantizerSpec(q.bits, (q.x_min - shift) / scale, (q.x_max - shift) / scale)
    return Observation(obs.mask, obs.values, sigma, q2)


def reconstruct_batch(obs: Observation, prior, sched: DiffusionSchedule, cfg: GscConfig,
                      rngs) -> tuple[np.ndarray, PosteriorUpdateReport]:
    """Run one chain per generator in ``rngs``, vectorised over the batch.

    Priors exposing ``data_affine = (shift, scale)`` are run in their own
    coordinates; the returned maps are always in the observation's units.

    Chain ``k`` draws all its randomness from ``rngs[k]``, so its result is
    the same as a single-chain run with that generator.
    """
    rngs = list(rngs)
    if not rngs:
        raise ValueError("need at least one generator")
    if (prior.rows, prior.cols) != obs.shape:
        raise ShapeMismatchError(
            f"prior supports {prior.rows}x{prior.cols} maps, observation is {obs.shape}")
    t0 = cfg.start_step(sched)
    shift, scale = getattr(prior, "data_affine", (0.0, 1.0))
    obs = to_model_space(obs, shift, scale)
    clip = None if cfg.x0_clip is None else tuple((c - shift) / scale for c in cfg.x0_clip)
    quantized = obs.is_quantized
    report = PosteriorUpdateReport("quantized" if quantized else "linear")
    fill = None if cfg.fill_value is None else (cfg.fill_value - shift) / scale
    x = _initial_state(obs, cfg, sched, t0, rngs, fill)
    s2 = obs.noise_sigma ** 2
    x0_post = x
    for t in range(t0, 0, -1):
        g = float(sched.gamma_sq[t - 1])
        x0_hat = tweedie_x0(x, prior.predict_noise(x, t), t, sched)
        if clip is not None:
            x0_hat = np.clip(x0_hat, *clip)
        if quantized:
            x0_post, n_clip = _quantized_core(x0_hat, obs, g, cfg.stability_clip)
        else:
            x0_post, n_clip = lmmse_update(x0_hat, obs, g), 0
        report.record(t, g, g / (g + s2), n_clip)
        if t > 1:
            z = np.stack([r.standard_normal(obs.shape) for r in rngs])
            x = reverse_step(x, x0_post, t, sched, z=z)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(x0_post))):
            raise NumericalError(f"non-finite sampler state at step {t}")
    return shift + scale * x0_post, report


def reconstruct(obs: Observation, prior, sched: DiffusionSchedule, cfg: GscConfig = GscConfig(),
                rng: np.random.Generator | None = None) -> tuple[np.ndarray, PosteriorUpdateReport]:
    """Single reconstruction of the map behind ``obs``."""
    rng = np.random.default_rng() if rng is None else rng
    maps, report = reconstruct_batch(obs, prior, sched, cfg, [rng])
    return maps[0], report
