"""Diffusion variance schedule, forward corruption, Tweedie estimate and reverse step.

Steps are 1-based throughout (``1 <= t <= T``); per-step arrays are indexed
with ``t - 1``. ``alpha_bar_0`` is defined as 1, which makes the final
reverse step deterministic.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np


class ScheduleError(ValueError):
    """Invalid schedule parameters or step index."""


GAMMA_RULES = ("flat", "gaussian")


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    """Immutable per-step scalars of a DDPM schedule.

    ``gamma_sq`` is the variance assigned to ``x0 | x_t`` by the posterior
    updates. The ``"flat"`` rule uses ``(1 - abar) / abar``; the ``"gaussian"``
    rule uses the exact conditional variance for an i.i.d. Gaussian signal of
    variance ``signal_var``. Both are multiplied by ``gamma_scale``.
    """

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    alpha_bar_prev: np.ndarray
    coef_a: np.ndarray
    coef_b: np.ndarray
    sigma_tilde: np.ndarray
    gamma_sq: np.ndarray
    gamma_rule: str = "flat"
    gamma_scale: float = 1.0
    signal_var: float | None = None
    kind: str = "linear"
    _digest: str = field(default="", repr=False)

    @property
    def T(self) -> int:
        return int(self.beta.size)

    def check_step(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise ScheduleError(f"step {t} outside [1, {self.T}]")
        return t

    @property
    def digest(self) -> str:
        """Hash of the beta sequence; identifies the schedule a network was trained on."""
        return self._digest

    def with_gamma(self, rule: str = "flat", scale: float = 1.0,
                   signal_var: float | None = None) -> "DiffusionSchedule":
        """Copy of this schedule with a different gamma_sq rule."""
        return _assemble(self.beta, self.kind, rule, scale, signal_var)

    def to_dict(self) -> dict:
        return {
            "T": self.T,
            "kind": self.kind,
            "beta_start": float(self.beta[0]),
            "beta_end": float(self.beta[-1]),
            "gamma_rule": self.gamma_rule,
            "gamma_scale": self.gamma_scale,
            "signal_var": self.signal_var,
            "digest": self.digest,
        }


def _gamma_sq(alpha_bar, rule, scale, signal_var):
    if rule == "flat":
        g = (1.0 - alpha_bar) / alpha_bar
    elif rule == "gaussian":
        if signal_var is None or signal_var <= 0:
            raise ScheduleError("gaussian gamma rule needs signal_var > 0")
        g = signal_var * (1.0 - alpha_bar) / (alpha_bar * signal_var + 1.0 - alpha_bar)
    else:
        raise ScheduleError(f"unknown gamma rule {rule!r}; expected one of {GAMMA_RULES}")
    return scale * g


def _assemble(beta, kind, gamma_rule, gamma_scale, signal_var):
    if gamma_scale <= 0:
        raise ScheduleError("gamma_scale must be positive")
    beta = np.asarray(beta, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    one_minus = 1.0 - alpha_bar
    # beta so small that abar rounds to 1 leaves the coefficients undefined
    with np.errstate(divide="ignore", invalid="ignore"):
        coef_a = np.sqrt(alpha_bar_prev) * beta / one_minus
        coef_b = np.sqrt(alpha) * (1.0 - alpha_bar_prev) / one_minus
        sigma_tilde = np.sqrt(beta * (1.0 - alpha_bar_prev) / one_minus)
    gamma_sq = _gamma_sq(alpha_bar, gamma_rule, gamma_scale, signal_var)
    for arr in (beta, alpha, alpha_bar, alpha_bar_prev, coef_a, coef_b, sigma_tilde, gamma_sq):
        arr.setflags(write=False)
    digest = hashlib.sha256(beta.astype("<f8").tobytes()).hexdigest()[:16]
    return DiffusionSchedule(
        beta=beta, alpha=alpha, alpha_bar=alpha_bar, alpha_bar_prev=alpha_bar_prev,
        coef_a=coef_a, coef_b=coef_b, sigma_tilde=sigma_tilde, gamma_sq=gamma_sq,
        gamma_rule=gamma_rule, gamma_scale=float(gamma_scale),
        signal_var=None if signal_var is None else float(signal_var),
        kind=kind, _digest=digest,
    )


def build_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02,
                   kind: str = "linear", *, gamma_rule: str = "flat",
                   gamma_scale: float = 1.0, signal_var: float | None = None) -> DiffusionSchedule:
    """Linear beta schedule from ``beta_start`` to ``beta_end`` inclusive."""
    if kind != "linear":
        raise ScheduleError(f"unsupported schedule kind {kind!r}")
    if int(T) != T or T < 1:
        raise ScheduleError(f"T must be a positive integer, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    return _assemble(beta, kind, gamma_rule, gamma_scale, signal_var)


def default_schedule(T: int = 100, **gamma_kw) -> DiffusionSchedule:
    """The 1e-4..0.02 linear schedule, rescaled so that ``alpha_bar_T`` stays near 0 for short chains.

    For ``T = 1000`` this is exactly the classic DDPM schedule; for smaller
    ``T`` both endpoints are multiplied by ``1000 / T`` (capped below 1).
    """
    scale = 1000.0 / T
    beta_end = min(0.02 * scale, 0.999)
    beta_start = min(1e-4 * scale, beta_end)
    return build_schedule(T, beta_start, beta_end, **gamma_kw)


def forward_diffuse(x0, t: int, sched: DiffusionSchedule, rng: np.random.Generator | None = None,
                    *, eps=None):
    """Draw ``x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`` in one shot.

    Pass ``eps`` to use a known noise realisation instead of sampling.
    """
    t = sched.check_step(t)
    x0 = np.asarray(x0, dtype=np.float64)
    if eps is None:
        if rng is None:
            raise ValueError("either rng or eps is required")
        eps = rng.standard_normal(x0.shape)
    ab = sched.alpha_bar[t - 1]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * np.asarray(eps, dtype=np.float64)


def forward_step(x_prev, t: int, sched: DiffusionSchedule, rng: np.random.Generator):
    """One Markov step of the forward kernel ``q(x_t | x_{t-1})``."""
    t = sched.check_step(t)
    x_prev = np.asarray(x_prev, dtype=np.float64)
    beta = sched.beta[t - 1]
    return np.sqrt(1.0 - beta) * x_prev + np.sqrt(beta) * rng.standard_normal(x_prev.shape)


def tweedie_x0(x_t, eps_pred, t: int, sched: DiffusionSchedule):
    """Clean-signal estimate from a noisy state and a noise prediction."""
    t = sched.check_step(t)
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_pred = np.asarray(eps_pred, dtype=np.float64)
    if x_t.shape != eps_pred.shape:
        raise ValueError(f"shape mismatch: {x_t.shape} vs {eps_pred.shape}")
    ab = sched.alpha_bar[t - 1]
    return (x_t - np.sqrt(1.0 - ab) * eps_pred) / np.sqrt(ab)


def reverse_step(x_t, x0_est, t: int, sched: DiffusionSchedule,
                 rng: np.random.Generator | None = None, *, z=None):
    """``x_{t-1} = a_t x0_est + b_t x_t + sigma_tilde_t z``.

    At ``t = 1`` the noise term vanishes and no randomness is consumed.
    """
    t = sched.check_step(t)
    x_t = np.asarray(x_t, dtype=np.float64)
    x0_est = np.asarray(x0_est, dtype=np.float64)
    if x_t.shape != x0_est.shape:
        raise ValueError(f"shape mismatch: {x_t.shape} vs {x0_est.shape}")
    i = t - 1
    mean = sched.coef_a[i] * x0_est + sched.coef_b[i] * x_t
    if t == 1:
        return mean
    if z is None:
        if rng is None:
            raise ValueError("either rng or z is required for t > 1")
        z = rng.standard_normal(x_t.shape)
    return mean + sched.sigma_tilde[i] * np.asarray(z, dtype=np.float64)
