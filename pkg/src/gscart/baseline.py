"""Inverse-distance-weighting interpolation baseline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .observe import Observation, ObservationError


@dataclass(frozen=True)
class IdwConfig:
    power: float = 2.0
    epsilon: float = 1e-12

    def __post_init__(self):
        if self.power <= 0 or self.epsilon <= 0:
            raise ValueError("IDW power and epsilon must be positive")


def idw_reconstruct(obs: Observation, cfg: IdwConfig = IdwConfig()) -> np.ndarray:
    """Fill unobserved pixels with ``sum w_m y_m / sum w_m``, ``w_m = 1 / (d_m^p + eps)``.

    Quantized observations are replaced by their bin representatives.
    """
    if obs.mask.size == 0:
        raise ObservationError("IDW needs at least one observed pixel")
    return kernels.idw_fill(obs.mask.rows, obs.mask.cols, obs.mask.observed,
                            obs.real_values(), cfg.power, cfg.epsilon)
