"""Observation masks, linear and quantized measurement models, and the quantizer's interval algebra."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class ObservationError(ValueError):
    """Inconsistent mask, values or quantizer."""


@dataclass(frozen=True, eq=False)
class ObservationMask:
    """Selection mask as sorted linear pixel indices (row-major)."""

    rows: int
    cols: int
    observed: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.observed, dtype=np.int64).ravel()
        if idx.size and (idx[0] < 0 or idx[-1] >= self.rows * self.cols):
            raise ObservationError("mask index out of range")
        if idx.size > 1 and np.any(np.diff(idx) <= 0):
            raise ObservationError("mask indices must be unique and strictly increasing")
        idx = idx.copy()
        idx.setflags(write=False)
        object.__setattr__(self, "observed", idx)

    @classmethod
    def from_indices(cls, rows: int, cols: int, indices) -> "ObservationMask":
        return cls(rows, cols, np.unique(np.asarray(indices, dtype=np.int64)))

    @property
    def size(self) -> int:
        return int(self.observed.size)

    @property
    def ratio(self) -> float:
        return self.size / (self.rows * self.cols)

    def __len__(self) -> int:
        return self.size

    def dense(self) -> np.ndarray:
        m = np.zeros(self.rows * self.cols, dtype=bool)
        m[self.observed] = True
        return m.reshape(self.rows, self.cols)

    @property
    def unobserved(self) -> np.ndarray:
        return np.flatnonzero(~self.dense().ravel())

    def select(self, x) -> np.ndarray:
        """``H x``: the observed entries of ``x`` (trailing two axes are the grid)."""
        x = np.asarray(x)
        if x.shape[-2:] != (self.rows, self.cols):
            raise ObservationError(f"map shape {x.shape[-2:]} does not match mask {(self.rows, self.cols)}")
        return x.reshape(*x.shape[:-2], -1)[..., self.observed]

    def union(self, indices) -> "ObservationMask":
        return ObservationMask.from_indices(self.rows, self.cols,
                                            np.concatenate([self.observed, np.asarray(indices, dtype=np.int64)]))


@dataclass(frozen=True)
class QuantizerSpec:
    """Uniform ``bits``-bit quantizer on ``[x_min, x_max]`` with unbounded outer bins.

    Level ``k`` covers ``(l_k, u_k]``; a value exactly on a threshold falls in
    the lower level.
    """

    bits: int
    x_min: float = 0.0
    x_max: float = 1.0
    thresholds: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if int(self.bits) != self.bits or self.bits < 1:
            raise ObservationError(f"bits must be a positive integer, got {self.bits}")
        if not self.x_min < self.x_max:
            raise ObservationError(f"need x_min < x_max, got {self.x_min}, {self.x_max}")
        th = self.x_min + self.step * np.arange(1, self.levels)
        th.setflags(write=False)
        object.__setattr__(self, "thresholds", th)

    @property
    def levels(self) -> int:
        return 2 ** int(self.bits)

    @property
    def step(self) -> float:
        return (self.x_max - self.x_min) / self.levels

    @property
    def lower(self) -> np.ndarray:
        return np.concatenate([[-np.inf], self.thresholds])

    @property
    def upper(self) -> np.ndarray:
        return np.concatenate([self.thresholds, [np.inf]])

    @property
    def representatives(self) -> np.ndarray:
        return self.x_min + self.step * (np.arange(self.levels) + 0.5)

    def quantize(self, r) -> np.ndarray:
        return np.searchsorted(self.thresholds, np.asarray(r, dtype=np.float64), side="left")

    def check_levels(self, levels) -> np.ndarray:
        levels = np.asarray(levels)
        if levels.size and (not np.all(levels == np.round(levels))
                            or levels.min() < 0 or levels.max() >= self.levels):
            raise ObservationError(f"invalid level index for a {self.bits}-bit quantizer")
        return levels.astype(np.int64)

    def interval(self, levels) -> tuple[np.ndarray, np.ndarray]:
        """``(l, u)`` bounds of the given level indices."""
        levels = self.check_levels(levels)
        return self.lower[levels], self.upper[levels]

    def dequantize(self, levels) -> np.ndarray:
        return self.representatives[self.check_levels(levels)]

    def to_dict(self) -> dict:
        return {"bits": int(self.bits), "x_min": float(self.x_min), "x_max": float(self.x_max)}


@dataclass(frozen=True, eq=False)
class Observation:
    """Measured values at the mask positions, in mask order.

    For quantized observations ``values`` holds level indices and
    ``noise_sigma`` is the pre-quantization noise std.
    """

    mask: ObservationMask
    values: np.ndarray
    noise_sigma: float = 0.0
    quantizer: QuantizerSpec | None = None

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64).ravel().copy()
        if vals.size != self.mask.size:
            raise ObservationError(f"{vals.size} values for {self.mask.size} mask entries")
        if self.noise_sigma < 0:
            raise ObservationError("noise_sigma must be nonnegative")
        if self.quantizer is not None:
            vals = self.quantizer.check_levels(vals).astype(np.float64)
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def is_quantized(self) -> bool:
        return self.quantizer is not None

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.rows, self.mask.cols

    def levels(self) -> np.ndarray:
        if self.quantizer is None:
            raise ObservationError("linear observation has no levels")
        return self.values.astype(np.int64)

    def real_values(self) -> np.ndarray:
        """Measured values, dequantized to bin representatives when quantized."""
        if self.quantizer is None:
            return self.values
        return self.quantizer.dequantize(self.levels())

    def augment(self, indices, values) -> "Observation":
        """New observation with extra measurements merged in sorted mask order."""
        indices = np.asarray(indices, dtype=np.int64)
        if np.intersect1d(indices, self.mask.observed).size:
            raise ObservationError("augmenting with already observed pixels")
        all_idx = np.concatenate([self.mask.observed, indices])
        all_val = np.concatenate([self.values, np.asarray(values, dtype=np.float64)])
        order = np.argsort(all_idx, kind="stable")
        mask = ObservationMask(self.mask.rows, self.mask.cols, all_idx[order])
        return Observation(mask, all_val[order], self.noise_sigma, self.quantizer)

    def to_dict(self) -> dict:
        vals = self.values.astype(int).tolist() if self.is_quantized else self.values.tolist()
        return {
            "rows": self.mask.rows,
            "cols": self.mask.cols,
            "indices": self.mask.observed.tolist(),
            "values": vals,
            "sigma": float(self.noise_sigma),
            "quantizer": None if self.quantizer is None else self.quantizer.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Observation":
        expected = {"rows", "cols", "indices", "values", "sigma", "quantizer"}
        if set(d) != expected:
            raise ObservationError(f"observation keys must be {sorted(expected)}, got {sorted(d)}")
        q = None if d["quantizer"] is None else QuantizerSpec(**d["quantizer"])
        idx = np.asarray(d["indices"], dtype=np.int64)
        vals = np.asarray(d["values"], dtype=np.float64)
        if idx.size != vals.size:
            raise ObservationError("indices and values differ in length")
        order = np.argsort(idx, kind="stable")
        mask = ObservationMask(int(d["rows"]), int(d["cols"]), idx[order])
        return cls(mask, vals[order], float(d["sigma"]), q)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Observation":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def random_mask(rows: int, cols: int, ratio: float, rng: np.random.Generator) -> ObservationMask:
    """Uniform random mask observing ``round(ratio * rows * cols)`` pixels."""
    if not 0.0 < ratio <= 1.0:
        raise ObservationError(f"ratio must lie in (0, 1], got {ratio}")
    n = rows * cols
    m = int(np.floor(ratio * n + 0.5))
    if m < 1:
        raise ObservationError(f"ratio {ratio} observes no pixels on a {rows}x{cols} grid")
    idx = np.sort(rng.choice(n, size=m, replace=False))
    return ObservationMask(rows, cols, idx)


def _check_fit(x, mask):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (mask.rows, mask.cols):
        raise ObservationError(f"map shape {x.shape} does not match mask {(mask.rows, mask.cols)}")
    return x


def observe_linear(x, mask: ObservationMask, sigma_y: float, rng: np.random.Generator) -> Observation:
    """``y = H x + n`` with i.i.d. ``N(0, sigma_y^2)`` noise."""
    x = _check_fit(x, mask)
    if sigma_y < 0:
        raise ObservationError("sigma_y must be nonnegative")
    y = mask.select(x)
    if sigma_y > 0:
        y = y + sigma_y * rng.standard_normal(y.shape)
    return Observation(mask, y, float(sigma_y))


def build_quantizer(bits: int, x_min: float = 0.0, x_max: float = 1.0) -> QuantizerSpec:
    return QuantizerSpec(int(bits), float(x_min), float(x_max))


def observe_quantized(x, mask: ObservationMask, sigma: float, q: QuantizerSpec,
                      rng: np.random.Generator) -> Observation:
    """``y = Q(H x + n)``; noise is added before quantization."""
    x = _check_fit(x, mask)
    if sigma < 0:
        raise ObservationError("sigma must be nonnegative")
    r = mask.select(x)
    if sigma > 0:
        r = r + sigma * rng.standard_normal(r.shape)
    return Observation(mask, q.quantize(r), float(sigma), q)


def measure(x, indices, obs: Observation, rng: np.random.Generator) -> np.ndarray:
    """New measurements of ``x`` at ``indices`` under the same model as ``obs``."""
    x = np.asarray(x, dtype=np.float64)
    r = x.ravel()[np.asarray(indices, dtype=np.int64)]
    if obs.noise_sigma > 0:
        r = r + obs.noise_sigma * rng.standard_normal(r.shape)
    return r if obs.quantizer is None else obs.quantizer.quantize(r)
