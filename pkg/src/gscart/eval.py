"""PSNR metric and the grid experiment harness comparing GSC and IDW."""

from __future__ import annotations

import csv
import io
import itertools
import json
import traceback
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baseline import IdwConfig, idw_reconstruct
from .errors import ConfigError, ShapeMismatchError
from .gsc import GscConfig, reconstruct_batch
from .observe import build_quantizer, observe_linear, observe_quantized, random_mask
from .schedule import DiffusionSchedule

PSNR_CAP = 99.0
METHODS = ("gsc", "idw")
CSV_COLUMNS = ("method", "ratio", "sigma", "bits", "seed", "map", "psnr_db", "mse")


def mse(x, x_hat) -> float:
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ShapeMismatchError(f"shape mismatch: {x.shape} vs {x_hat.shape}")
    return float(np.mean((x - x_hat) ** 2))


def psnr(x, x_hat, peak: float = 1.0, cap: float = PSNR_CAP) -> float:
    """``10 log10(peak^2 / MSE)`` in dB, or ``cap`` for a perfect match."""
    if not peak > 0:
        raise ValueError("peak must be positive")
    err = mse(x, x_hat)
    if err == 0:
        return cap
    return min(cap, 10.0 * np.log10(peak * peak / err))


@dataclass(frozen=True)
class MetricRecord:
    method: str
    ratio: float
    sigma: float
    bits: int | None
    seed: int
    map: int
    psnr_db: float
    mse: float

    def sort_key(self):
        return (self.method, self.ratio, self.sigma, -1 if self.bits is None else self.bits,
                self.seed, self.map)

    def row(self) -> list:
        return [self.method, f"{self.ratio:.6g}", f"{self.sigma:.6g}",
                "" if self.bits is None else str(self.bits), str(self.seed), str(self.map),
                f"{self.psnr_db:.6f}", f"{self.mse:.9e}"]


@dataclass
class ExperimentGrid:
    """Axes of an experiment; ``bits`` entries of ``None`` mean unquantized observations.

    Quantized cells are run for GSC only, since IDW sees just bin centres.
    ``gsc_samples`` chains are averaged into each GSC estimate.
    """

    map_count: int = 20
    ratios: list = field(default_factory=lambda: [0.2, 0.15, 0.1, 0.05])
    sigmas: list = field(default_factory=lambda: [0.0])
    bits: list = field(default_factory=lambda: [None])
    methods: list = field(default_factory=lambda: ["gsc", "idw"])
    seeds: list = field(default_factory=lambda: [0])
    gsc_samples: int = 1
    peak: float = 1.0

    def __post_init__(self):
        for name in ("ratios", "sigmas", "bits", "methods", "seeds"):
            if not list(getattr(self, name)):
                raise ConfigError(f"experiment axis {name!r} is empty")
        if self.map_count < 1 or self.gsc_samples < 1:
            raise ConfigError("map_count and gsc_samples must be positive")
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise ConfigError(f"unknown methods {sorted(bad)}; expected {METHODS}")

    def cells(self):
        for ratio, sigma, bits, seed in itertools.product(self.ratios, self.sigmas, self.bits, self.seeds):
            for method in self.methods:
                if method == "idw" and bits is not None:
                    continue
                yield method, float(ratio), float(sigma), None if bits is None else int(bits), int(seed)

    def to_dict(self) -> dict:
        return {"map_count": self.map_count, "ratios": list(self.ratios), "sigmas": list(self.sigmas),
                "bits": list(self.bits), "methods": list(self.methods), "seeds": list(self.seeds),
                "gsc_samples": self.gsc_samples, "peak": self.peak}


@dataclass
class ExperimentResult:
    records: list
    errors: list

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in sorted(self.records, key=MetricRecord.sort_key):
            w.writerow(r.row())
        return buf.getvalue()

    def summary(self) -> dict:
        """Mean PSNR/MSE per (method, ratio, sigma, bits) over maps and seeds."""
        groups = defaultdict(list)
        for r in self.records:
            groups[(r.method, r.ratio, r.sigma, r.bits)].append(r)
        out = {}
        for key, recs in groups.items():
            out[key] = {"psnr_db": float(np.mean([r.psnr_db for r in recs])),
                        "mse": float(np.mean([r.mse for r in recs])),
                        "n": len(recs)}
        return out

    def mean_psnr(self, method, ratio, sigma=0.0, bits=None) -> float:
        return self.summary()[(method, float(ratio), float(sigma), bits)]["psnr_db"]

    def render_summary(self) -> str:
        summ = self.summary()
        lines = [f"{'method':<6} {'ratio':>6} {'sigma':>6} {'bits':>4} {'n':>4} {'psnr_db':>9} {'mse':>11}"]
        for key in sorted(summ, key=lambda k: (k[0], -k[1], k[2], -1 if k[3] is None else k[3])):
            method, ratio, sigma, bits = key
            s = summ[key]
            lines.append(f"{method:<6} {ratio:>6.3f} {sigma:>6.3f} {'-' if bits is None else bits:>4} "
                         f"{s['n']:>4} {s['psnr_db']:>9.3f} {s['mse']:>11.4e}")
        if self.errors:
            lines.append(f"{len(self.errors)} cell(s) failed; see errors.json")
        return "\n".join(lines) + "\n"


def _observation(x, ratio, sigma, bits, seed, map_idx):
    # the mask depends on (seed, map, ratio) only, so noise and bit-depth
    # sweeps compare reconstructions from the same sampling pattern
    rows, cols = x.shape
    mask_rng = np.random.default_rng([seed, map_idx, int(round(ratio * 1e6))])
    mask = random_mask(rows, cols, ratio, mask_rng)
    noise_rng = np.random.default_rng([seed, map_idx, int(round(ratio * 1e6)),
                                       int(round(sigma * 1e6)), 0 if bits is None else bits, 1])
    if bits is None:
        return observe_linear(x, mask, sigma, noise_rng)
    return observe_quantized(x, mask, sigma, build_quantizer(bits), noise_rng)


def run_experiment(grid: ExperimentGrid, maps, out=None, prior=None,
                   sched: DiffusionSchedule | None = None, gsc_cfg: GscConfig = GscConfig(),
                   idw_cfg: IdwConfig = IdwConfig()) -> ExperimentResult:
    """Evaluate every grid cell on the first ``grid.map_count`` of ``maps``.

    A failing cell is logged in ``errors`` and the rest of the grid still
    runs. When ``out`` is given, ``records.csv``, ``summary.txt`` and
    (if needed) ``errors.json`` are written there.
    """
    maps = np.asarray(maps, dtype=np.float64)
    if maps.ndim != 3 or maps.shape[0] < grid.map_count:
        raise ConfigError(f"need {grid.map_count} maps, got array of shape {maps.shape}")
    if "gsc" in grid.methods and (prior is None or sched is None):
        raise ConfigError("GSC cells need a prior and a schedule")
    records, errors = [], []
    for method, ratio, sigma, bits, seed in grid.cells():
        for k in range(grid.map_count):
            x = maps[k]
            try:
                obs = _observation(x, ratio, sigma, bits, seed, k)
                if method == "idw":
                    est = idw_reconstruct(obs, idw_cfg)
                else:
                    seq = np.random.SeedSequence([seed, k, 7])
                    chains = [np.random.default_rng(s) for s in seq.spawn(grid.gsc_samples)]
                    samples, _ = reconstruct_batch(obs, prior, sched, gsc_cfg, chains)
                    est = samples.mean(axis=0)
                err = mse(x, est)
                records.append(MetricRecord(method, ratio, sigma, bits, seed, k,
                                            psnr(x, est, grid.peak), err))
            except Exception as exc:  # recorded per cell, grid continues
                errors.append({"method": method, "ratio": ratio, "sigma": sigma, "bits": bits,
                               "seed": seed, "map": k, "error": f"{type(exc).__name__}: {exc}",
                               "traceback": traceback.format_exc(limit=3)})
    result = ExperimentResult(records, errors)
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "records.csv").write_text(result.to_csv(), encoding="utf-8")
        (out / "summary.txt").write_text(result.render_summary(), encoding="utf-8")
        if errors:
            (out / "errors.json").write_text(json.dumps(errors, indent=2), encoding="utf-8")
    return result
