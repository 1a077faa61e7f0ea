"""Synthetic spectrum maps: path loss with correlated log-normal shadowing, sinc-sum PSD weights.

A map is a sum over transmitters of ``psd_weight * SLF`` plus white noise,
clamped at zero and divided by a dataset-wide peak. Maps are plain
``(rows, cols)`` float arrays.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

MAGIC = b"GSCMAP01"
HEADER = struct.Struct("<8sIIII8x")
DTYPE_FLOAT32 = 1


class MapFormatError(OSError):
    """Malformed or truncated map tensor file."""


@dataclass(frozen=True)
class TransmitterSpec:
    location: tuple[float, float]
    power: float
    path_loss_exponent: float
    psd_weight: float = 1.0


@dataclass(frozen=True)
class MapConfig:
    rows: int = 50
    cols: int = 50
    extent: float = 50.0                    # side length of the area in metres
    tx_count_range: tuple[int, int] = (1, 10)
    tx_power_range: tuple[float, float] = (0.5, 1.0)
    gamma_range: tuple[float, float] = (2.0, 3.5)
    reference_distance: float = 1.0         # metres; path loss is (1 + d / d_ref)^-gamma
    shadowing_sigma: float = 4.0            # dB
    decorrelation_distance: float = 3.0     # grid cells
    noise_sigma: float = 1e-3               # absolute, before normalisation
    sinc_count_range: tuple[int, int] = (1, 3)
    sinc_center_range: tuple[float, float] = (-1.0, 1.0)
    sinc_width_range: tuple[float, float] = (0.5, 2.0)
    sinc_power_range: tuple[float, float] = (0.5, 1.0)
    analysis_frequency: float = 0.0
    normalization: str = "unit_interval"
    peak_percentile: float = 99.5

    def __post_init__(self):
        if self.rows < 8 or self.cols < 8:
            raise ValueError("maps must be at least 8x8")
        for name in ("tx_count_range", "tx_power_range", "gamma_range", "sinc_count_range",
                     "sinc_center_range", "sinc_width_range", "sinc_power_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} is empty: {lo} > {hi}")
        if self.tx_count_range[0] < 0 or self.sinc_count_range[0] < 0:
            raise ValueError("counts must be nonnegative")
        if self.tx_power_range[0] <= 0 or self.gamma_range[0] <= 0 or self.sinc_width_range[0] <= 0:
            raise ValueError("powers, path-loss exponents and sinc widths must be positive")
        if self.shadowing_sigma < 0 or self.noise_sigma < 0:
            raise ValueError("sigmas must be nonnegative")
        if self.decorrelation_distance <= 0 or self.extent <= 0 or self.reference_distance <= 0:
            raise ValueError("decorrelation_distance, extent and reference_distance must be positive")
        if self.normalization != "unit_interval":
            raise ValueError(f"unsupported normalization {self.normalization!r}")
        if not 0 < self.peak_percentile <= 100:
            raise ValueError("peak_percentile must lie in (0, 100]")

    @property
    def cell_size(self) -> float:
        return self.extent / max(self.rows, self.cols)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v
                for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "MapConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown map config keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def shadowing_field(rows: int, cols: int, sigma_db: float, decorrelation: float,
                    rng: np.random.Generator) -> np.ndarray:
    """Zero-mean Gaussian field in dB with per-cell std ``sigma_db``.

    White noise is filtered with an ``exp(-d / decorrelation)`` kernel that is
    normalised to unit energy, so every output cell has exactly unit variance
    before scaling.
    """
    radius = int(np.ceil(5 * decorrelation))
    k = np.arange(-radius, radius + 1)
    kernel = np.exp(-np.hypot(k[:, None], k[None, :]) / decorrelation)
    kernel /= np.sqrt((kernel ** 2).sum())
    white = rng.standard_normal((rows + 2 * radius, cols + 2 * radius))
    return sigma_db * fftconvolve(white, kernel, mode="valid")


def _distance_grid(rows, cols, location, cell_size):
    r, c = location
    ii, jj = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    return cell_size * np.hypot(ii - r, jj - c)


def generate_slf(tx: TransmitterSpec, config: MapConfig,
                 rng: np.random.Generator | None = None) -> np.ndarray:
    """Spatial loss field ``power * (1 + d / d_ref)^-gamma * 10^(xi / 10)`` of one transmitter."""
    r, c = tx.location
    if not (0 <= r <= config.rows - 1 and 0 <= c <= config.cols - 1):
        raise ValueError(f"transmitter at {tx.location} outside the grid")
    if tx.power <= 0 or tx.path_loss_exponent <= 0:
        raise ValueError("transmitter power and path-loss exponent must be positive")
    d = _distance_grid(config.rows, config.cols, tx.location, config.cell_size)
    slf = tx.power * (1.0 + d / config.reference_distance) ** (-tx.path_loss_exponent)
    if config.shadowing_sigma > 0:
        if rng is None:
            raise ValueError("rng required when shadowing is enabled")
        xi = shadowing_field(config.rows, config.cols, config.shadowing_sigma,
                             config.decorrelation_distance, rng)
        slf = slf * 10.0 ** (xi / 10.0)
    return slf


def sinc_sum(frequency: float, centers, widths, powers) -> float:
    """``sum_k p_k sinc((f - c_k) / w_k)``, clamped at zero (normalised sinc)."""
    centers, widths, powers = (np.asarray(v, dtype=np.float64) for v in (centers, widths, powers))
    total = float(np.sum(powers * np.sinc((frequency - centers) / widths)))
    return max(total, 0.0)


def generate_psd_weight(config: MapConfig, rng: np.random.Generator) -> float:
    """A random sinc-sum PSD evaluated at the analysis frequency."""
    n = int(rng.integers(config.sinc_count_range[0], config.sinc_count_range[1] + 1))
    centers = rng.uniform(*config.sinc_center_range, size=n)
    widths = rng.uniform(*config.sinc_width_range, size=n)
    powers = rng.uniform(*config.sinc_power_range, size=n)
    return sinc_sum(config.analysis_frequency, centers, widths, powers)


def random_transmitter(config: MapConfig, rng: np.random.Generator) -> TransmitterSpec:
    # transmitters sit on cell centres so the source cell carries the peak
    loc = (float(rng.integers(config.rows)), float(rng.integers(config.cols)))
    return TransmitterSpec(
        location=loc,
        power=float(rng.uniform(*config.tx_power_range)),
        path_loss_exponent=float(rng.uniform(*config.gamma_range)),
        psd_weight=generate_psd_weight(config, rng),
    )


def compose_map(transmitters, config: MapConfig, rng: np.random.Generator | None = None,
                noise: bool = True) -> np.ndarray:
    """Unnormalised field ``sum_r w_r SLF_r + N``, clamped at zero."""
    field = np.zeros((config.rows, config.cols))
    for tx in transmitters:
        field += tx.psd_weight * generate_slf(tx, config, rng)
    if noise and config.noise_sigma > 0:
        field += config.noise_sigma * rng.standard_normal(field.shape)
    return np.maximum(field, 0.0)


def generate_raw_map(config: MapConfig, rng: np.random.Generator) -> np.ndarray:
    n_tx = int(rng.integers(config.tx_count_range[0], config.tx_count_range[1] + 1))
    txs = [random_transmitter(config, rng) for _ in range(n_tx)]
    return compose_map(txs, config, rng)


def normalize(raw: np.ndarray, peak: float) -> np.ndarray:
    if peak <= 0:
        raise ValueError("normalisation peak must be positive")
    return np.clip(raw / peak, 0.0, 1.0)


def generate_map(config: MapConfig, rng: np.random.Generator, peak: float | None = None) -> np.ndarray:
    """One normalised map; without ``peak`` the map is scaled by its own maximum."""
    raw = generate_raw_map(config, rng)
    if peak is None:
        top = raw.max()
        peak = top if top > 0 else 1.0
    return normalize(raw, peak)


# -- tensor files -------------------------------------------------------------

def write_maps(path, maps) -> str:
    """Write a ``(count, rows, cols)`` stack as a GSCMAP01 file; returns its sha256."""
    maps = np.asarray(maps)
    if maps.ndim == 2:
        maps = maps[None]
    if maps.ndim != 3:
        raise ValueError(f"expected (count, rows, cols), got shape {maps.shape}")
    count, rows, cols = maps.shape
    blob = HEADER.pack(MAGIC, count, rows, cols, DTYPE_FLOAT32) + maps.astype("<f4").tobytes()
    path = Path(path)
    try:
        path.write_bytes(blob)
    except OSError as exc:
        raise OSError(f"cannot write map file {path}: {exc.strerror or exc}") from exc
    return hashlib.sha256(blob).hexdigest()


def read_maps(path) -> np.ndarray:
    """Read a GSCMAP01 file as a float32 ``(count, rows, cols)`` array."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read map file {path}: {exc.strerror or exc}") from exc
    if len(blob) < HEADER.size:
        raise MapFormatError(f"{path}: truncated header")
    magic, count, rows, cols, dtype = HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise MapFormatError(f"{path}: bad magic {magic!r}")
    if dtype != DTYPE_FLOAT32:
        raise MapFormatError(f"{path}: unsupported dtype tag {dtype}")
    expected = HEADER.size + 4 * count * rows * cols
    if len(blob) != expected:
        raise MapFormatError(f"{path}: expected {expected} bytes, found {len(blob)}")
    data = np.frombuffer(blob, dtype="<f4", offset=HEADER.size)
    return data.reshape(count, rows, cols).astype(np.float32)


def file_checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass(frozen=True)
class DatasetSummary:
    count: int
    peak: float
    checksum: str
    path: str


def metadata_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def generate_dataset(config: MapConfig, count: int, path, seed: int = 0,
                     peak: float | None = None) -> DatasetSummary:
    """Generate ``count`` maps, normalise them and persist tensor + JSON sidecar.

    Without an explicit ``peak`` the normalisation peak is the configured
    percentile of all raw pixel values in this set; pass the training peak
    when generating evaluation data.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    raw = np.stack([generate_raw_map(config, rng) for _ in range(count)])
    if peak is None:
        peak = float(np.percentile(raw, config.peak_percentile))
        if peak <= 0:
            peak = float(raw.max()) or 1.0
    maps = normalize(raw, peak)
    checksum = write_maps(path, maps)
    meta = {
        "format": "GSCMAP01",
        "count": count,
        "rows": config.rows,
        "cols": config.cols,
        "peak": peak,
        "seed": seed,
        "checksum": checksum,
        "config": config.to_dict(),
    }
    meta_file = metadata_path(path)
    try:
        meta_file.write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write metadata {meta_file}: {exc.strerror or exc}") from exc
    return DatasetSummary(count=count, peak=peak, checksum=checksum, path=str(path))


def load_dataset(path) -> tuple[np.ndarray, dict]:
    """Maps plus sidecar metadata (empty dict when the sidecar is absent)."""
    maps = read_maps(path)
    meta_file = metadata_path(path)
    meta = json.loads(meta_file.read_text(encoding="utf-8")) if meta_file.exists() else {}
    return maps, meta
