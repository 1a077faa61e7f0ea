"""Denoising priors: the noise-prediction interface, an exact Gaussian prior and a trained U-Net.

Priors take ``x_t`` shaped ``(rows, cols)`` or ``(batch, rows, cols)`` and a
1-based step ``t`` and return a noise estimate of the same shape.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np
import torch

from .errors import ModelFormatError, NumericalError, ScheduleMismatchError, ShapeMismatchError
from .mapgen import read_maps
from .nets import UNet
from .schedule import DiffusionSchedule

log = logging.getLogger(__name__)

MODEL_MAGIC = b"GSCNET01"


@runtime_checkable
class DenoisingPrior(Protocol):
    rows: int
    cols: int

    def predict_noise(self, x_t, t: int) -> np.ndarray: ...


def _check_shape(prior, x_t):
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_t.ndim not in (2, 3) or x_t.shape[-2:] != (prior.rows, prior.cols):
        raise ShapeMismatchError(
            f"prior supports {prior.rows}x{prior.cols} maps, got array of shape {x_t.shape}")
    return x_t


def predict_noise(prior: DenoisingPrior, x_t, t: int) -> np.ndarray:
    return prior.predict_noise(x_t, t)


class AnalyticGaussianPrior:
    """Exact noise predictor for ``x0 ~ N(mean_map, tau_sq I)``.

    Its noise estimate makes the Tweedie formula return the conjugate
    conditional mean ``E[x0 | x_t]``.
    """

    def __init__(self, mean_map, tau_sq: float, schedule: DiffusionSchedule):
        if not tau_sq > 0:
            raise ValueError("tau_sq must be positive")
        self.mean_map = np.asarray(mean_map, dtype=np.float64)
        if self.mean_map.ndim != 2:
            raise ValueError("mean_map must be a 2-D grid")
        self.tau_sq = float(tau_sq)
        self.schedule = schedule
        self.rows, self.cols = self.mean_map.shape

    @property
    def data_affine(self) -> tuple[float, float]:
        return 0.0, 1.0

    def conditional_mean(self, x_t, t: int) -> np.ndarray:
        t = self.schedule.check_step(t)
        x_t = _check_shape(self, x_t)
        ab = self.schedule.alpha_bar[t - 1]
        gain = np.sqrt(ab) * self.tau_sq / (ab * self.tau_sq + 1.0 - ab)
        return self.mean_map + gain * (x_t - np.sqrt(ab) * self.mean_map)

    def conditional_variance(self, t: int) -> float:
        ab = self.schedule.alpha_bar[self.schedule.check_step(t) - 1]
        return self.tau_sq * (1.0 - ab) / (ab * self.tau_sq + 1.0 - ab)

    def predict_noise(self, x_t, t: int) -> np.ndarray:
        x_t = _check_shape(self, x_t)
        ab = self.schedule.alpha_bar[self.schedule.check_step(t) - 1]
        return (x_t - np.sqrt(ab) * self.conditional_mean(x_t, t)) / np.sqrt(1.0 - ab)


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 64
    learning_rate: float = 2e-3
    seed: int = 0
    holdout_fraction: float = 0.05
    ema_decay: float = 0.995
    channels: tuple[int, ...] = (16, 32, 64, 64)
    time_dim: int = 32
    augment: bool = True
    standardize: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.holdout_fraction < 1:
            raise ValueError("holdout_fraction must lie in [0, 1)")
        if not 0 <= self.ema_decay < 1:
            raise ValueError("ema_decay must lie in [0, 1)")
        self.channels = tuple(int(c) for c in self.channels)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["channels"] = list(self.channels)
        return d


class LearnedDenoiser:
    """A trained :class:`~gscart.nets.UNet` bound to the schedule it was trained on.

    The network diffuses ``(x - data_shift) / data_scale`` rather than the map
    itself; ``predict_noise`` works in that space and samplers use
    :attr:`data_affine` to move observations in and estimates out.
    """

    def __init__(self, net: UNet, rows: int, cols: int, schedule_digest: str, T: int,
                 metadata: dict | None = None, data_shift: float = 0.0, data_scale: float = 1.0):
        if not data_scale > 0:
            raise ValueError("data_scale must be positive")
        self.net = net.eval()
        self.rows = int(rows)
        self.cols = int(cols)
        self.schedule_digest = schedule_digest
        self.T = int(T)
        self.metadata = dict(metadata or {})
        self.data_shift = float(data_shift)
        self.data_scale = float(data_scale)

    @property
    def data_affine(self) -> tuple[float, float]:
        return self.data_shift, self.data_scale

    @property
    def arch(self) -> dict:
        return {"channels": list(self.net.channels), "time_dim": self.net.time_dim}

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.net.parameters())

    def check_schedule(self, sched: DiffusionSchedule) -> None:
        if sched.digest != self.schedule_digest:
            raise ScheduleMismatchError(
                f"prior trained on schedule {self.schedule_digest}, got {sched.digest}")

    @torch.no_grad()
    def predict_noise(self, x_t, t: int) -> np.ndarray:
        x_t = _check_shape(self, x_t)
        if not 1 <= int(t) <= self.T:
            raise ValueError(f"step {t} outside [1, {self.T}]")
        batch = x_t.reshape(-1, 1, self.rows, self.cols)
        xt = torch.from_numpy(batch.astype(np.float32))
        tt = torch.full((xt.shape[0],), int(t), dtype=torch.long)
        eps = self.net(xt, tt).numpy().astype(np.float64)
        return eps.reshape(x_t.shape)


# -- training -----------------------------------------------------------------

def _dihedral(x: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """Apply one of the 8 square symmetries per sample (``k`` in 0..7)."""
    out = x.clone()
    for code in range(8):
        sel = k == code
        if not sel.any():
            continue
        v = x[sel]
        if code & 4:
            v = v.transpose(-1, -2)
        v = torch.rot90(v, code & 3, dims=(-2, -1))
        out[sel] = v
    return out


def heldout_loss(model, maps, sched: DiffusionSchedule, seed: int = 12345,
                 batch_size: int = 256, data_affine=None) -> float:
    """Mean per-pixel eps-prediction error on ``maps`` with a fixed noise draw.

    ``model`` may be a :class:`LearnedDenoiser` (whose own data affine is
    used) or a bare :class:`UNet`; the zero predictor scores about 1.0.
    """
    if isinstance(model, LearnedDenoiser):
        net, (shift, scale) = model.net, model.data_affine
    else:
        net, (shift, scale) = model, (data_affine or (0.0, 1.0))
    g = torch.Generator().manual_seed(seed)
    x0 = (np.asarray(maps, dtype=np.float64) - shift) / scale
    x0 = torch.as_tensor(x0.astype(np.float32))[:, None]
    ab = torch.tensor(np.array(sched.alpha_bar), dtype=torch.float32)
    was_training = net.training
    net.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for start in range(0, x0.shape[0], batch_size):
            xb = x0[start:start + batch_size]
            t = torch.randint(1, sched.T + 1, (xb.shape[0],), generator=g)
            eps = torch.randn(xb.shape, generator=g)
            a = ab[t - 1][:, None, None, None]
            xt = a.sqrt() * xb + (1 - a).sqrt() * eps
            total += float(((net(xt, t) - eps) ** 2).sum())
            count += eps.numel()
    net.train(was_training)
    return total / count


def train_denoiser(dataset, sched: DiffusionSchedule, cfg: TrainConfig = TrainConfig(),
                   progress=None) -> LearnedDenoiser:
    """Fit a U-Net with the standard eps-matching loss.

    ``dataset`` is a GSCMAP01 path or an array of maps. ``progress`` is an
    optional callback receiving ``(epoch, train_loss)``.
    """
    maps = read_maps(dataset) if isinstance(dataset, (str, Path)) else np.asarray(dataset, np.float32)
    maps = np.asarray(maps, dtype=np.float32)
    if maps.ndim != 3:
        raise ShapeMismatchError(f"expected (count, rows, cols) maps, got shape {maps.shape}")
    n, rows, cols = maps.shape
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(n)
    n_hold = int(round(cfg.holdout_fraction * n)) if n > 1 else 0
    hold, train = maps[order[:n_hold]], maps[order[n_hold:]]
    if cfg.standardize:
        shift, scale = float(train.mean(dtype=np.float64)), float(train.std(dtype=np.float64))
        if not scale > 0:
            scale = 1.0
    else:
        shift, scale = 0.0, 1.0

    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    net = UNet(cfg.channels, cfg.time_dim)
    ema = UNet(cfg.channels, cfg.time_dim)
    ema.load_state_dict(net.state_dict())
    ema.requires_grad_(False)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    steps_per_epoch = max(1, int(np.ceil(train.shape[0] / cfg.batch_size)))
    total_steps = cfg.epochs * steps_per_epoch
    sched_lr = torch.optim.lr_scheduler.OneCycleLR(
        opt, max_lr=cfg.learning_rate, total_steps=total_steps, pct_start=0.1)
    ab = torch.tensor(np.array(sched.alpha_bar), dtype=torch.float32)
    data = torch.from_numpy(((train - shift) / scale).astype(np.float32))[:, None]

    epoch_losses = []
    t0 = time.perf_counter()
    net.train()
    for epoch in range(cfg.epochs):
        perm = torch.randperm(data.shape[0], generator=gen)
        running, seen = 0.0, 0
        for start in range(0, data.shape[0], cfg.batch_size):
            xb = data[perm[start:start + cfg.batch_size]]
            if cfg.augment:
                xb = _dihedral(xb, torch.randint(0, 8, (xb.shape[0],), generator=gen))
            t = torch.randint(1, sched.T + 1, (xb.shape[0],), generator=gen)
            eps = torch.randn(xb.shape, generator=gen)
            a = ab[t - 1][:, None, None, None]
            xt = a.sqrt() * xb + (1 - a).sqrt() * eps
            loss = ((net(xt, t) - eps) ** 2).mean()
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite training loss at epoch {epoch + 1}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched_lr.step()
            with torch.no_grad():
                d = cfg.ema_decay
                for pe, p in zip(ema.parameters(), net.parameters()):
                    pe.mul_(d).add_(p, alpha=1 - d)
            running += loss.item() * xb.shape[0]
            seen += xb.shape[0]
        epoch_losses.append(running / seen)
        log.info("epoch %d/%d loss %.5f", epoch + 1, cfg.epochs, epoch_losses[-1])
        if progress is not None:
            progress(epoch + 1, epoch_losses[-1])

    final = ema if cfg.ema_decay > 0 else net
    final.eval()
    meta = {
        "train_config": cfg.to_dict(),
        "optimizer": "adam+onecycle",
        "epoch_losses": epoch_losses,
        "final_loss": epoch_losses[-1],
        "heldout_loss": heldout_loss(final, hold, sched, data_affine=(shift, scale)) if n_hold else None,
        "heldout_count": n_hold,
        "train_count": int(train.shape[0]),
        "train_seconds": time.perf_counter() - t0,
        "schedule": sched.to_dict(),
    }
    return LearnedDenoiser(final, rows, cols, sched.digest, sched.T, meta, shift, scale)


# -- persistence ----------------------------------------------------------------

def save_prior(denoiser: LearnedDenoiser, path) -> str:
    """Write a GSCNET01 model file; returns its trailing sha256 checksum."""
    state = denoiser.net.state_dict()
    tensors, blobs = [], []
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        tensors.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = json.dumps({
        "rows": denoiser.rows,
        "cols": denoiser.cols,
        "schedule_digest": denoiser.schedule_digest,
        "T": denoiser.T,
        "data_shift": denoiser.data_shift,
        "data_scale": denoiser.data_scale,
        "arch": denoiser.arch,
        "tensors": tensors,
        "metadata": denoiser.metadata,
    }, sort_keys=True).encode("utf-8")
    body = MODEL_MAGIC + struct.pack("<I", len(header)) + header + b"".join(blobs)
    digest = hashlib.sha256(body).digest()
    path = Path(path)
    try:
        path.write_bytes(body + digest)
    except OSError as exc:
        raise OSError(f"cannot write model file {path}: {exc.strerror or exc}") from exc
    return digest.hex()


def load_prior(path, sched: DiffusionSchedule | None = None) -> LearnedDenoiser:
    """Read a GSCNET01 file, verifying checksum and (optionally) the schedule."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read model file {path}: {exc.strerror or exc}") from exc
    if len(raw) < len(MODEL_MAGIC) + 4 + 32 or raw[:8] != MODEL_MAGIC:
        raise ModelFormatError(f"{path}: not a GSCNET01 model file")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ModelFormatError(f"{path}: checksum mismatch (corrupt or truncated file)")
    (hlen,) = struct.unpack_from("<I", body, 8)
    try:
        header = json.loads(body[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"{path}: unreadable header") from exc
    offset = 12 + hlen
    state = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        if offset + 4 * count > len(body):
            raise ModelFormatError(f"{path}: parameter blob truncated")
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=offset).reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.astype(np.float32))
        offset += 4 * count
    if offset != len(body):
        raise ModelFormatError(f"{path}: trailing bytes after parameter blob")
    net = UNet(tuple(header["arch"]["channels"]), header["arch"]["time_dim"])
    net.load_state_dict(state)
    den = LearnedDenoiser(net, header["rows"], header["cols"], header["schedule_digest"],
                          header["T"], header.get("metadata"),
                          header.get("data_shift", 0.0), header.get("data_scale", 1.0))
    if sched is not None:
        den.check_schedule(sched)
    return den
