"""Ensemble uncertainty and uncertainty-guided selection of new measurement sites."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .gsc import GscConfig, reconstruct_batch
from .observe import Observation, measure
from .schedule import DiffusionSchedule

POLICIES = ("kmeans", "random")
TRAJECTORY_COLUMNS = ("round", "observed_ratio", "policy", "seed", "psnr")


class SelectionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PosteriorEnsemble:
    samples: np.ndarray
    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        if self.samples.ndim != 3 or self.samples.shape[0] < 2:
            raise ValueError("an ensemble needs at least two 2-D samples")

    @classmethod
    def from_samples(cls, samples) -> "PosteriorEnsemble":
        s = np.array(samples, dtype=np.float64)
        mean = s.mean(axis=0)
        var = ((s - mean) ** 2).mean(axis=0)
        return cls(s, mean, var)

    @property
    def size(self) -> int:
        return self.samples.shape[0]


def posterior_ensemble(obs: Observation, prior, sched: DiffusionSchedule, cfg: GscConfig,
                       N: int, rng: np.random.Generator) -> PosteriorEnsemble:
    """``N`` reconstructions from independent child generators of ``rng``."""
    if N < 2:
        raise ValueError("ensemble size N must be at least 2")
    samples, _ = reconstruct_batch(obs, prior, sched, cfg, rng.spawn(N))
    return PosteriorEnsemble.from_samples(samples)


def uncertainty_map(ens: PosteriorEnsemble) -> np.ndarray:
    return ens.variance


@dataclass(frozen=True, eq=False)
class SamplingPlan:
    """Selected pixel indices; ``labels`` maps each candidate to its cluster."""

    points: np.ndarray
    policy: str
    candidates: np.ndarray | None = None
    labels: np.ndarray | None = None

    @property
    def size(self) -> int:
        return int(self.points.size)

    def to_dict(self) -> dict:
        return {"policy": self.policy, "points": self.points.tolist()}


def _candidates(mask, Q):
    if int(Q) != Q or Q < 1:
        raise SelectionError(f"Q must be a positive integer, got {Q}")
    cand = mask.unobserved
    if cand.size < Q:
        raise SelectionError(f"only {cand.size} unobserved pixels, cannot select {Q}")
    return cand


def kmeans_pp_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total > 0:
            pick = rng.choice(n, p=d2 / total)
        else:
            pick = rng.integers(n)
        centers[j] = X[pick]
        d2 = np.minimum(d2, ((X - centers[j]) ** 2).sum(axis=1))
    return centers


def kmeans(X: np.ndarray, k: int, rng: np.random.Generator, max_iter: int = 100):
    """Lloyd iterations from a k-means++ start; returns ``(labels, centers)``.

    Empty clusters are moved to the point farthest from its centre.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    centers = kmeans_pp_init(X, k, rng)
    labels = None
    for _ in range(max_iter):
        new, d2 = kernels.kmeans_assign(X, centers)
        counts = np.bincount(new, minlength=k)
        for j in np.flatnonzero(counts == 0):
            far = int(np.argmax(d2))
            new[far] = j
            d2[far] = 0.0
            counts = np.bincount(new, minlength=k)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(k):
            centers[j] = X[labels == j].mean(axis=0)
    return labels, centers


def kmeans_select(V, mask, Q: int, weights=(1.0, 1.0), rng: np.random.Generator | None = None,
                  max_iter: int = 100) -> SamplingPlan:
    """Cluster unobserved pixels on (row, col, normalised V) and keep each cluster's V-argmax."""
    V = np.asarray(V, dtype=np.float64)
    if V.shape != (mask.rows, mask.cols):
        raise SelectionError(f"uncertainty map shape {V.shape} does not match mask")
    cand = _candidates(mask, Q)
    rng = np.random.default_rng(0) if rng is None else rng
    w_xy, w_v = weights
    vmax = V.max()
    v = V.ravel()[cand]
    i, j = np.divmod(cand, mask.cols)
    X = np.column_stack([w_xy * i / mask.rows, w_xy * j / mask.cols,
                         w_v * (v / vmax if vmax > 0 else np.zeros_like(v))])
    labels, _ = kmeans(X, int(Q), rng, max_iter)
    points = np.empty(int(Q), dtype=np.int64)
    for c in range(int(Q)):
        members = np.flatnonzero(labels == c)
        # candidates are sorted, so argmax's first hit is the smallest index
        points[c] = cand[members[np.argmax(v[members])]]
    return SamplingPlan(np.sort(points), "kmeans", cand, labels)


def random_select(mask, Q: int, rng: np.random.Generator) -> SamplingPlan:
    cand = _candidates(mask, Q)
    return SamplingPlan(np.sort(rng.choice(cand, size=int(Q), replace=False)), "random")


@dataclass
class TrajectoryRow:
    round: int
    observed_ratio: float
    policy: str
    seed: int
    psnr: float


@dataclass
class ActiveResult:
    rows: list = field(default_factory=list)
    plans: list = field(default_factory=list)
    uncertainty: list = field(default_factory=list)
    observation: Observation | None = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRAJECTORY_COLUMNS)
        for r in self.rows:
            w.writerow([r.round, f"{r.observed_ratio:.6f}", r.policy, r.seed, f"{r.psnr:.6f}"])
        return buf.getvalue()


def _psnr(x, x_hat):
    mse = float(np.mean((np.asarray(x) - np.asarray(x_hat)) ** 2))
    return 99.0 if mse == 0 else min(99.0, 10.0 * np.log10(1.0 / mse))


def active_loop(truth, initial_obs: Observation, increments, policy: str, prior,
                sched: DiffusionSchedule, cfg: GscConfig = GscConfig(), N: int = 16,
                seed: int = 0, weights=(1.0, 1.0)) -> ActiveResult:
    """Closed loop: ensemble, select, measure, augment, repeated per increment.

    ``increments`` are fractions of the grid added per round. The round-0
    ensemble depends only on ``seed``, so both policies start identically.
    """
    if policy not in POLICIES:
        raise ValueError(f"policy must be one of {POLICIES}")
    increments = [float(f) for f in increments]
    if any(f <= 0 for f in increments):
        raise ValueError("increments must be positive")
    truth = np.asarray(truth, dtype=np.float64)
    n_pix = truth.size
    if initial_obs.mask.ratio + sum(increments) > 1.0 + 1e-12:
        raise ValueError("increments exceed the unobserved budget")
    root = np.random.SeedSequence(seed)
    ens_seeds = root.spawn(len(increments) + 1)
    sel_seeds = np.random.SeedSequence([seed, 1 + POLICIES.index(policy)]).spawn(len(increments))
    obs = initial_obs
    result = ActiveResult()
    for r in range(len(increments) + 1):
        ens = posterior_ensemble(obs, prior, sched, cfg, N, np.random.default_rng(ens_seeds[r]))
        result.rows.append(TrajectoryRow(r, obs.mask.ratio, policy, seed, _psnr(truth, ens.mean)))
        result.uncertainty.append(ens.variance)
        if r == len(increments):
            break
        Q = int(np.floor(increments[r] * n_pix + 0.5))
        rng = np.random.default_rng(sel_seeds[r])
        if policy == "kmeans":
            plan = kmeans_select(ens.variance, obs.mask, Q, weights, rng)
        else:
            plan = random_select(obs.mask, Q, rng)
        result.plans.append(plan)
        obs = obs.augment(plan.points, measure(truth, plan.points, obs, rng))
    result.observation = obs
    return result
