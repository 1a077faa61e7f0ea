"""The thirteen acceptance criteria, each at its stated tolerance.

Criteria 1-6 and 12 are exact oracle or property checks. Criteria 7-11 are
trend checks on the cached desk-scale prior from ``desk.py``; their measured
values, together with the prior's held-out loss, are appended to
``acceptance_log.txt`` in the repository root.
"""

import json
import subprocess
import sys
import time

import numpy as np
import pytest
from scipy import integrate, stats

from gscart.active import active_loop, kmeans_select
from gscart.eval import ExperimentGrid, run_experiment
from gscart.gsc import GscConfig, lmmse_update, mills_shift, quantized_update, reconstruct_batch
from gscart.observe import (Observation, ObservationMask, build_quantizer, observe_linear,
                            observe_quantized, random_mask)
from gscart.prior import AnalyticGaussianPrior
from gscart.schedule import build_schedule, default_schedule

import desk
from oracles import (dense_lmmse, gaussian_posterior_mean, quantized_posterior_mean,
                     truncated_normal_mean)
from test_active import check_plan

LOG = desk.ROOT / "acceptance_log.txt"
HELD_OUT = 20


def log_line(text):
    with LOG.open("a", encoding="utf-8") as fh:
        fh.write(text + "\n")


@pytest.fixture(scope="module")
def desk_run():
    LOG.write_text(f"# acceptance run {time.strftime('%Y-%m-%d %H:%M:%S')}\n", encoding="utf-8")
    train_maps, eval_maps, prior, sched = desk.desk_artifacts(log=log_line)
    meta = prior.metadata
    log_line(f"desk prior: {meta['train_count']} training maps, {meta['heldout_count']} held-out maps, "
             f"{prior.parameter_count} parameters, held-out loss {meta['heldout_loss']:.6f}, "
             f"training time {meta['train_seconds']:.0f} s")
    log_line(f"epoch losses: {', '.join(f'{v:.4f}' for v in meta['epoch_losses'])}")
    return eval_maps[:HELD_OUT], prior, sched


def experiment(desk_run, **grid_kw):
    maps, prior, sched = desk_run
    res = run_experiment(ExperimentGrid(map_count=HELD_OUT, **grid_kw), maps, prior=prior, sched=sched)
    assert not res.errors, res.errors[:1]
    return res


# -- oracle criteria ----------------------------------------------------------------

def test_criterion_01_truncated_gaussian(acceptance):
    t0 = time.perf_counter()
    worst = 0.0
    for a in np.linspace(-10, 10, 81):
        for w in (0.01, 0.1, 1.0, 10.0, np.inf):
            worst = max(worst, abs(mills_shift(a, a + w) - truncated_normal_mean(a, a + w)))
        # lower-tail one-sided interval (-inf, a)
        worst = max(worst, abs(mills_shift(-np.inf, a) - truncated_normal_mean(-np.inf, a)))
    secs = time.perf_counter() - t0
    ok = worst <= 1e-6 and secs <= 10
    acceptance(1, ok, f"max |error| {worst:.2e} (<= 1e-6), {secs:.1f} s (<= 10 s)")
    assert ok


def test_criterion_02_quantized_scalar(acceptance):
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        bits = int(rng.integers(1, 4))
        q = build_quantizer(bits)
        level = int(rng.integers(q.levels))
        mu, g, se = rng.uniform(-0.5, 1.5), rng.uniform(1e-4, 0.5), rng.uniform(0.0, 0.3)
        obs = Observation(ObservationMask(1, 1, np.array([0])), np.array([level]), se, q)
        lo, hi = q.interval(np.array([level]))
        got = quantized_update(np.array([[mu]]), obs, g)[0, 0]
        worst = max(worst, abs(got - quantized_posterior_mean(mu, g, se, lo[0], hi[0])))
    secs = time.perf_counter() - t0
    ok = worst <= 1e-6 and secs <= 30
    acceptance(2, ok, f"max |error| {worst:.2e} over 200 tuples (<= 1e-6), {secs:.1f} s (<= 30 s)")
    assert ok


def test_criterion_03_lmmse(acceptance):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(200):
        m = int(rng.integers(1, 17))
        idx = np.sort(rng.choice(16, m, replace=False))
        x = rng.normal(size=(4, 4))
        y = rng.normal(size=m)
        g, s2 = rng.uniform(1e-3, 2.0), rng.uniform(0.0, 1.0)
        obs = Observation(ObservationMask(4, 4, idx), y, np.sqrt(s2))
        H = np.eye(16)[idx]
        ref = dense_lmmse(x.ravel(), g, H, y, s2)
        worst = max(worst, np.abs(lmmse_update(x, obs, g).ravel() - ref).max())
    ok = worst <= 1e-10
    acceptance(3, ok, f"max |error| {worst:.2e} on 16-pixel systems (<= 1e-10)")
    assert ok


def conjugate_setup(seed):
    rng = np.random.default_rng(seed)
    tau_sq = 0.01
    sched = default_schedule(100, gamma_rule="gaussian", signal_var=tau_sq)
    m = rng.uniform(0.2, 0.8, (16, 16))
    truth = m + np.sqrt(tau_sq) * rng.standard_normal(m.shape)
    mask = random_mask(16, 16, 0.2, rng)
    return rng, tau_sq, sched, m, truth, mask


def test_criterion_04_conjugate_linear(acceptance):
    rng, tau_sq, sched, m, truth, mask = conjugate_setup(4)
    obs = observe_linear(truth, mask, 0.05, rng)
    t0 = time.perf_counter()
    chains = [np.random.default_rng(s) for s in np.random.SeedSequence(40).spawn(256)]
    out, _ = reconstruct_batch(obs, AnalyticGaussianPrior(m, tau_sq, sched), sched, GscConfig(), chains)
    secs = time.perf_counter() - t0
    exact = gaussian_posterior_mean(m, tau_sq, mask.observed, obs.values, 0.05 ** 2)
    err = np.abs(out.mean(axis=0) - exact).max()
    ok = err <= 0.02 and secs <= 300
    acceptance(4, ok, f"max |mean - posterior mean| {err:.4f} (<= 0.02), {secs:.1f} s (<= 300 s)")
    assert ok


def test_criterion_05_conjugate_quantized(acceptance):
    rng, tau_sq, sched, m, truth, mask = conjugate_setup(5)
    q = build_quantizer(2)
    obs = observe_quantized(truth, mask, 0.05, q, rng)
    t0 = time.perf_counter()
    chains = [np.random.default_rng(s) for s in np.random.SeedSequence(50).spawn(256)]
    out, _ = reconstruct_batch(obs, AnalyticGaussianPrior(m, tau_sq, sched), sched, GscConfig(), chains)
    secs = time.perf_counter() - t0
    exact = m.ravel().copy()
    lo, hi = q.interval(obs.levels())
    for k, i in enumerate(mask.observed):
        exact[i] = quantized_posterior_mean(m.ravel()[i], tau_sq, 0.05, lo[k], hi[k])
    err = np.abs(out.mean(axis=0).ravel() - exact).max()
    ok = err <= 0.03 and secs <= 600
    acceptance(5, ok, f"max |mean - posterior mean| {err:.4f} (<= 0.03), {secs:.1f} s (<= 600 s)")
    assert ok


def test_criterion_06_schedule_identities(acceptance):
    schedules = [default_schedule(T) for T in (1, 2, 10, 50, 100, 250, 1000)]
    schedules += [build_schedule(T, b0, b1) for T, b0, b1 in
                  [(1000, 1e-4, 0.02), (100, 1e-4, 0.02), (100, 1e-3, 0.2), (7, 0.05, 0.5)]]
    worst, sigma1 = 0.0, 0.0
    for s in schedules:
        gap = np.abs(s.coef_a + s.coef_b * np.sqrt(s.alpha_bar) - np.sqrt(s.alpha_bar_prev))
        worst = max(worst, gap.max())
        sigma1 = max(sigma1, abs(s.sigma_tilde[0]))
    ok = worst < 1e-12 and sigma1 == 0.0
    acceptance(6, ok, f"max identity gap {worst:.1e} (< 1e-12), sigma_tilde_1 = {sigma1}")
    assert ok


# -- trend criteria on the desk-scale prior -----------------------------------------

def test_desk_prior_heldout_loss(desk_run):
    _, prior, _ = desk_run
    assert prior.metadata["train_count"] >= 2000
    assert prior.metadata["heldout_loss"] < 0.5
    first = prior.metadata["epoch_losses"][:3]
    upticks = [b > a for a, b in zip(first, first[1:])]
    assert sum(upticks) <= 1
    assert all(b <= 1.05 * a for a, b in zip(first, first[1:]))


def test_criterion_07_ratio_trend(desk_run, acceptance):
    res = experiment(desk_run, ratios=[0.2, 0.15, 0.1, 0.05], methods=["gsc"])
    vals = [res.mean_psnr("gsc", r) for r in (0.2, 0.15, 0.1, 0.05)]
    ok = all(a >= b for a, b in zip(vals, vals[1:]))
    detail = "GSC PSNR at 20/15/10/5%: " + " / ".join(f"{v:.2f}" for v in vals) + " dB"
    log_line(f"criterion 7: {detail}")
    acceptance(7, ok, detail + " (nonincreasing)")
    assert ok


def test_criterion_08_gsc_beats_idw(desk_run, acceptance):
    res = experiment(desk_run, ratios=[0.1])
    gsc, idw = res.mean_psnr("gsc", 0.1), res.mean_psnr("idw", 0.1)
    ok = gsc >= idw + 5.0
    detail = f"at 10%: GSC {gsc:.2f} dB, IDW {idw:.2f} dB, gap {gsc - idw:+.2f} dB"
    log_line(f"criterion 8: {detail}")
    acceptance(8, ok, detail + " (>= +5)")
    assert ok


def test_criterion_09_bit_depth_trend(desk_run, acceptance):
    res = experiment(desk_run, ratios=[0.2], bits=[1, 2, 3], methods=["gsc"])
    vals = [res.mean_psnr("gsc", 0.2, bits=b) for b in (1, 2, 3)]
    ok = vals[0] < vals[1] < vals[2]
    detail = "GSC PSNR at 1/2/3 bits, 20%: " + " / ".join(f"{v:.2f}" for v in vals) + " dB"
    log_line(f"criterion 9: {detail}")
    acceptance(9, ok, detail + " (strictly increasing)")
    assert ok


def test_criterion_10_noise_trend(desk_run, acceptance):
    sigmas = [0.05, 0.1, 0.2, 0.5]
    res = experiment(desk_run, ratios=[0.15], sigmas=sigmas, methods=["gsc"])
    vals = [res.mean_psnr("gsc", 0.15, sigma=s) for s in sigmas]
    ok = all(a >= b for a, b in zip(vals, vals[1:]))
    detail = "GSC PSNR at sigma 0.05/0.1/0.2/0.5, 15%: " + " / ".join(f"{v:.2f}" for v in vals) + " dB"
    log_line(f"criterion 10: {detail}")
    acceptance(10, ok, detail + " (nonincreasing)")
    assert ok


def test_criterion_11_active_sampling(desk_run, acceptance):
    maps, prior, sched = desk_run
    seeds = range(10)
    curves = {"kmeans": [], "random": []}
    for seed in seeds:
        truth = maps[seed]
        rng = np.random.default_rng([seed, 0])
        obs = observe_linear(truth, random_mask(*truth.shape, 0.1, rng), 0.0, rng)
        for policy in curves:
            res = active_loop(truth, obs, [0.03, 0.02, 0.02], policy, prior, sched, N=16, seed=seed)
            curves[policy].append([r.psnr for r in res.rows])
    km, rd = np.mean(curves["kmeans"], axis=0), np.mean(curves["random"], axis=0)
    ok = bool(np.all(km[1:] >= rd[1:]) and km[-1] > rd[-1])
    detail = ("PSNR at +3/+5/+7%: kmeans " + " / ".join(f"{v:.2f}" for v in km[1:])
              + ", random " + " / ".join(f"{v:.2f}" for v in rd[1:]) + " dB")
    log_line(f"criterion 11: {detail}; round 0 {km[0]:.2f} / {rd[0]:.2f} dB")
    acceptance(11, ok, detail + " (kmeans >= random, strict at +7%)")
    assert ok


# -- property and reproducibility criteria ---------------------------------------------

def test_criterion_12_plan_validity(acceptance):
    rng = np.random.default_rng(12)
    violations = 0
    for _ in range(1000):
        rows, cols = int(rng.integers(4, 17)), int(rng.integers(4, 17))
        n = rows * cols
        mask = ObservationMask.from_indices(rows, cols, rng.choice(n, int(rng.integers(0, n // 2)),
                                                                   replace=False))
        Q = int(rng.integers(1, min(12, mask.unobserved.size) + 1))
        V = rng.uniform(size=(rows, cols))
        if rng.uniform() < 0.3:
            V = np.round(V * 3)  # many ties
        violations += bool(check_plan(kmeans_select(V, mask, Q, rng=rng), V, mask, Q))
    ok = violations == 0
    acceptance(12, ok, f"{violations} violations in 1000 randomized plans")
    assert ok


def test_criterion_13_bench_reproducible(tmp_path, acceptance):
    maps = np.random.default_rng(13).uniform(size=(3, 12, 12)).astype(np.float32)
    from gscart.mapgen import write_maps
    from gscart.prior import TrainConfig, save_prior, train_denoiser
    write_maps(tmp_path / "maps.bin", maps)
    cfg = {"schedule": {"T": 10}, "seed": 5}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    prior = train_denoiser(maps, default_schedule(10),
                           TrainConfig(epochs=1, channels=(4, 8), time_dim=8, holdout_fraction=0.34))
    save_prior(prior, tmp_path / "m.gscnet")
    (tmp_path / "grid.json").write_text(json.dumps({"map_count": 3, "ratios": [0.2, 0.1],
                                                     "bits": [None, 2], "sigmas": [0.0, 0.05]}))
    outs = []
    for run in ("a", "b"):
        (tmp_path / run).mkdir()
        cmd = [sys.executable, "-m", "gscart.cli", "--config", str(tmp_path / "cfg.json"), "bench",
               "--grid", str(tmp_path / "grid.json"), "--data", str(tmp_path / "maps.bin"),
               "--prior", str(tmp_path / "m.gscnet"), "--out", str(tmp_path / run)]
        subprocess.run(cmd, check=True, capture_output=True)
        outs.append((tmp_path / run / "records.csv").read_bytes())
    ok = outs[0] == outs[1] and outs[0].count(b"\n") == 1 + 3 * 2 * 2 * 3
    acceptance(13, ok, f"two bench runs {'byte-identical' if outs[0] == outs[1] else 'differ'} "
                       f"({len(outs[0])} bytes)")
    assert ok
