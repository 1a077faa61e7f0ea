"""Command-line entry point: ``gscart {gen-data,train,reconstruct,active,bench}``.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numerical
failure, 5 shape or schedule incompatibility.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import struct
import sys
import zlib
from pathlib import Path

import numpy as np

from .active import active_loop
from .baseline import IdwConfig, idw_reconstruct
from .errors import CompatibilityError, ConfigError, NumericalError
from .eval import ExperimentGrid, psnr, run_experiment
from .gsc import GscConfig, reconstruct
from .mapgen import MapConfig, generate_dataset, load_dataset, write_maps
from .observe import (Observation, build_quantizer, observe_linear, observe_quantized,
                      random_mask)
from .prior import TrainConfig, load_prior, save_prior, train_denoiser
from .schedule import build_schedule, default_schedule

log = logging.getLogger("gscart")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_COMPAT = 0, 2, 3, 4, 5

DEFAULTS = {
    "schedule": {"T": 100, "beta_start": None, "beta_end": None, "gamma_rule": "gaussian",
                 "gamma_scale": 1.0, "signal_var": 1.0},
    "map": {"rows": 32, "cols": 32, "extent": 32.0},
    "train": {},
    "observation": {"ratio": 0.1, "sigma": 0.0, "bits": None},
    "gsc": {"init_mode": "pure_noise", "fill_value": None, "steps_used": None,
            "stability_clip": 40.0, "x0_clip": None},
    "active": {"initial_ratio": 0.1, "increments": [0.03, 0.02, 0.02], "ensemble_size": 16,
               "weights": [1.0, 1.0]},
    "experiment": {},
    "seed": 0,
}


def _merge_section(name, base, override, allowed):
    if not isinstance(override, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    unknown = set(override) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in section {name!r}: {sorted(unknown)}")
    out = dict(base)
    out.update(override)
    return out


def _allowed_keys(section):
    if section == "map":
        return set(MapConfig.__dataclass_fields__)
    if section == "train":
        return set(TrainConfig.__dataclass_fields__)
    if section == "experiment":
        return set(ExperimentGrid.__dataclass_fields__)
    return set(DEFAULTS[section])


def load_config(path=None) -> dict:
    """Defaults overlaid with a JSON document; unknown keys raise :class:`ConfigError`."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is None:
        return cfg
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    unknown = set(doc) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
    for key, value in doc.items():
        if key == "seed":
            if not isinstance(value, int):
                raise ConfigError("seed must be an integer")
            cfg["seed"] = value
        else:
            cfg[key] = _merge_section(key, cfg[key], value, _allowed_keys(key))
    return cfg


def _build(cls, section, kw):
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section} config: {exc}") from exc


def schedule_from(cfg):
    s = dict(cfg["schedule"])
    gamma = {"gamma_rule": s["gamma_rule"], "gamma_scale": s["gamma_scale"],
             "signal_var": s["signal_var"]}
    try:
        if s["beta_start"] is None and s["beta_end"] is None:
            return default_schedule(int(s["T"]), **gamma)
        return build_schedule(int(s["T"]), s["beta_start"] or 1e-4, s["beta_end"] or 0.02, **gamma)
    except ValueError as exc:
        raise ConfigError(f"invalid schedule config: {exc}") from exc


def gsc_config_from(cfg):
    kw = dict(cfg["gsc"])
    if kw.get("x0_clip") is not None:
        kw["x0_clip"] = tuple(kw["x0_clip"])
    return _build(GscConfig, "gsc", kw)


def _out_dir(path) -> Path:
    out = Path(path)
    if not out.is_dir():
        raise FileNotFoundError(f"output directory does not exist: {out}")
    return out


def _echo_config(out: Path, cfg: dict, args) -> None:
    resolved = {"config": cfg, "command": args.command,
                "flags": {k: v for k, v in sorted(vars(args).items())
                          if k not in ("func", "command") and not callable(v)}}
    (out / "config.resolved.json").write_text(
        json.dumps(resolved, indent=2, sort_keys=True, default=str), encoding="utf-8")


# -- heatmaps -------------------------------------------------------------------

def to_gray(x) -> np.ndarray:
    return np.round(np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0) * 255).astype(np.uint8)


def write_pgm(path, x) -> None:
    img = to_gray(x)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + img.tobytes())


def write_png(path, x) -> None:
    img = to_gray(x)
    raw = b"".join(b"\x00" + row.tobytes() for row in img)

    def chunk(tag, data):
        body = tag + data
        return struct.pack(">I", len(data)) + body + struct.pack(">I", zlib.crc32(body) & 0xFFFFFFFF)

    ihdr = struct.pack(">IIBBBBB", img.shape[1], img.shape[0], 8, 0, 0, 0, 0)
    Path(path).write_bytes(b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", ihdr)
                           + chunk(b"IDAT", zlib.compress(raw, 9)) + chunk(b"IEND", b""))


def save_heatmap(out: Path, stem: str, x, png: bool, scale: float | None = None) -> None:
    x = np.asarray(x, dtype=np.float64)
    if scale is not None:
        x = x / scale if scale > 0 else np.zeros_like(x)
    write_pgm(out / f"{stem}.pgm", x)
    if png:
        write_png(out / f"{stem}.png", x)


# -- commands -------------------------------------------------------------------

def cmd_gen_data(args, cfg) -> int:
    out = _out_dir(args.out)
    map_cfg = _build(MapConfig, "map", cfg["map"])
    seed = cfg["seed"] if args.seed is None else args.seed
    summary = generate_dataset(map_cfg, args.count, out / args.name, seed=seed, peak=args.peak)
    _echo_config(out, cfg, args)
    print(f"count={summary.count} peak={summary.peak:.6g} checksum={summary.checksum} path={summary.path}")
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    out = _out_dir(args.out)
    sched = schedule_from(cfg)
    train_kw = dict(cfg["train"])
    if args.epochs is not None:
        train_kw["epochs"] = args.epochs
    if args.seed is not None:
        train_kw["seed"] = args.seed
    tcfg = _build(TrainConfig, "train", train_kw)
    den = train_denoiser(args.data, sched, tcfg,
                         progress=lambda e, loss: print(f"epoch {e} loss {loss:.6f}", flush=True))
    checksum = save_prior(den, out / "model.gscnet")
    lines = ["epoch,loss"] + [f"{i + 1},{v:.8f}" for i, v in enumerate(den.metadata["epoch_losses"])]
    (out / "train_log.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _echo_config(out, cfg, args)
    print(f"model={out / 'model.gscnet'} checksum={checksum} heldout_loss={den.metadata['heldout_loss']}")
    return EXIT_OK


def _observation_from(args, cfg, truth, rng):
    o = cfg["observation"]
    ratio = o["ratio"] if args.ratio is None else args.ratio
    sigma = o["sigma"] if args.sigma is None else args.sigma
    bits = o["bits"] if args.bits is None else args.bits
    try:
        mask = random_mask(truth.shape[0], truth.shape[1], ratio, rng)
        if bits:
            return observe_quantized(truth, mask, sigma, build_quantizer(bits), rng)
        return observe_linear(truth, mask, sigma, rng)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _load_truth(args):
    maps, _ = load_dataset(args.data)
    if not 0 <= args.index < maps.shape[0]:
        raise ConfigError(f"--index {args.index} outside dataset of {maps.shape[0]} maps")
    return maps[args.index].astype(np.float64)


def cmd_reconstruct(args, cfg) -> int:
    out = _out_dir(args.out)
    seed = cfg["seed"] if args.seed is None else args.seed
    rng = np.random.default_rng(seed)
    truth = None
    if args.obs is not None:
        obs = Observation.load(args.obs)
    else:
        if args.data is None:
            raise ConfigError("--simulate needs --data")
        truth = _load_truth(args)
        obs = _observation_from(args, cfg, truth, rng)
    report = {"method": args.method, "branch": "quantized" if obs.is_quantized else "linear",
              "observed_ratio": obs.mask.ratio, "seed": seed}
    if args.method == "idw":
        est = idw_reconstruct(obs, IdwConfig())
    else:
        if args.prior is None:
            raise ConfigError("--method gsc needs --prior")
        sched = schedule_from(cfg)
        prior = load_prior(args.prior, sched)
        est, diag = reconstruct(obs, prior, sched, gsc_config_from(cfg), rng)
        report["diagnostics"] = diag.to_dict()
    if truth is not None:
        report["psnr_db"] = psnr(truth, est)
        save_heatmap(out, "truth", truth, args.png)
    write_maps(out / "map.bin", est[None])
    save_heatmap(out, "map", est, args.png)
    obs.save(out / "observation.json")
    (out / "report.json").write_text(json.dumps(report, indent=2), encoding="utf-8")
    _echo_config(out, cfg, args)
    msg = f"{args.method} reconstruction ({report['branch']} observations) written to {out}"
    if "psnr_db" in report:
        msg += f"; psnr={report['psnr_db']:.3f} dB"
    print(msg)
    return EXIT_OK


def cmd_active(args, cfg) -> int:
    out = _out_dir(args.out)
    a = cfg["active"]
    seed = cfg["seed"] if args.seed is None else args.seed
    incs = list(a["increments"])
    if args.rounds is not None:
        if args.rounds < 0:
            raise ConfigError("--rounds must be nonnegative")
        if args.rounds > 0 and not incs:
            raise ConfigError("no increments configured")
        # extra rounds repeat the last configured increment
        incs = (incs + incs[-1:] * args.rounds)[:args.rounds]
    truth = _load_truth(args)
    sched = schedule_from(cfg)
    prior = load_prior(args.prior, sched)
    o = cfg["observation"]
    rng = np.random.default_rng([seed, 0])
    mask = random_mask(truth.shape[0], truth.shape[1], a["initial_ratio"], rng)
    if o["bits"]:
        obs = observe_quantized(truth, mask, o["sigma"], build_quantizer(o["bits"]), rng)
    else:
        obs = observe_linear(truth, mask, o["sigma"], rng)
    res = active_loop(truth, obs, incs, args.policy, prior, sched, gsc_config_from(cfg),
                      N=int(a["ensemble_size"]), seed=seed, weights=tuple(a["weights"]))
    (out / "trajectory.csv").write_text(res.to_csv(), encoding="utf-8")
    for r, V in enumerate(res.uncertainty):
        save_heatmap(out, f"uncertainty_round{r}", V, args.png, scale=float(V.max()))
    for r, plan in enumerate(res.plans):
        (out / f"plan_round{r}.json").write_text(json.dumps(plan.to_dict()), encoding="utf-8")
    _echo_config(out, cfg, args)
    for row in res.rows:
        print(f"round {row.round} ratio {row.observed_ratio:.4f} psnr {row.psnr:.3f}")
    return EXIT_OK


def cmd_bench(args, cfg) -> int:
    out = _out_dir(args.out)
    grid_kw = dict(cfg["experiment"])
    if args.grid is not None:
        try:
            doc = json.loads(Path(args.grid).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"grid {args.grid} is not valid JSON: {exc}") from exc
        grid_kw = _merge_section("grid", grid_kw, doc, _allowed_keys("experiment"))
    grid = _build(ExperimentGrid, "experiment", grid_kw)
    maps, _ = load_dataset(args.data)
    maps = maps[args.offset:]
    sched = prior = None
    if "gsc" in grid.methods:
        if args.prior is None:
            raise ConfigError("GSC cells need --prior")
        sched = schedule_from(cfg)
        prior = load_prior(args.prior, sched)
    result = run_experiment(grid, maps, out, prior, sched, gsc_config_from(cfg))
    _echo_config(out, cfg, args)
    print(result.render_summary(), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gscart", description="Generative spectrum cartography toolkit.")
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="simulate a map dataset")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True, help="existing output directory")
    g.add_argument("--name", default="maps.bin")
    g.add_argument("--peak", type=float, help="normalisation peak (default: from this set)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train the learned prior")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("reconstruct", help="reconstruct one map")
    src = r.add_mutually_exclusive_group(required=True)
    src.add_argument("--obs", help="observation JSON file")
    src.add_argument("--simulate", action="store_true", help="observe a dataset map")
    r.add_argument("--data")
    r.add_argument("--index", type=int, default=0)
    r.add_argument("--ratio", type=float)
    r.add_argument("--sigma", type=float)
    r.add_argument("--bits", type=int)
    r.add_argument("--prior")
    r.add_argument("--method", choices=("gsc", "idw"), default="gsc")
    r.add_argument("--seed", type=int)
    r.add_argument("--png", action="store_true")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_reconstruct)

    a = sub.add_parser("active", help="closed-loop active sampling")
    a.add_argument("--data", required=True)
    a.add_argument("--index", type=int, default=0)
    a.add_argument("--prior", required=True)
    a.add_argument("--policy", choices=("kmeans", "random"), default="kmeans")
    a.add_argument("--rounds", type=int)
    a.add_argument("--seed", type=int)
    a.add_argument("--png", action="store_true")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_active)

    b = sub.add_parser("bench", help="run an experiment grid")
    b.add_argument("--grid", help="JSON grid overriding the experiment section")
    b.add_argument("--data", required=True)
    b.add_argument("--offset", type=int, default=0, help="index of the first evaluation map")
    b.add_argument("--prior")
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except CompatibilityError as exc:
        print(f"error: incompatible artifacts: {exc}", file=sys.stderr)
        return EXIT_COMPAT
    except NumericalError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
