"""Command-line entry point: train, sample, superres, fuse, diag.

Every command reads a JSON config, applies ``SCOREFUSE_SEED`` /
``SCOREFUSE_OUT`` and then command-line overrides, and writes
``manifest.json`` next to its outputs. The manifest is itself a valid config,
so ``scorefuse <cmd> --config <out>/manifest.json --out <new>`` repeats a run.

Exit codes: 0 success, 1 numerical failure, 2 configuration or file error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .assimilate import FusionConfig, FusionSchedule, rmse_records, write_rmse_manifest
from .diagnostics import (
    angle_averaged_spectrum,
    extract_scatter,
    line_trace,
    mean_spectrum,
    points_mask,
    rmse,
    write_scatter_csv,
    write_spectrum_csv,
    write_trace_csv,
)
from .experiments import AdvectionScenario, fusion_setup, run_fusion
from .fields import StateTensor, load_field, save_field
from .guidance import COARSE_GAMMA_HAT, COARSE_SIGMA_Y, POINT_GAMMA_HAT, GuidanceConfig, GuidanceTerm
from .measure import CoarsenOp, read_point_obs, upsample
from .prior import (
    GaussianMixturePrior,
    StationaryGaussianPrior,
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    train_denoiser,
)
from .sampler import SamplerConfig, build_time_grid, config_hash, generate_ensemble

log = logging.getLogger("scorefuse")

FUSE_METHODS = ("sparse", "emulator", "combined", "reinit")


class ConfigError(Exception):
    """Bad or inconsistent configuration; maps to exit code 2."""


# ---------------------------------------------------------------- config

def load_config(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{p}: top level must be an object")
    cfg.pop("run", None)
    return _absolutize(cfg, p.parent.resolve())


def _absolutize(cfg: dict, base: Path) -> dict:
    """Resolve every ``*path`` / ``*_dir`` string relative to the config file."""
    out = {}
    for key, val in cfg.items():
        if isinstance(val, dict):
            out[key] = _absolutize(val, base)
        elif isinstance(val, str) and (key.endswith("path") or key.endswith("_dir")) and val:
            out[key] = str((base / val).resolve())
        else:
            out[key] = val
    return out


def resolve(cfg: dict, args, env=os.environ) -> dict:
    """Precedence: command line > SCOREFUSE_* environment > config file."""
    cfg = copy.deepcopy(cfg)
    if "SCOREFUSE_SEED" in env:
        cfg["seed"] = _as_int(env["SCOREFUSE_SEED"], "SCOREFUSE_SEED")
    if "SCOREFUSE_OUT" in env:
        cfg["out"] = env["SCOREFUSE_OUT"]
    for flag, key in (("seed", "seed"), ("out", "out"), ("members", "members"), ("threads", "threads")):
        val = getattr(args, flag, None)
        if val is not None:
            cfg[key] = val
    if getattr(args, "steps", None) is not None:
        cfg.setdefault("sampler", {})["steps"] = args.steps
    if getattr(args, "method", None) is not None:
        cfg.setdefault("fuse", {})["method"] = args.method
    cfg.setdefault("seed", 0)
    cfg.setdefault("members", 8)
    cfg.setdefault("threads", 1)
    if "out" not in cfg:
        raise ConfigError("no output directory: pass --out, set SCOREFUSE_OUT or add \"out\" to the config")
    cfg["out"] = str(Path(cfg["out"]).resolve())
    for key in ("seed", "members", "threads"):
        cfg[key] = _as_int(cfg[key], key)
    if cfg["seed"] < 0 or cfg["members"] < 1 or cfg["threads"] < 1:
        raise ConfigError("need seed >= 0, members >= 1 and threads >= 1")
    return cfg


def _as_int(val, name) -> int:
    try:
        return int(val)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name} must be an integer, got {val!r}") from exc


def _require_file(path, what: str) -> Path:
    if not path:
        raise ConfigError(f"missing {what} path")
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} not found: {p}")
    return p


def sampler_from(cfg: dict) -> SamplerConfig:
    s = cfg.get("sampler", {})
    grid = build_time_grid(int(s.get("steps", 40)), float(s.get("sigma_min", 0.002)),
                           float(s.get("sigma_max", 80.0)), float(s.get("rho", 7.0)))
    s_tmax = s.get("s_tmax", 50.0)
    return SamplerConfig(
        grid=grid,
        s_churn=float(s.get("s_churn", 2.0)),
        s_tmin=float(s.get("s_tmin", 0.05)),
        s_tmax=float("inf") if s_tmax is None else float(s_tmax),
        seed=int(cfg["seed"]),
        reevaluate_correction=bool(s.get("reevaluate_correction", True)),
    )


def prior_from(cfg: dict):
    """Build the denoiser named by ``cfg["prior"]``."""
    spec = cfg.get("prior")
    if not spec:
        raise ConfigError("config has no \"prior\" section")
    kind = spec.get("kind")
    if kind == "checkpoint":
        return load_checkpoint(_require_file(spec.get("path"), "checkpoint"))
    if kind == "gmm":
        with np.load(_require_file(spec.get("path"), "mixture file")) as f:
            return GaussianMixturePrior(f["weights"], f["means"], f["variances"])
    if kind == "stationary":
        with np.load(_require_file(spec.get("path"), "spectrum file")) as f:
            return StationaryGaussianPrior(f["mean"], f["spectrum"])
    if kind == "power_law":
        return StationaryGaussianPrior.power_law(tuple(spec["shape"]), slope=float(spec.get("slope", 3.0)))
    if kind == "multiscale":
        from .experiments import multiscale_prior

        return multiscale_prior(tuple(spec["shape"]), slope=float(spec.get("slope", 3.0)),
                                detail_std=float(spec.get("detail_std", 0.5)),
                                seed=int(spec.get("pattern_seed", 0)))
    if kind == "scenario":
        return scenario_from(cfg).fitted_prior(int(spec.get("fit_seed", 10_000)), int(spec.get("fit_count", 400)))
    raise ConfigError(f"unknown prior kind {kind!r}")


def scenario_from(cfg: dict) -> AdvectionScenario:
    kw = dict(cfg.get("fuse", {}).get("scenario", {}))
    for key in ("shape", "factor", "velocity", "channels"):
        if key in kw:
            kw[key] = tuple(kw[key])
    try:
        return AdvectionScenario(**kw)
    except TypeError as exc:
        raise ConfigError(f"bad scenario settings: {exc}") from exc


def _channels(cfg, n: int) -> tuple[str, ...]:
    names = cfg.get("channels")
    if names is None:
        return tuple(f"c{i}" for i in range(n))
    if len(names) != n:
        raise ConfigError(f"config lists {len(names)} channels but the state has {n}")
    return tuple(names)


def write_manifest(out: Path, command: str, cfg: dict, extra: dict | None = None) -> None:
    body = copy.deepcopy(cfg)
    body["command"] = command
    body["run"] = {"version": __version__, "config_hash": _run_hash(body)}
    body["run"].update(extra or {})
    (out / "manifest.json").write_text(json.dumps(body, indent=2, sort_keys=True, default=str))


def _run_hash(cfg: dict) -> str:
    # the output location does not affect results, so it stays out of the hash
    return config_hash({k: v for k, v in cfg.items() if k != "out"})


def _outdir(cfg) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------- commands

def cmd_train(cfg: dict) -> Path:
    tr = cfg.get("train", {})
    data_dir = _require_file(tr.get("dataset_dir"), "dataset directory")
    files = sorted(Path(data_dir).glob("*.fld"))
    if not files:
        raise ConfigError(f"dataset directory {data_dir} contains no .fld files")
    states = [load_field(f) for f in files]
    data = np.stack([s.data for s in states])
    heldout = max(1, int(round(len(data) * float(tr.get("heldout_fraction", 0.1))))) if len(data) > 1 else 0
    train_set = data[: len(data) - heldout] if heldout else data
    tc = TrainConfig(
        hidden=int(tr.get("hidden", 128)), steps=int(tr.get("steps", 20000)),
        batch_size=int(tr.get("batch_size", 128)), learning_rate=float(tr.get("learning_rate", 1e-2)),
        grad_clip=float(tr.get("grad_clip", 10.0)), seed=int(cfg["seed"]), log_every=int(tr.get("log_every", 500)),
    )
    den, trace = train_denoiser(tc, train_set)
    out = _outdir(cfg)
    save_checkpoint(den, out / "checkpoint.npz")
    with open(out / "trace.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        w.writerows((i, repr(float(v))) for i, v in enumerate(trace))
    extra = {"dataset_files": [f.name for f in files], "heldout": heldout}
    if heldout:
        from .prior import edm_loss
        from .rng import stream

        held = data[len(data) - heldout:]
        extra["heldout_loss"] = edm_loss(den, held, stream(cfg["seed"] + 1))
    write_manifest(out, "train", cfg, extra)
    return out


def cmd_sample(cfg: dict) -> Path:
    den = prior_from(cfg)
    sampler = sampler_from(cfg)
    ens = generate_ensemble(den, sampler, None, cfg["members"], cfg["seed"], threads=cfg["threads"])
    out = _outdir(cfg)
    channels = _channels(cfg, ens.members.shape[1])
    ens.save(out / "ensemble", channels, {"config_hash": _run_hash(cfg)})
    write_manifest(out, "sample", cfg, {"seeds": ens.seeds})
    return out


def _guidance_opts(cfg):
    g = cfg.get("guidance", {})
    clip = g.get("clip_norm")
    return (None if clip is None else float(clip)), float(g.get("guidance_scale", 1.0))


def cmd_superres(cfg: dict) -> Path:
    sr = cfg.get("superres", {})
    den = prior_from(cfg)
    shape = tuple(den.shape)
    factor = tuple(int(f) for f in sr.get("factor", (4, 4)))
    truth = None
    if sr.get("truth_path"):
        truth = load_field(_require_file(sr["truth_path"], "truth field"))
        if truth.shape != shape:
            raise ConfigError(f"truth grid {truth.shape} does not match prior grid {shape}")
    try:
        op = CoarsenOp(shape, *factor)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if sr.get("coarse_path"):
        coarse_state = load_field(_require_file(sr["coarse_path"], "coarse field"))
        if coarse_state.shape != op.coarse_shape:
            raise ConfigError(f"coarse grid {coarse_state.shape} incompatible with {shape} / {factor}")
        coarse = coarse_state.data
    elif truth is not None:
        coarse = op.apply_grid(truth.data)
    else:
        raise ConfigError("superres needs truth_path or coarse_path")
    channels = truth.channels if truth is not None else _channels(cfg, shape[0])
    clip, scale = _guidance_opts(cfg)
    term = GuidanceTerm(op, coarse.ravel(), float(sr.get("sigma_y", COARSE_SIGMA_Y)),
                        float(sr.get("gamma_hat", COARSE_GAMMA_HAT)))
    guidance = GuidanceConfig([term], clip_norm=clip, guidance_scale=scale)
    ens = generate_ensemble(den, sampler_from(cfg), guidance, cfg["members"], cfg["seed"], threads=cfg["threads"])
    bicubic = upsample(coarse, shape)
    out = _outdir(cfg)
    ens.save(out / "ensemble", channels, {"config_hash": _run_hash(cfg)})
    save_field(StateTensor.from_array(bicubic, channels), out / "bicubic.fld")
    write_spectrum_csv(out / "spectrum_guided.csv", mean_spectrum(ens.members), channels)
    write_spectrum_csv(out / "spectrum_bicubic.csv", angle_averaged_spectrum(bicubic), channels)
    row = int(sr.get("trace_row", shape[1] // 2))
    traces = {"mean": line_trace(ens.mean, row), "bicubic": line_trace(bicubic, row)}
    if truth is not None:
        write_spectrum_csv(out / "spectrum_truth.csv", angle_averaged_spectrum(truth.data), channels)
        traces["truth"] = line_trace(truth.data, row)
        with open(out / "rmse.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "channel", "rmse"])
            for ci, name in enumerate(channels):
                w.writerow(["guided", name, repr(rmse(ens.mean, truth.data, ci))])
                w.writerow(["bicubic", name, repr(rmse(bicubic, truth.data, ci))])
    write_trace_csv(out / "traces.csv", traces, channels, row)
    write_manifest(out, "superres", cfg, {"seeds": ens.seeds})
    return out


def cmd_fuse(cfg: dict) -> Path:
    fu = cfg.get("fuse", {})
    method = fu.get("method", "combined")
    if method not in FUSE_METHODS:
        raise ConfigError(f"unknown fusion method {method!r}; choose from {', '.join(FUSE_METHODS)}")
    use_emulator = bool(fu.get("emulator", True))
    points = fu.get("points", "synthetic")
    needs = {"sparse": (False, True), "emulator": (True, False), "combined": (True, True), "reinit": (True, True)}
    want_em, want_pts = needs[method]
    have_pts = points is not None
    if (want_em and not use_emulator) or (want_pts and not have_pts) or not (use_emulator or have_pts):
        raise ConfigError(f"no guidance term configured for method {method!r}; "
                          "use unconditional sampling explicitly (scorefuse sample)")
    scenario = scenario_from(cfg)
    sched = fu.get("schedule", {})
    schedule = FusionSchedule(int(sched.get("interval", 2)), int(sched.get("n_cycles", 14)))
    setup = fusion_setup(scenario, int(fu.get("truth_seed", cfg["seed"])), schedule,
                         obs_noise=float(fu.get("obs_noise", 0.1)))
    if have_pts and points != "synthetic":
        table = read_point_obs(_require_file(points, "point observation file"))
        missing = [lead for lead in schedule.leads() if lead not in table]
        if missing:
            raise ConfigError(f"point observations missing for lead(s) {missing}")
        setup.obs = [table[lead] for lead in schedule.leads()]
    den = prior_from(cfg) if "prior" in cfg else scenario.fitted_prior()
    if tuple(den.shape) != scenario.shape:
        raise ConfigError(f"prior grid {den.shape} does not match scenario grid {scenario.shape}")
    clip, scale = _guidance_opts(cfg)
    psy = fu.get("point_sigma_y")
    base = FusionConfig(
        sampler=sampler_from(cfg), members=cfg["members"], base_seed=cfg["seed"], threads=cfg["threads"],
        emulator_sigma_y=float(fu.get("emulator_sigma_y", COARSE_SIGMA_Y)),
        emulator_gamma_hat=float(fu.get("emulator_gamma_hat", COARSE_GAMMA_HAT)),
        point_sigma_y=None if psy is None else float(psy),
        point_gamma_hat=float(fu.get("point_gamma_hat", POINT_GAMMA_HAT)),
        clip_norm=clip, guidance_scale=scale,
    )
    lambdas = fu.get("lambda", 1.0)
    sweep = isinstance(lambdas, list)
    out = _outdir(cfg)
    records = []
    for lam in (lambdas if sweep else [lambdas]):
        label = f"{method}[lambda={lam:g}]" if sweep else method
        results = run_fusion(setup, den, base.with_(point_weight=float(lam)), method)
        records += rmse_records(results, setup.truths, schedule.leads(), label, scenario.channels)
        if not sweep:
            for lead, ens in zip(schedule.leads(), results):
                ens.save(out / f"lead_{lead:03d}", scenario.channels, {"config_hash": _run_hash(cfg)})
    write_rmse_manifest(out / "rmse.csv", records)
    write_manifest(out, "fuse", cfg)
    return out


def _load_ensemble(directory: Path) -> tuple[np.ndarray, tuple[str, ...]]:
    files = sorted(directory.glob("member_*.fld"), key=lambda p: int(p.stem.split("_")[1]))
    if not files:
        raise ConfigError(f"no member_<k>.fld files in {directory}")
    states = [load_field(f) for f in files]
    return np.stack([s.data for s in states]), states[0].channels


def cmd_diag(cfg: dict) -> Path:
    dg = cfg.get("diag", {})
    ens_dir = _require_file(dg.get("ensemble_dir"), "ensemble directory")
    members, channels = _load_ensemble(ens_dir)
    mean = members.mean(axis=0)
    truth = load_field(_require_file(dg["truth_path"], "truth field")) if dg.get("truth_path") else None
    out = _outdir(cfg)
    write_spectrum_csv(out / "spectrum_members.csv", mean_spectrum(members), channels)
    row = int(dg.get("trace_row", mean.shape[1] // 2))
    traces = {"mean": line_trace(mean, row)}
    if truth is not None:
        if truth.shape != mean.shape:
            raise ConfigError(f"truth grid {truth.shape} does not match ensemble grid {mean.shape}")
        traces["truth"] = line_trace(truth.data, row)
        write_spectrum_csv(out / "spectrum_truth.csv", angle_averaged_spectrum(truth.data), channels)
        with open(out / "rmse.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "channel", "rmse"])
            for ci, name in enumerate(channels):
                w.writerow(["ensemble_mean", name, repr(rmse(mean, truth.data, ci))])
        if dg.get("points_path"):
            table = read_point_obs(_require_file(dg["points_path"], "point observation file"))
            obs = table[int(dg.get("time", min(table)))]
            mask = points_mask(obs.points, mean.shape, int(dg.get("mask_radius", 1)))
            sc = extract_scatter(truth.data, mean, obs.points, mask, channels,
                                 n_unobserved=dg.get("n_unobserved"))
            write_scatter_csv(out / "scatter.csv", sc, channels)
    write_trace_csv(out / "traces.csv", traces, channels, row)
    write_manifest(out, "diag", cfg)
    return out


COMMANDS = {"train": cmd_train, "sample": cmd_sample, "superres": cmd_superres, "fuse": cmd_fuse,
            "diag": cmd_diag}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="scorefuse", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run configuration (or a previous manifest.json)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--members", type=int)
        p.add_argument("--steps", type=int, help="sampler step count N")
        p.add_argument("--threads", type=int)
        if name == "fuse":
            p.add_argument("--method", choices=FUSE_METHODS)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve(load_config(args.config), args)
        out = COMMANDS[args.command](cfg)
    except (ConfigError, FileNotFoundError, KeyError, ValueError) as exc:
        # ValueError covers malformed fields and grid mismatches
        print(f"scorefuse {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (FloatingPointError, ArithmeticError, RuntimeError) as exc:
        print(f"scorefuse {args.command}: numerical failure: {exc}", file=sys.stderr)
        return 1
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
