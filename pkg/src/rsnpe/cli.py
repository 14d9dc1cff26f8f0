"""Command-line pipeline: simulate, generate, train, validate, infer, plot.

Every command reads one JSON config (full defaults are built in, see
``rsnpe config``), applies ``--set section.key=value`` overrides and writes the
resolved config next to its outputs. Outputs go under ``--out`` or, if that is
not given, under ``$RSNPE_OUTPUT`` (default ``./rsnpe-out``).

Exit codes: 0 success, 1 error, 3 finished but a quality threshold was crossed.
"""

from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path


from . import __version__
from .datagen import (
    PARAM_NAMES,
    PriorSpec,
    build_pairs,
    generate_primary,
    generate_reference,
    load_pairs,
    save_pairs,
    save_primary,
    save_reference,
)
from .flow import FlowConfig, TrainConfig, load_model, save_model, train_flow
from .physics import compute_h, linear_to_db
from .simulator import RadarConfig, TerrainParams, peak_power, save_rangeline, simulate_rangeline

log = logging.getLogger("rsnpe")

OUTPUT_ENV = "RSNPE_OUTPUT"
EXIT_OK, EXIT_ERROR, EXIT_WARN = 0, 1, 3

DEFAULTS = {
    "radar": RadarConfig.desk().to_dict(),
    "prior": PriorSpec().to_dict(),
    "flow": {**dataclasses.asdict(FlowConfig()), "bounded_theta": True},
    "train": dataclasses.asdict(TrainConfig()),
    "data": {
        "n_primary": 500,
        "n_reference": 200,
        "n_train": 8000,
        "n_val": 2000,
        "seed_primary": 1,
        "seed_reference": 2,
        "seed_pairs": 3,
        "workers": 1,
    },
    "validate": {"n_test": 200, "L": 100, "seed_primary": 101, "seed_reference": 102, "seed": 103},
    "infer": {"n_samples": 10_000, "seed": 0, "altitude_exponent": 1.0},
    "thresholds": {"ks_p_min": 0.01, "c2st_rank_max": 0.65, "c2st_dap_max": 0.60, "support_violation_max": 0.01},
}


class ConfigError(ValueError):
    pass


class MissingArtifact(FileNotFoundError):
    def __init__(self, path, producer):
        super().__init__(f"{path} not found; run `rsnpe {producer}` first")


# --- configuration -----------------------------------------------------------


def _merge(base: dict, update: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"{where}: unknown config field")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}: expected a section (JSON object)")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def _parse_override(text: str) -> dict:
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    section, field = key.split(".", 1)
    return {section: {field: value}}


def _build(cls, section: str, values: dict, drop=()):
    kwargs = {k: v for k, v in values.items() if k not in drop}
    for f in dataclasses.fields(cls):
        v = kwargs.get(f.name)
        if v is not None and (not isinstance(v, (int, float)) or isinstance(v, bool)):
            raise ConfigError(f"{section}.{f.name}: expected a number, got {v!r}")
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{section}: {exc}") from exc


class RunConfig:
    """Resolved configuration plus the typed component configs built from it."""

    def __init__(self, raw: dict):
        self.raw = raw
        self.radar = _build(RadarConfig, "radar", raw["radar"])
        self.prior = _build(PriorSpec, "prior", raw["prior"])
        self.flow = _build(FlowConfig, "flow", raw["flow"], drop=("bounded_theta",))
        self.train = _build(TrainConfig, "train", raw["train"])
        for section in ("data", "validate", "infer", "thresholds"):
            for key, value in raw[section].items():
                if not isinstance(value, (int, float)) or isinstance(value, bool):
                    raise ConfigError(f"{section}.{key}: expected a number, got {value!r}")
        d = raw["data"]
        if min(d["n_primary"], d["n_reference"], d["n_train"], d["n_val"], d["workers"]) < 1:
            raise ConfigError("data: sizes and workers must be >= 1")
        if raw["validate"]["n_test"] < 20 or raw["validate"]["L"] < 1:
            raise ConfigError("validate: n_test must be >= 20 and L >= 1")

    @classmethod
    def load(cls, path=None, overrides=()) -> RunConfig:
        raw = copy.deepcopy(DEFAULTS)
        if path is not None:
            try:
                raw = _merge(raw, json.loads(Path(path).read_text()))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        for text in overrides:
            raw = _merge(raw, _parse_override(text))
        return cls(raw)

    @property
    def bounded(self) -> bool:
        return bool(self.raw["flow"]["bounded_theta"])

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True).encode()).hexdigest()[:16]

    def write(self, directory: Path) -> None:
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "config.json").write_text(json.dumps(self.raw, indent=2, sort_keys=True) + "\n")


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise MissingArtifact(path, producer)
    return path


# --- commands ----------------------------------------------------------------


def cmd_simulate(args, run: RunConfig, out: Path) -> int:
    theta = TerrainParams(args.eps, args.sigma_m, args.slope)
    if not run.prior.contains(theta.as_array())[0]:
        print("notice: theta lies outside the prior box; simulating anyway", file=sys.stderr)
    d = out / "simulate"
    run.write(d)
    rl = simulate_rangeline(theta, run.radar, args.seed)
    rl.meta["config_hash"] = run.hash()
    stem = d / args.name
    save_rangeline(stem, rl)
    p = peak_power(rl)
    p_db = linear_to_db(p) if p > 0 else float("-inf")
    print(f"P = {p_db:.4f} dB  ({stem}.bin)")
    return EXIT_OK


def cmd_generate(args, run: RunConfig, out: Path) -> int:
    d = out / "data"
    run.write(d)
    cfg = run.raw["data"]
    primary = generate_primary(cfg["n_primary"], run.prior, run.radar, cfg["seed_primary"], cfg["workers"])
    reference = generate_reference(cfg["n_reference"], run.prior, run.radar, cfg["seed_reference"], cfg["workers"])
    for ds in (primary, reference):
        ds.meta["config_hash"] = run.hash()
    save_primary(d / "primary.csv", primary)
    save_reference(d / "reference.csv", reference)
    train, val = build_pairs(primary, reference, cfg["n_train"], cfg["n_val"], cfg["seed_pairs"])
    meta = {"config_hash": run.hash(), "seed": cfg["seed_pairs"], "cfg_hash": run.radar.config_hash()}
    save_pairs(d / "train.csv", train, {**meta, "split": "train", "n": len(train)})
    save_pairs(d / "val.csv", val, {**meta, "split": "val", "n": len(val)})
    print(f"wrote {len(primary)} primary, {len(reference)} reference, {len(train)}/{len(val)} pairs to {d}")
    return EXIT_OK


def cmd_train(args, run: RunConfig, out: Path) -> int:
    data = out / "data"
    train_meta = json.loads(_require(data / "train.json", "generate").read_text())
    if train_meta.get("cfg_hash") != run.radar.config_hash():
        log.warning("training data was generated with a different radar configuration")
    train = load_pairs(_require(data / "train.csv", "generate"))
    val = load_pairs(_require(data / "val.csv", "generate"))
    bounds = (run.prior.low, run.prior.high) if run.bounded else None
    model, history = train_flow(train, val, run.flow, run.train, theta_bounds=bounds)

    d = out / "model"
    run.write(d)
    save_model(d / "flow", model, extra={"config_hash": run.hash(), "seed": run.train.seed, "prior": run.prior.to_dict()})
    with open(d / "history.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_nll", "val_nll"])
        for row in history:
            w.writerow([row["epoch"], repr(row["train_nll"]), repr(row["val_nll"])])
    best = min(history, key=lambda r: r["val_nll"])
    _write_json(d / "history.json", {"config_hash": run.hash(), "seed": run.train.seed, "best_epoch": best["epoch"]})
    print(f"trained {len(history)} epochs; best val NLL {best['val_nll']:.4f} at epoch {best['epoch']}")
    return EXIT_OK


def _load_model(out: Path):
    _require(out / "model" / "flow.json", "train")
    return load_model(out / "model" / "flow")


def cmd_validate(args, run: RunConfig, out: Path) -> int:
    from .calibration import calibrate, save_rank_histograms, save_ranks

    model = _load_model(out)
    cfg = run.raw["validate"]
    n = cfg["n_test"]
    workers = run.raw["data"]["workers"]
    primary = generate_primary(n, run.prior, run.radar, cfg["seed_primary"], workers)
    reference = generate_reference(n, run.prior, run.radar, cfg["seed_reference"], workers)
    h = compute_h(primary.p, reference.p_ref, reference.eps_ref)
    report, ranks = calibrate(model, primary.theta, h, cfg["L"], run.prior, cfg["seed"])

    d = out / "validate"
    run.write(d)
    doc = json.loads(report.to_json())
    th = run.raw["thresholds"]
    warnings = []
    for name, p, acc_r, acc_d in zip(PARAM_NAMES, report.ks_p, report.c2st_rank, report.c2st_dap):
        if p <= th["ks_p_min"]:
            warnings.append(f"{name}: KS p = {p:.3g} <= {th['ks_p_min']}")
        if acc_r > th["c2st_rank_max"]:
            warnings.append(f"{name}: rank C2ST = {acc_r:.3f} > {th['c2st_rank_max']}")
        if acc_d > th["c2st_dap_max"]:
            warnings.append(f"{name}: DAP C2ST = {acc_d:.3f} > {th['c2st_dap_max']}")
    doc.update(config_hash=run.hash(), warnings=warnings)
    _write_json(d / "report.json", doc)
    save_ranks(d / "ranks.csv", ranks)
    save_rank_histograms(d / "rank_hist.csv", ranks)

    print("param  KS-p    C2ST-rank  C2ST-DAP")
    for name, p, a, b in zip(PARAM_NAMES, report.ks_p, report.c2st_rank, report.c2st_dap):
        print(f"{name:<6} {p:6.3f}  {a:9.3f}  {b:8.3f}")
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    return EXIT_WARN if warnings else EXIT_OK


def cmd_infer(args, run: RunConfig, out: Path) -> int:
    from .inference import Observation, eps_ref_sweep, save_result

    model = _load_model(out)
    cfg = run.raw["infer"]
    n = args.n_samples or cfg["n_samples"]
    seed = cfg["seed"] if args.seed is None else args.seed
    obs = Observation(args.p_obs_db, args.p_ref_db, args.r_km, args.r_ref_km, args.eps_ref[0])
    results = eps_ref_sweep(
        model, obs, args.eps_ref, n, seed, prior=run.prior, altitude_exponent=cfg["altitude_exponent"]
    )

    d = out / "infer"
    run.write(d)
    limit = run.raw["thresholds"]["support_violation_max"]
    warnings = []
    print("eps_ref  h_used       eps(q05/q50/q95)        sigma(q05/q50/q95)   slope(q05/q50/q95)")
    for r in results:
        stem = d / f"{args.name}_eps{r.eps_ref_used:g}"
        save_result(stem, r, {"config_hash": run.hash(), "name": args.name})
        cells = []
        for p in PARAM_NAMES:
            q = r.summary[p]["quantiles"]
            cells.append(f"{q['q05']:.3g}/{q['q50']:.3g}/{q['q95']:.3g}")
        print(f"{r.eps_ref_used:<8g} {r.h_used:<12.5g} " + "  ".join(f"{c:<20}" for c in cells))
        if r.extrapolated:
            warnings.append(f"eps_ref={r.eps_ref_used:g}: h outside the training support")
        if r.support_violations > limit * len(r.samples):
            warnings.append(f"eps_ref={r.eps_ref_used:g}: {r.support_violations} samples outside the prior box")
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    return EXIT_WARN if warnings else EXIT_OK


def cmd_plot(args, run: RunConfig, out: Path) -> int:
    from . import plotting

    d = out / "plots"
    run.write(d)
    made = []
    infer_dir = out / "infer"
    groups: dict[str, list[Path]] = {}
    for csv_path in sorted(infer_dir.glob("*_eps*.csv")):
        groups.setdefault(csv_path.stem.rsplit("_eps", 1)[0], []).append(csv_path)
    for name, paths in groups.items():
        made.append(plotting.corner_plot(paths, d / f"corner_{name}.png", run.prior))
    ranks = out / "validate" / "ranks.csv"
    if ranks.exists():
        L = json.loads((out / "validate" / "report.json").read_text())["L"]
        made.append(plotting.rank_histograms(ranks, L, d / "rank_histograms.png"))
    if not made:
        raise MissingArtifact(f"{infer_dir} and {ranks}", "infer` or `rsnpe validate")
    for p in made:
        print(p)
    return EXIT_OK


def cmd_config(args, run: RunConfig, out: Path) -> int:
    print(json.dumps(run.raw, indent=2, sort_keys=True))
    return EXIT_OK


# --- entry point -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config file (missing fields take defaults)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override one config field")
    common.add_argument("--out", type=Path, help=f"output root (default ${OUTPUT_ENV} or ./rsnpe-out)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="rsnpe", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"rsnpe {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="simulate one rangeline and print its peak power")
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--sigma-m", type=float, required=True)
    p.add_argument("--slope", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--name", default="rangeline")
    p.set_defaults(func=cmd_simulate)

    sub.add_parser("generate", parents=[common], help="simulate datasets and build training pairs").set_defaults(func=cmd_generate)
    sub.add_parser("train", parents=[common], help="train the flow on generated pairs").set_defaults(func=cmd_train)
    sub.add_parser("validate", parents=[common], help="simulation-based calibration of the trained flow").set_defaults(func=cmd_validate)

    p = sub.add_parser("infer", parents=[common], help="posterior for an observed pair of peak powers")
    p.add_argument("--p-obs-db", type=float, required=True)
    p.add_argument("--p-ref-db", type=float, required=True)
    p.add_argument("--r-km", type=float, required=True)
    p.add_argument("--r-ref-km", type=float, required=True)
    p.add_argument("--eps-ref", type=float, action="append", required=True, help="repeat for a sweep")
    p.add_argument("--n-samples", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--name", default="posterior")
    p.set_defaults(func=cmd_infer)

    sub.add_parser("plot", parents=[common], help="corner plots and rank histograms").set_defaults(func=cmd_plot)
    sub.add_parser("config", parents=[common], help="print the resolved config").set_defaults(func=cmd_config)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    out = args.out or Path(os.environ.get(OUTPUT_ENV, "rsnpe-out"))
    try:
        run = RunConfig.load(args.config, args.set)
        return args.func(args, run, out)
    except (ConfigError, MissingArtifact, ValueError, RuntimeError, OSError) as exc:
        print(f"rsnpe {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
