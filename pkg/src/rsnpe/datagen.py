"""Prior sampling, dataset simulation and (theta, h) pair assembly."""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np

from .physics import compute_h
from .simulator import RadarConfig, TerrainParams, simulate_peak_power

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
PARAM_NAMES = ("eps", "sigma", "slope")


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class PriorSpec:
    eps_lo: float = 2.0
    eps_hi: float = 12.0
    sigma_lo: float = 0.0
    sigma_hi: float = 5.0
    slope_lo: float = 0.0
    slope_hi: float = 0.5
    eps_ref_lo: float = 2.0
    eps_ref_hi: float = 4.0

    def __post_init__(self):
        pairs = [
            ("eps", self.eps_lo, self.eps_hi),
            ("sigma", self.sigma_lo, self.sigma_hi),
            ("slope", self.slope_lo, self.slope_hi),
            ("eps_ref", self.eps_ref_lo, self.eps_ref_hi),
        ]
        for name, lo, hi in pairs:
            if not (np.isfinite(lo) and np.isfinite(hi) and lo <= hi):
                raise ValueError(f"prior bounds for {name} need lo <= hi, got [{lo}, {hi}]")
        if self.eps_lo < 1 or self.eps_ref_lo < 1:
            raise ValueError("permittivity bounds must be >= 1")
        if self.sigma_lo < 0 or self.slope_lo < 0:
            raise ValueError("sigma and slope bounds must be >= 0")

    @property
    def low(self) -> np.ndarray:
        return np.array([self.eps_lo, self.sigma_lo, self.slope_lo])

    @property
    def high(self) -> np.ndarray:
        return np.array([self.eps_hi, self.sigma_hi, self.slope_hi])

    def contains(self, theta, expand: float = 0.0) -> np.ndarray:
        """Boolean mask of rows inside the box, optionally widened by ``expand`` of each width."""
        theta = np.atleast_2d(theta)
        pad = expand * (self.high - self.low)
        return np.all((theta >= self.low - pad) & (theta <= self.high + pad), axis=1)

    def to_dict(self) -> dict:
        return asdict(self)


def sample_prior(n: int, spec: PriorSpec, seed: int) -> np.ndarray:
    """``n`` i.i.d. uniform draws from the prior box, as an (n, 3) array of (eps, sigma, slope)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    return rng.uniform(spec.low, spec.high, size=(n, 3))


@dataclass
class PrimaryDataset:
    theta: np.ndarray
    p: np.ndarray
    seed: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.p)


@dataclass
class ReferenceDataset:
    eps_ref: np.ndarray
    p_ref: np.ndarray
    seed: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.p_ref)


@dataclass
class PairSet:
    theta: np.ndarray
    h: np.ndarray
    index: np.ndarray  # (n, 2) source rows (primary, reference)

    def __len__(self):
        return len(self.h)


def _simulate_one(args):
    theta, cfg, seed = args
    return simulate_peak_power(TerrainParams(*theta), cfg, seed)


def _run_simulations(thetas, cfg, seeds, workers):
    jobs = [(tuple(map(float, t)), cfg, int(s)) for t, s in zip(thetas, seeds)]
    out = np.empty(len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = pool.map(_simulate_one, jobs, chunksize=16)
            for i, _ in enumerate(jobs):
                try:
                    out[i] = next(results)
                except Exception as exc:
                    raise DatasetError(f"simulation of record {i} failed: {exc}") from exc
        return out
    for i, job in enumerate(jobs):
        try:
            out[i] = _simulate_one(job)
        except Exception as exc:
            raise DatasetError(f"simulation of record {i} (theta={job[0]}) failed: {exc}") from exc
    return out


def _meta(kind, n, spec, cfg, seed):
    return {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "n": n,
        "seed": seed,
        "prior": spec.to_dict(),
        "radar": cfg.to_dict(),
        "cfg_hash": cfg.config_hash(),
    }


def generate_primary(n: int, spec: PriorSpec, cfg: RadarConfig, seed: int, workers: int = 1) -> PrimaryDataset:
    """Draw ``n`` prior samples and simulate one peak power for each."""
    if n < 1:
        raise ValueError("n must be >= 1")
    theta_seed, sim_seed = np.random.SeedSequence(seed).spawn(2)
    theta = sample_prior(n, spec, int(theta_seed.generate_state(1, np.uint64)[0]))
    seeds = np.random.default_rng(sim_seed).integers(0, 2**63, size=n, dtype=np.int64)
    log.info("simulating %d primary records", n)
    p = _run_simulations(theta, cfg, seeds, workers)
    return PrimaryDataset(theta, p, seeds, _meta("primary", n, spec, cfg, seed))


def generate_reference(n: int, spec: PriorSpec, cfg: RadarConfig, seed: int, workers: int = 1) -> ReferenceDataset:
    """Simulate ``n`` flat plates with eps_ref drawn uniformly from the reference prior."""
    if n < 1:
        raise ValueError("n must be >= 1")
    eps_seed, sim_seed = np.random.SeedSequence(seed).spawn(2)
    eps_ref = np.random.default_rng(eps_seed).uniform(spec.eps_ref_lo, spec.eps_ref_hi, size=n)
    seeds = np.random.default_rng(sim_seed).integers(0, 2**63, size=n, dtype=np.int64)
    thetas = np.column_stack([eps_ref, np.zeros(n), np.zeros(n)])
    log.info("simulating %d reference records", n)
    p_ref = _run_simulations(thetas, cfg, seeds, workers)
    if np.any(p_ref <= 0):
        raise DatasetError("reference simulation produced a non-positive peak power")
    return ReferenceDataset(eps_ref, p_ref, seeds, _meta("reference", n, spec, cfg, seed))


def build_pairs(primary: PrimaryDataset, reference: ReferenceDataset, n_train: int, n_val: int, seed: int):
    """Draw disjoint train/val index pairs without replacement from primary x reference.

    Returns ``(train, val)`` PairSets with ``h`` computed from each pair's powers
    and reference permittivity.
    """
    n_p, n_r = len(primary), len(reference)
    total = n_p * n_r
    if n_train < 0 or n_val < 0 or n_train + n_val < 1:
        raise ValueError("n_train and n_val must be non-negative with a positive sum")
    if n_train + n_val > total:
        raise ValueError(f"requested {n_train + n_val} pairs but the product only has {total}")
    rng = np.random.default_rng(seed)
    flat = rng.choice(total, size=n_train + n_val, replace=False, shuffle=True)
    i, j = np.divmod(flat, n_r)
    h = compute_h(primary.p[i], reference.p_ref[j], reference.eps_ref[j])
    h = np.atleast_1d(h)
    index = np.column_stack([i, j])

    def take(sl):
        return PairSet(primary.theta[i[sl]], h[sl], index[sl])

    return take(slice(0, n_train)), take(slice(n_train, None))


# --- persistence -------------------------------------------------------------


def _write_csv(path: Path, header, columns):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in zip(*columns):
            w.writerow([repr(v.item()) if isinstance(v, np.generic) else repr(v) for v in row])


def _read_csv(path: Path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    return header, rows


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def save_primary(path, ds: PrimaryDataset) -> None:
    path = Path(path)
    _write_csv(path, ["eps", "sigma", "slope", "p_linear", "seed"], [*ds.theta.T, ds.p, ds.seed])
    _sidecar(path).write_text(json.dumps(ds.meta, indent=2, sort_keys=True))


def load_primary(path) -> PrimaryDataset:
    path = Path(path)
    _, rows = _read_csv(path)
    arr = np.array([[float(v) for v in r[:4]] for r in rows]).reshape(-1, 4)
    seeds = np.array([int(r[4]) for r in rows], dtype=np.int64)
    meta = json.loads(_sidecar(path).read_text()) if _sidecar(path).exists() else {}
    return PrimaryDataset(arr[:, :3], arr[:, 3], seeds, meta)


def save_reference(path, ds: ReferenceDataset) -> None:
    path = Path(path)
    _write_csv(path, ["eps_ref", "p_ref_linear", "seed"], [ds.eps_ref, ds.p_ref, ds.seed])
    _sidecar(path).write_text(json.dumps(ds.meta, indent=2, sort_keys=True))


def load_reference(path) -> ReferenceDataset:
    path = Path(path)
    _, rows = _read_csv(path)
    arr = np.array([[float(v) for v in r[:2]] for r in rows]).reshape(-1, 2)
    seeds = np.array([int(r[2]) for r in rows], dtype=np.int64)
    meta = json.loads(_sidecar(path).read_text()) if _sidecar(path).exists() else {}
    return ReferenceDataset(arr[:, 0], arr[:, 1], seeds, meta)


def save_pairs(path, pairs: PairSet, meta: dict | None = None) -> None:
    path = Path(path)
    _write_csv(path, ["eps", "sigma", "slope", "h"], [*pairs.theta.T, pairs.h])
    if meta is not None:
        _sidecar(path).write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_pairs(path) -> PairSet:
    _, rows = _read_csv(Path(path))
    arr = np.array([[float(v) for v in r] for r in rows]).reshape(-1, 4)
    return PairSet(arr[:, :3], arr[:, 3], np.full((len(arr), 2), -1))
