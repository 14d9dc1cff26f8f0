"""Amortised posterior inference for observed peak powers.

Nothing here calls the simulator: a trained flow is conditioned on the
relative power ``h`` built from the observation and sampled directly.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .datagen import PARAM_NAMES, PriorSpec
from .physics import altitude_rescale, compute_h, db_to_linear

log = logging.getLogger(__name__)

QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)
EXTRAPOLATION_SIGMAS = 6.0
SUPPORT_EXPANSION = 0.05


@dataclass(frozen=True)
class Observation:
    p_obs_db: float
    p_ref_obs_db: float
    r_obs_km: float
    r_ref_obs_km: float
    eps_ref_assumed: float

    def __post_init__(self):
        if self.r_obs_km <= 0 or self.r_ref_obs_km <= 0:
            raise ValueError("altitudes must be positive")
        if self.eps_ref_assumed < 1:
            raise ValueError("eps_ref_assumed must be >= 1")
        if not (np.isfinite(self.p_obs_db) and np.isfinite(self.p_ref_obs_db)):
            raise ValueError("observed powers must be finite")


@dataclass
class PosteriorResult:
    samples: np.ndarray
    eps_ref_used: float
    h_used: float
    summary: dict
    extrapolated: bool = False
    support_violations: int = 0
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "eps_ref_used": self.eps_ref_used,
            "h_used": self.h_used,
            "n_samples": int(len(self.samples)),
            "extrapolated": self.extrapolated,
            "support_violations": self.support_violations,
            "summary": self.summary,
            **self.meta,
        }


def summarize(samples) -> dict:
    """Per-parameter mean, std, quantiles and the sample correlation matrix."""
    samples = np.asarray(samples, dtype=float)
    if samples.size == 0:
        raise ValueError("no samples to summarise")
    if samples.ndim == 1:
        samples = samples[:, None]
    names = PARAM_NAMES if samples.shape[1] == len(PARAM_NAMES) else tuple(f"x{i}" for i in range(samples.shape[1]))
    out = {}
    qs = np.quantile(samples, QUANTILES, axis=0)
    std = samples.std(axis=0, ddof=1) if len(samples) > 1 else np.zeros(samples.shape[1])
    for d, name in enumerate(names):
        out[name] = {
            "mean": float(samples[:, d].mean()),
            "std": float(std[d]),
            "quantiles": {f"q{int(round(q * 100)):02d}": float(v) for q, v in zip(QUANTILES, qs[:, d])},
        }
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.corrcoef(samples, rowvar=False) if len(samples) > 1 else np.full((samples.shape[1],) * 2, np.nan)
    out["correlation"] = np.atleast_2d(corr).tolist()
    return out


def observation_h(obs: Observation, altitude_exponent: float = 1.0) -> float:
    p = db_to_linear(obs.p_obs_db)
    p_ref = altitude_rescale(db_to_linear(obs.p_ref_obs_db), obs.r_ref_obs_km, obs.r_obs_km, altitude_exponent)
    return compute_h(p, p_ref, obs.eps_ref_assumed)


def infer(model, obs: Observation, n: int, seed: int, prior: PriorSpec | None = None, altitude_exponent: float = 1.0):
    """Posterior samples and summary for one observation."""
    if n < 1:
        raise ValueError("n must be >= 1")
    h = observation_h(obs, altitude_exponent)
    samples = np.asarray(model.sample(h, n, seed))
    if not np.all(np.isfinite(samples)):
        raise RuntimeError("flow produced non-finite samples")

    extrapolated = False
    if hasattr(model, "context_envelope"):
        extrapolated = model.context_envelope(h) > EXTRAPOLATION_SIGMAS
        if extrapolated:
            log.warning("h = %.4g lies outside the training support; the posterior is an extrapolation", h)
    violations = 0
    if prior is not None:
        violations = int((~prior.contains(samples, SUPPORT_EXPANSION)).sum())
    return PosteriorResult(
        samples=samples,
        eps_ref_used=float(obs.eps_ref_assumed),
        h_used=float(h),
        summary=summarize(samples),
        extrapolated=bool(extrapolated),
        support_violations=violations,
        meta={"observation": asdict(obs), "seed": seed},
    )


def eps_ref_sweep(model, obs: Observation, eps_values, n: int, seed: int, **kwargs) -> list[PosteriorResult]:
    """One inference per assumed reference permittivity, all sharing the base-noise seed."""
    eps_values = list(eps_values)
    if not eps_values:
        raise ValueError("eps_values must be non-empty")
    return [
        infer(model, Observation(obs.p_obs_db, obs.p_ref_obs_db, obs.r_obs_km, obs.r_ref_obs_km, float(e)), n, seed, **kwargs)
        for e in eps_values
    ]


def save_result(stem, result: PosteriorResult, extra: dict | None = None) -> None:
    """Write ``<stem>.json`` (summary and metadata) and ``<stem>.csv`` (samples)."""
    stem = Path(stem)
    stem.with_name(stem.name + ".json").write_text(json.dumps({**result.to_dict(), **(extra or {})}, indent=2))
    lines = [",".join(PARAM_NAMES)]
    lines += [",".join(repr(float(v)) for v in row) for row in result.samples]
    stem.with_name(stem.name + ".csv").write_text("\n".join(lines) + "\n")


def load_samples(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
