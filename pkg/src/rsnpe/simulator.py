"""Facet-based forward model: terrain parameters -> rangeline -> peak power.

Each facet inside the first Fresnel zone returns

    a_i = tx * Gamma(eps) * dx**2 * cos(tilt_i) / h_i**2 * exp(-2j * k * h_i)

at two-way delay ``2 * h_i / c`` (constant phase approximation, with ``h_i`` the
facet-to-radar range). Contributions are deposited on the nearest sample of
the rangeline time grid and power-law galactic noise is added on top.
"""

from __future__ import annotations

import functools
import hashlib
import json
import math
from dataclasses import dataclass, asdict, replace
from pathlib import Path

import numpy as np

from .physics import SPEED_OF_LIGHT, fresnel_amplitude, fresnel_zone_radius, wavelength
from .surface import SurfaceMesh, SurfaceSpec, synthesize_grf

NOISE_REFERENCE_EPS = 3.1

_calls = 0


def simulation_calls() -> int:
    """Number of ``simulate_rangeline`` invocations in this process."""
    return _calls


class SimulationConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RadarConfig:
    """Radar hyper-parameters. ``None`` fields are derived from the others."""

    f_c_mhz: float = 20.0
    r_km: float = 300.0
    dx_m: float | None = None
    footprint_radius_m: float | None = None
    f_s_mhz: float = 26.67
    n_s: int = 128
    noise_alpha: float = 2.5
    snr_db: float | None = 30.0
    tx_amplitude: float = 1.0
    chunk_size: int = 1 << 16

    def __post_init__(self):
        lam = self.wavelength
        if self.f_c_mhz <= 0 or self.f_s_mhz <= 0 or self.r_km <= 0:
            raise SimulationConfigError("f_c_mhz, f_s_mhz and r_km must be positive")
        if not 0 < self.dx <= lam / 10 * (1 + 1e-12):
            raise SimulationConfigError(f"dx_m must be in (0, lambda/10 = {lam / 10:.4g}], got {self.dx}")
        fresnel = fresnel_zone_radius(lam, self.altitude_m)
        if not 0 < self.footprint_radius <= fresnel * (1 + 1e-9):
            raise SimulationConfigError(
                f"footprint_radius_m must be in (0, {fresnel:.4g}] (first Fresnel zone), got {self.footprint_radius}"
            )
        if self.n_s < 16:
            raise SimulationConfigError(f"n_s must be >= 16, got {self.n_s}")
        if self.noise_alpha <= 0:
            raise SimulationConfigError(f"noise_alpha must be > 0, got {self.noise_alpha}")
        if self.chunk_size < 1:
            raise SimulationConfigError("chunk_size must be >= 1")

    @classmethod
    def desk(cls, **overrides) -> RadarConfig:
        """Desk-scale configuration at 5 km altitude (about 5e4 facets per simulation)."""
        return cls(**{"r_km": 5.0, **overrides})

    @property
    def wavelength(self) -> float:
        return wavelength(self.f_c_mhz)

    @property
    def altitude_m(self) -> float:
        return self.r_km * 1e3

    @property
    def dx(self) -> float:
        return self.wavelength / 10 if self.dx_m is None else self.dx_m

    @property
    def footprint_radius(self) -> float:
        if self.footprint_radius_m is None:
            return fresnel_zone_radius(self.wavelength, self.altitude_m)
        return self.footprint_radius_m

    @property
    def dt(self) -> float:
        return 1.0 / (self.f_s_mhz * 1e6)

    @property
    def wavenumber(self) -> float:
        return 2 * np.pi / self.wavelength

    def grid_points(self) -> int:
        """Odd grid size whose centred facets cover the footprint disk."""
        return 2 * int(math.ceil(self.footprint_radius / self.dx)) + 1

    def window_start(self) -> float:
        """Time of sample 0.

        The grid is aligned so that the sample at index ``n_s // 2`` sits in the
        middle of the flat-plate delay spread, which keeps a flat plate's whole
        return in a single bin whenever that spread is shorter than ``dt``.
        """
        r = self.altitude_m
        spread = 2 * (math.hypot(r, self.footprint_radius) - r) / SPEED_OF_LIGHT
        centre = 2 * r / SPEED_OF_LIGHT + spread / 2
        return centre - (self.n_s // 2) * self.dt

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def noiseless(self) -> RadarConfig:
        return replace(self, snr_db=None)


@dataclass(frozen=True)
class TerrainParams:
    eps: float
    sigma: float
    slope: float

    def __post_init__(self):
        if not self.eps >= 1:
            raise ValueError(f"eps must be >= 1, got {self.eps}")
        if not (self.sigma >= 0 and self.slope >= 0):
            raise ValueError(f"sigma and slope must be >= 0, got {self.sigma}, {self.slope}")

    def as_array(self) -> np.ndarray:
        return np.array([self.eps, self.sigma, self.slope], dtype=float)


@dataclass
class Rangeline:
    samples: np.ndarray
    dt: float
    t0: float
    meta: dict | None = None

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(len(self.samples))


def _iter_facet_chunks(mesh: SurfaceMesh, theta: TerrainParams, cfg: RadarConfig):
    x, y = mesh.coordinates()
    radius = cfg.footprint_radius
    if (mesh.n - 1) / 2 * mesh.dx < radius * (1 - 1e-9):
        raise SimulationConfigError("mesh does not cover the footprint disk")
    inside = (x**2 + y**2) <= radius**2
    if not inside.any():
        raise SimulationConfigError("footprint contains no facets")

    gy, gx = np.gradient(mesh.heights, mesh.dx)
    cos_tilt = (1.0 / np.sqrt(1.0 + gx**2 + gy**2))[inside]
    xs, ys, zs = x[inside], y[inside], mesh.heights[inside]

    r = cfg.altitude_m
    k = cfg.wavenumber
    scale = cfg.tx_amplitude * fresnel_amplitude(theta.eps) * mesh.dx**2
    for start in range(0, xs.size, cfg.chunk_size):
        sl = slice(start, start + cfg.chunk_size)
        h = np.sqrt(xs[sl] ** 2 + ys[sl] ** 2 + (r - zs[sl]) ** 2)
        amp = scale * cos_tilt[sl] / h**2 * np.exp(-2j * k * h)
        yield amp, 2 * h / SPEED_OF_LIGHT


def facet_fields(mesh: SurfaceMesh, theta: TerrainParams, cfg: RadarConfig):
    """Complex amplitude and two-way delay (s) of every facet inside the footprint."""
    chunks = list(_iter_facet_chunks(mesh, theta, cfg))
    return np.concatenate([a for a, _ in chunks]), np.concatenate([d for _, d in chunks])


def galactic_noise(n_s: int, dt: float, alpha: float, level: float, seed: int) -> np.ndarray:
    """Zero-mean complex Gaussian series with power spectrum proportional to ``|f|**-alpha``.

    The DC bin takes the value of the lowest non-zero frequency. ``level`` is the
    expected per-sample power E|n|^2.
    """
    if n_s < 16:
        raise ValueError("n_s must be >= 16")
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    if level < 0:
        raise ValueError("level must be >= 0")
    if level == 0:
        return np.zeros(n_s, dtype=complex)
    rng = np.random.default_rng(seed)
    white = (rng.standard_normal(n_s) + 1j * rng.standard_normal(n_s)) / np.sqrt(2)
    f = np.abs(np.fft.fftfreq(n_s, d=dt))
    f[0] = f[1]
    shape = f ** (-alpha / 2)
    shape /= np.sqrt(np.mean(shape**2))
    return np.fft.ifft(white * shape) * np.sqrt(n_s * level)


@functools.lru_cache(maxsize=32)
def noise_level(cfg: RadarConfig) -> float:
    """Per-sample noise power implied by ``cfg.snr_db``.

    SNR is the noiseless flat-plate peak power at eps = 3.1 over the noise power.
    """
    if cfg.snr_db is None:
        return 0.0
    flat = simulate_rangeline(TerrainParams(NOISE_REFERENCE_EPS, 0.0, 0.0), cfg.noiseless(), 0)
    return peak_power(flat) / 10 ** (cfg.snr_db / 10)


def _seeds(seed: int) -> tuple[int, int]:
    surf, noise = np.random.SeedSequence(seed).spawn(2)
    return int(surf.generate_state(1, np.uint64)[0]), int(noise.generate_state(1, np.uint64)[0])


def simulate_rangeline(theta: TerrainParams, cfg: RadarConfig, seed: int, mesh: SurfaceMesh | None = None) -> Rangeline:
    """Simulate one rangeline.

    A surface mesh is synthesised from ``(sigma, slope)`` unless one is supplied.
    Slopes too steep for the facet size are realised at the steepest resolvable
    slope (see ``synthesize_grf(clamp=True)``).
    """
    global _calls
    _calls += 1

    surf_seed, noise_seed = _seeds(seed)
    if mesh is None:
        mesh = synthesize_grf(SurfaceSpec(theta.sigma, theta.slope, cfg.dx, cfg.grid_points(), surf_seed), clamp=True)

    n_s, dt, t0 = cfg.n_s, cfg.dt, cfg.window_start()
    window = n_s * dt
    lo, hi = t0 + 0.05 * window, t0 + 0.95 * window
    acc_re = np.zeros(n_s)
    acc_im = np.zeros(n_s)
    for amp, delay in _iter_facet_chunks(mesh, theta, cfg):
        if delay.min() < lo or delay.max() > hi:
            raise SimulationConfigError(
                f"facet delays [{delay.min():.6e}, {delay.max():.6e}] s exceed the rangeline window "
                f"[{t0:.6e}, {t0 + window:.6e}] s with a 10% margin; increase n_s"
            )
        idx = np.rint((delay - t0) / dt).astype(np.intp)
        acc_re += np.bincount(idx, weights=amp.real, minlength=n_s)
        acc_im += np.bincount(idx, weights=amp.imag, minlength=n_s)

    samples = acc_re + 1j * acc_im
    level = noise_level(cfg)
    if level > 0:
        samples = samples + galactic_noise(n_s, dt, cfg.noise_alpha, level, noise_seed)

    meta = {"seed": seed, "theta": asdict(theta), "cfg_hash": cfg.config_hash()}
    return Rangeline(samples, dt, t0, meta)


def peak_power(rangeline) -> float:
    """max_t |R(t)|^2."""
    samples = rangeline.samples if isinstance(rangeline, Rangeline) else np.asarray(rangeline)
    if samples.size == 0:
        raise ValueError("empty rangeline")
    return float(np.max(samples.real**2 + samples.imag**2))


def simulate_peak_power(theta: TerrainParams, cfg: RadarConfig, seed: int) -> float:
    return peak_power(simulate_rangeline(theta, cfg, seed))


def save_rangeline(path, rangeline: Rangeline) -> None:
    """Write ``<path>.bin`` (interleaved little-endian float64 re/im) and ``<path>.json``."""
    path = Path(path)
    inter = np.empty(2 * len(rangeline.samples), dtype="<f8")
    inter[0::2] = rangeline.samples.real
    inter[1::2] = rangeline.samples.imag
    path.with_name(path.name + ".bin").write_bytes(inter.tobytes())
    header = {"n_s": len(rangeline.samples), "dt": rangeline.dt, "t0": rangeline.t0, **(rangeline.meta or {})}
    path.with_name(path.name + ".json").write_text(json.dumps(header, indent=2, sort_keys=True))


def load_rangeline(path) -> Rangeline:
    path = Path(path)
    header = json.loads(path.with_name(path.name + ".json").read_text())
    inter = np.frombuffer(path.with_name(path.name + ".bin").read_bytes(), dtype="<f8")
    samples = inter[0::2] + 1j * inter[1::2]
    meta = {k: v for k, v in header.items() if k not in ("n_s", "dt", "t0")}
    return Rangeline(samples, header["dt"], header["t0"], meta)
