"""Gaussian random field surfaces with prescribed RMS height and RMS slope.

The height field has an isotropic Gaussian autocorrelation
``C(r) = sigma**2 * exp(-r**2 / l**2)``. For such a surface the RMS magnitude of
the 2-D gradient is ``2 * sigma / l``, so the correlation length realising a
target RMS slope ``m`` is ``l = 2 * sigma / m``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PAD_FACTOR = 1.25


class SurfaceConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SurfaceSpec:
    sigma: float
    slope: float
    dx: float
    n: int
    seed: int = 0

    def __post_init__(self):
        if not (self.sigma >= 0 and self.slope >= 0):
            raise SurfaceConfigError(f"sigma and slope must be >= 0, got {self.sigma}, {self.slope}")
        if not self.dx > 0:
            raise SurfaceConfigError(f"dx must be > 0, got {self.dx}")
        if self.n < 2:
            raise SurfaceConfigError(f"grid needs n >= 2 points per side, got {self.n}")


@dataclass
class SurfaceMesh:
    heights: np.ndarray
    dx: float
    seed: int | None = None

    @property
    def n(self) -> int:
        return self.heights.shape[0]

    def coordinates(self):
        """Facet-centre x and y coordinates (m), centred on the grid middle."""
        axis = (np.arange(self.n) - (self.n - 1) / 2.0) * self.dx
        return np.meshgrid(axis, axis, indexing="xy")


def correlation_length(sigma: float, slope: float) -> float:
    if slope <= 0:
        return math.inf
    return 2.0 * sigma / slope


def synthesize_grf(spec: SurfaceSpec, clamp: bool = False) -> SurfaceMesh:
    """Spectral synthesis of a zero-mean Gaussian surface on an ``n x n`` grid.

    White noise on a grid padded by ``PAD_FACTOR`` is filtered with the square
    root of the Gaussian power spectrum, cropped back to ``n x n`` (removing
    wrap-around correlation at the edges), then shifted and scaled to zero mean
    and RMS height exactly ``sigma``.

    A correlation length shorter than two facets cannot be represented on the
    grid. By default that raises; with ``clamp=True`` the correlation length is
    held at ``2 * dx`` instead, so the surface keeps its RMS height but its slope
    saturates at the steepest resolvable value. At the other extreme, a
    correlation length much longer than the grid leaves only the longest grid
    waves, so the realised slope exceeds the target.
    """
    n, dx = spec.n, spec.dx
    if spec.sigma == 0:
        return SurfaceMesh(np.zeros((n, n)), dx, spec.seed)
    if spec.slope == 0:
        raise SurfaceConfigError("sigma > 0 with slope = 0 implies an infinite correlation length")

    corr = correlation_length(spec.sigma, spec.slope)
    if corr < 2 * dx:
        if not clamp:
            raise SurfaceConfigError(
                f"correlation length {corr:.3g} m is below two facets (2*dx = {2 * dx:.3g} m); "
                "reduce the slope or the facet size"
            )
        corr = 2 * dx

    m = max(int(math.ceil(PAD_FACTOR * n)), n + 1)
    rng = np.random.default_rng(spec.seed)
    white = rng.standard_normal((m, m))

    k = 2 * np.pi * np.fft.fftfreq(m, d=dx)
    kx, ky = np.meshgrid(k, k, indexing="xy")
    k2 = kx**2 + ky**2
    # sqrt of exp(-k^2 l^2 / 4), relative to the lowest non-DC mode so a correlation
    # length far beyond the grid degrades to its longest waves instead of underflowing
    k2[0, 0] = k2[k2 > 0].min()
    amplitude = np.exp(-(k2 - k2[0, 0]) * corr**2 / 8.0)
    amplitude[0, 0] = 0.0
    field = np.fft.ifft2(np.fft.fft2(white) * amplitude).real

    heights = field[:n, :n]
    heights = heights - heights.mean()
    heights *= spec.sigma / np.sqrt(np.mean(heights**2))
    return SurfaceMesh(heights, dx, spec.seed)


def estimate_surface_stats(mesh: SurfaceMesh) -> tuple[float, float]:
    """Return (RMS height, RMS gradient magnitude) from interior central differences."""
    z = np.asarray(mesh.heights, dtype=float)
    if z.ndim != 2 or min(z.shape) < 3:
        raise ValueError(f"need at least a 3x3 grid, got shape {z.shape}")
    sigma_hat = float(np.sqrt(np.mean((z - z.mean()) ** 2)))
    gx = (z[1:-1, 2:] - z[1:-1, :-2]) / (2 * mesh.dx)
    gy = (z[2:, 1:-1] - z[:-2, 1:-1]) / (2 * mesh.dx)
    slope_hat = float(np.sqrt(np.mean(gx**2 + gy**2)))
    return sigma_hat, slope_hat


def save_mesh(path, mesh: SurfaceMesh) -> None:
    """Write ``<path>.bin`` (little-endian float64, row-major) and ``<path>.json``."""
    path = Path(path)
    path.with_name(path.name + ".bin").write_bytes(np.ascontiguousarray(mesh.heights, dtype="<f8").tobytes())
    header = {"n": mesh.n, "dx": mesh.dx, "seed": mesh.seed, "dtype": "<f8", "order": "C"}
    path.with_name(path.name + ".json").write_text(json.dumps(header, indent=2))


def load_mesh(path) -> SurfaceMesh:
    path = Path(path)
    header = json.loads(path.with_name(path.name + ".json").read_text())
    n = header["n"]
    heights = np.frombuffer(path.with_name(path.name + ".bin").read_bytes(), dtype="<f8").reshape(n, n).copy()
    return SurfaceMesh(heights, header["dx"], header.get("seed"))

