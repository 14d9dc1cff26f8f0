"""Closed-form electromagnetic quantities shared by the simulator and the inference path.

All arithmetic is carried out in linear power. Decibels only appear at the
boundaries (CLI flags, printed output).
"""

from __future__ import annotations

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0  # m/s


class DomainError(ValueError):
    """An input lies outside the mathematical domain of a physical formula."""


def _check_permittivity(eps):
    eps = np.asarray(eps, dtype=float)
    if np.any(~np.isfinite(eps)) or np.any(eps < 1.0):
        raise DomainError(f"relative permittivity must be finite and >= 1, got {eps}")
    return eps


def fresnel_amplitude(eps):
    """Normal-incidence amplitude reflection coefficient (1 - sqrt(eps)) / (1 + sqrt(eps))."""
    root = np.sqrt(_check_permittivity(eps))
    out = (1.0 - root) / (1.0 + root)
    return float(out) if out.ndim == 0 else out


def fresnel_power_reflectance(eps):
    """|(1 - sqrt(eps)) / (1 + sqrt(eps))|**2, in [0, 1) for eps >= 1."""
    gamma = fresnel_amplitude(eps)
    return gamma * gamma


def compute_h(p, p_ref, eps_ref):
    """Relative peak power conditioned on the reference-surface permittivity.

    ``h = p / p_ref * R(eps_ref)`` where ``R`` is the normal-incidence power
    reflectance. Works elementwise on arrays.
    """
    p = np.asarray(p, dtype=float)
    p_ref = np.asarray(p_ref, dtype=float)
    if np.any(p < 0):
        raise DomainError("peak power must be non-negative")
    if np.any(p_ref <= 0):
        raise ZeroDivisionError("reference peak power must be strictly positive")
    out = (p / p_ref) * fresnel_power_reflectance(eps_ref)
    return float(out) if np.ndim(out) == 0 else out


def db_to_linear(value_db):
    out = np.power(10.0, np.asarray(value_db, dtype=float) / 10.0)
    return float(out) if out.ndim == 0 else out


def linear_to_db(value):
    value = np.asarray(value, dtype=float)
    if np.any(value <= 0):
        raise DomainError("decibel conversion needs strictly positive power")
    out = 10.0 * np.log10(value)
    return float(out) if out.ndim == 0 else out


def altitude_rescale(p_ref, r_ref_km, r_km, exponent=1.0):
    """Rescale a linear reference power measured at ``r_ref_km`` to altitude ``r_km``.

    The correction factor is ``(r / r_ref) ** exponent``. The default exponent
    of +1 multiplies by ``r / r_ref``; pass -1 to divide instead, or -2 for a
    specular 1/r**2 spreading law.
    """
    if r_ref_km <= 0 or r_km <= 0:
        raise DomainError(f"altitudes must be positive, got r_ref={r_ref_km}, r={r_km}")
    out = np.asarray(p_ref, dtype=float) * (r_km / r_ref_km) ** exponent
    return float(out) if out.ndim == 0 else out


def wavelength(f_c_mhz):
    return SPEED_OF_LIGHT / (f_c_mhz * 1e6)


def fresnel_zone_radius(wavelength_m, altitude_m):
    """Radius of the first Fresnel zone, sqrt(lambda * r / 2)."""
    return float(np.sqrt(wavelength_m * altitude_m / 2.0))


def flat_plate_power(eps, wavelength_m, altitude_m, tx_amplitude=1.0):
    """Far-field approximation of the coherent first-Fresnel-zone return of a flat plate.

    Integrating the facet sum over the first Fresnel zone gives
    ``|Gamma| * lambda / r`` in amplitude; used as an independent oracle for the
    facet simulator.
    """
    return tx_amplitude**2 * fresnel_power_reflectance(eps) * (wavelength_m / altitude_m) ** 2
