import hashlib
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from rsnpe.physics import SPEED_OF_LIGHT, flat_plate_power, fresnel_power_reflectance, linear_to_db
from rsnpe.simulator import (
    RadarConfig,
    SimulationConfigError,
    TerrainParams,
    _seeds,
    facet_fields,
    galactic_noise,
    load_rangeline,
    noise_level,
    peak_power,
    save_rangeline,
    simulate_peak_power,
    simulate_rangeline,
)
from rsnpe.surface import SurfaceMesh, SurfaceSpec, synthesize_grf


@pytest.fixture(scope="module")
def desk():
    return RadarConfig.desk()


@pytest.fixture(scope="module")
def quiet(desk):
    return desk.noiseless()


def flat_mesh(cfg, z=0.0):
    n = cfg.grid_points()
    return SurfaceMesh(np.full((n, n), z), cfg.dx)


def test_default_config_derivations():
    cfg = RadarConfig()
    assert cfg.wavelength == pytest.approx(14.99, abs=0.01)
    assert cfg.dx == pytest.approx(cfg.wavelength / 10)
    assert cfg.footprint_radius == pytest.approx(np.sqrt(cfg.wavelength * 300e3 / 2))
    assert cfg.r_km == 300.0 and cfg.noise_alpha == 2.5


@pytest.mark.parametrize(
    "bad",
    [dict(dx_m=2.0), dict(footprint_radius_m=1e4), dict(n_s=8), dict(noise_alpha=0.0), dict(r_km=-1.0)],
)
def test_config_validation(bad):
    with pytest.raises(SimulationConfigError):
        RadarConfig.desk(**bad)


def test_config_hash_changes_with_fields(desk):
    assert desk.config_hash() == RadarConfig.desk().config_hash()
    assert desk.config_hash() != desk.noiseless().config_hash()


def test_flat_mesh_delays_equal_nadir_range(quiet):
    """Flat plate directly below the radar: every delay is within the Fresnel-zone spread of 2r/c."""
    amp, delay = facet_fields(flat_mesh(quiet), TerrainParams(4.0, 0, 0), quiet)
    r = quiet.altitude_m
    assert delay.min() == pytest.approx(2 * r / SPEED_OF_LIGHT, rel=1e-9)
    spread = 2 * (np.hypot(r, quiet.footprint_radius) - r) / SPEED_OF_LIGHT
    assert delay.max() - delay.min() <= spread * (1 + 1e-9)
    assert len(amp) == len(delay) > 4e4


def test_amplitude_ratio_follows_fresnel_coefficient(quiet):
    mesh = flat_mesh(quiet)
    a4, _ = facet_fields(mesh, TerrainParams(4.0, 0, 0), quiet)
    a9, _ = facet_fields(mesh, TerrainParams(9.0, 0, 0), quiet)
    np.testing.assert_allclose(np.abs(a4) / np.abs(a9), 2 / 3, rtol=1e-12)


def test_spreading_law_hand_computed(quiet):
    """Doubling the altitude over the same facets scales each amplitude by (h_near / h_far)**2."""
    far = RadarConfig.desk(r_km=2 * quiet.r_km, snr_db=None, footprint_radius_m=quiet.footprint_radius)
    mesh = flat_mesh(quiet)
    theta = TerrainParams(4.0, 0, 0)
    a_near, d_near = facet_fields(mesh, theta, quiet)
    a_far, d_far = facet_fields(mesh, theta, far)

    x, y = mesh.coordinates()
    rho2 = (x**2 + y**2)[x**2 + y**2 <= quiet.footprint_radius**2]
    h_near = np.sqrt(rho2 + quiet.altitude_m**2)
    h_far = np.sqrt(rho2 + far.altitude_m**2)
    np.testing.assert_allclose(np.abs(a_far) / np.abs(a_near), (h_near / h_far) ** 2, rtol=1e-12)
    np.testing.assert_allclose(d_far - d_near, 2 * (h_far - h_near) / SPEED_OF_LIGHT, rtol=1e-9)

    nadir = np.argmin(rho2)
    assert abs(a_far[nadir]) / abs(a_near[nadir]) == pytest.approx(0.25, rel=1e-12)
    assert abs(a_near[nadir]) == pytest.approx(quiet.dx**2 / (3 * quiet.altitude_m**2), rel=1e-12)


def test_empty_footprint_is_an_error(quiet):
    with pytest.raises(SimulationConfigError):
        facet_fields(SurfaceMesh(np.zeros((3, 3)), quiet.dx), TerrainParams(4.0, 0, 0), quiet)


def test_noise_zero_level_and_determinism():
    assert not galactic_noise(64, 1e-8, 2.5, 0.0, 1).any()
    a = galactic_noise(64, 1e-8, 2.5, 1.0, 1)
    assert np.array_equal(a, galactic_noise(64, 1e-8, 2.5, 1.0, 1))
    assert not np.array_equal(a, galactic_noise(64, 1e-8, 2.5, 1.0, 2))


def test_noise_power_matches_level():
    n = np.array([galactic_noise(256, 1e-8, 2.5, 3.0, s) for s in range(400)])
    assert np.mean(np.abs(n) ** 2) == pytest.approx(3.0, rel=0.1)
    assert abs(n.mean()) < 0.2


def test_noise_periodogram_slope():
    n_s, dt = 4096, 1 / 26.67e6
    spectra = np.array([np.abs(np.fft.fft(galactic_noise(n_s, dt, 2.5, 1.0, s))) ** 2 for s in range(100)])
    f = np.fft.fftfreq(n_s, dt)
    pos = f > 0
    logf = np.log10(np.where(pos, f, 1.0))
    mid = 0.5 * (logf[pos].min() + logf[pos].max())
    band = pos & (logf >= mid - 0.5) & (logf <= mid + 0.5)
    slope = np.polyfit(np.log10(f[band]), np.log10(spectra.mean(axis=0)[band]), 1)[0]
    assert slope == pytest.approx(-2.5, abs=0.3)


def test_flat_plate_single_bin_at_nadir_delay(quiet):
    rl = simulate_rangeline(TerrainParams(4.0, 0, 0), quiet, 0)
    power = np.abs(rl.samples) ** 2
    assert np.count_nonzero(power) == 1
    t_peak = rl.times[np.argmax(power)]
    assert abs(t_peak - 2 * quiet.altitude_m / SPEED_OF_LIGHT) <= rl.dt / 2


def test_flat_plate_matches_analytic_power(quiet):
    p = simulate_peak_power(TerrainParams(4.0, 0, 0), quiet, 0)
    oracle = flat_plate_power(4.0, quiet.wavelength, quiet.altitude_m)
    assert abs(linear_to_db(p / oracle)) < 0.5


def test_flat_plate_fresnel_ratio(quiet):
    p3 = simulate_peak_power(TerrainParams(3.0, 0, 0), quiet, 0)
    p8 = simulate_peak_power(TerrainParams(8.0, 0, 0), quiet, 0)
    assert abs(linear_to_db(p3 / p8) - linear_to_db(fresnel_power_reflectance(3) / fresnel_power_reflectance(8))) < 0.5


def test_flat_plate_monotone_in_eps(quiet):
    powers = [simulate_peak_power(TerrainParams(e, 0, 0), quiet, 0) for e in (2, 4, 8, 12)]
    assert all(a < b for a, b in zip(powers, powers[1:]))


def test_tx_amplitude_scales_power_quadratically(quiet):
    theta = TerrainParams(5.0, 1.0, 0.2)
    p1 = simulate_peak_power(theta, quiet, 3)
    p3 = simulate_peak_power(theta, replace(quiet, tx_amplitude=3.0), 3)
    assert p3 == pytest.approx(9 * p1, rel=1e-12)


def test_roughness_lowers_peak_power(desk):
    flat = np.mean([simulate_peak_power(TerrainParams(6.0, 0, 0), desk, s) for s in range(20)])
    rough = np.mean([simulate_peak_power(TerrainParams(6.0, 5.0, 0.2), desk, s) for s in range(20)])
    assert rough < flat


def test_energy_bound(quiet):
    theta = TerrainParams(5.0, 2.0, 0.3)
    rl = simulate_rangeline(theta, quiet, 11)
    mesh = synthesize_grf(SurfaceSpec(2.0, 0.3, quiet.dx, quiet.grid_points(), _seeds(11)[0]), clamp=True)
    amp, _ = facet_fields(mesh, theta, quiet)
    assert peak_power(rl) <= np.sum(np.abs(amp)) ** 2


def test_rangeline_determinism(desk):
    theta = TerrainParams(7.0, 1.5, 0.1)
    a = simulate_rangeline(theta, desk, 99)
    b = simulate_rangeline(theta, desk, 99)
    assert a.samples.tobytes() == b.samples.tobytes()
    assert not np.array_equal(a.samples, simulate_rangeline(theta, desk, 100).samples)


def test_window_too_short_is_a_configuration_error():
    cfg = RadarConfig.desk(n_s=16, f_s_mhz=200.0)
    with pytest.raises(SimulationConfigError):
        simulate_rangeline(TerrainParams(5.0, 5.0, 0.3), cfg, 0)


def test_noise_level_convention(desk):
    flat = flat_plate_power(3.1, desk.wavelength, desk.altitude_m)
    assert linear_to_db(flat / noise_level(desk)) == pytest.approx(30.0, abs=0.05)
    assert noise_level(desk.noiseless()) == 0.0


def test_peak_power_examples():
    assert peak_power(np.zeros(4, dtype=complex)) == 0.0
    assert peak_power(np.array([1j])) == 1.0
    assert peak_power(np.array([1 + 0j, 0, 3j])) == 9.0
    with pytest.raises(ValueError):
        peak_power(np.array([], dtype=complex))


def test_rangeline_dump_round_trip(tmp_path, desk):
    rl = simulate_rangeline(TerrainParams(3.0, 0.5, 0.1), desk, 5)
    save_rangeline(tmp_path / "rl", rl)
    back = load_rangeline(tmp_path / "rl")
    assert np.array_equal(back.samples, rl.samples)
    assert back.dt == rl.dt and back.t0 == rl.t0
    assert back.meta["cfg_hash"] == desk.config_hash() and back.meta["seed"] == 5
    digest = hashlib.sha256((tmp_path / "rl.bin").read_bytes()).hexdigest()
    save_rangeline(tmp_path / "rl2", simulate_rangeline(TerrainParams(3.0, 0.5, 0.1), desk, 5))
    assert hashlib.sha256((tmp_path / "rl2.bin").read_bytes()).hexdigest() == digest


def test_noisy_flat_plates_vary_with_seed(desk):
    p = [simulate_peak_power(TerrainParams(3.1, 0, 0), desk, s) for s in range(30)]
    assert np.std(p) > 0
    assert stats.describe(p).mean == pytest.approx(flat_plate_power(3.1, desk.wavelength, desk.altitude_m), rel=0.2)


def test_half_wavelength_shift_phase_geometry(quiet):
    """A lambda/2 rise leaves the CPA phase unchanged at nadir; off nadir the slant
    range changes by less than lambda/2, leaving the residual computed here."""
    mesh = flat_mesh(quiet)
    raised = flat_mesh(quiet, z=quiet.wavelength / 2)
    theta = TerrainParams(4.0, 0, 0)
    a, d = facet_fields(mesh, theta, quiet)
    b, e = facet_fields(raised, theta, quiet)

    x, y = mesh.coordinates()
    rho2 = (x**2 + y**2)[x**2 + y**2 <= quiet.footprint_radius**2]
    r = quiet.altitude_m
    dh = np.sqrt(rho2 + (r - quiet.wavelength / 2) ** 2) - np.sqrt(rho2 + r**2)
    expected = np.angle(np.exp(-2j * quiet.wavenumber * dh))
    np.testing.assert_allclose(np.angle(b / a), expected, atol=1e-9)
    assert abs(expected[np.argmin(rho2)]) < 1e-9
    np.testing.assert_allclose(e - d, 2 * dh / SPEED_OF_LIGHT, rtol=1e-6)
