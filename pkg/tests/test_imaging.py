import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sonomesh.echosim import SceneConfig, ScatterPoint, TargetMotion, background_profile, simulate_echoes
from sonomesh.errors import AlignmentError, ConfigError, NumericError, ShapeError
from sonomesh.imaging import (
    AcousticImage, ProfileMatrix, align_profiles, center_doppler, dechirp_matrix, doppler_centroid,
    entropy, form_image, half_power_width, image_spectrum, mea_autofocus, process, psf_predict,
    shift_columns, subtract_background)
from sonomesh.signal import ChirpConfig

from oracles import delayed_matrix, if_scene

CHIRP = ChirpConfig.imaging()


def scene(target, **kw):
    kw.setdefault("n_profiles", 16)
    kw.setdefault("motion", TargetMotion(0.0, 0.2))
    return SceneConfig(target=tuple(target), chirp=CHIRP, **kw)


# -- types ---------------------------------------------------------------------------

def test_profile_matrix_invariants():
    with pytest.raises(ShapeError):
        ProfileMatrix(np.zeros((1, 4)), f_s=1.0, k=1.0)
    with pytest.raises(ConfigError):
        ProfileMatrix(np.zeros((4, 4)), f_s=1.0, k=0.0)
    with pytest.raises(ConfigError):
        ProfileMatrix(np.zeros((4, 4)), f_s=1.0, k=1.0, wavelength=-1.0)


def test_acoustic_image_rejects_negative_pixels():
    with pytest.raises(ShapeError):
        AcousticImage(-np.ones((2, 2)), range_bin_m=0.01)


# -- background ------------------------------------------------------------------------

def test_subtract_self_is_zero():
    m = if_scene()
    assert not np.any(subtract_background(m, m).data)


def test_subtract_background_recovers_target_and_kills_static_reflector():
    sc = scene([ScatterPoint((0.05, 1.5))], background=(ScatterPoint((0.4, 2.2), 3.0),
                                                          ScatterPoint((-0.6, 1.1), 1.0)))
    full = simulate_echoes(sc)
    bg = background_profile(sc)
    target = simulate_echoes(sc.replace(background=()))
    diff = subtract_background(full, bg)
    np.testing.assert_allclose(diff.data, target.data, atol=1e-9 * np.abs(full.data).max())
    residual = np.sum(np.abs(diff.data - target.data) ** 2) / np.sum(np.abs(bg.data) ** 2)
    assert 10 * np.log10(residual + 1e-300) <= -60


def test_subtract_background_shape_mismatch():
    with pytest.raises(ShapeError):
        subtract_background(if_scene(N=16), if_scene(N=8))


# -- alignment ---------------------------------------------------------------------------

def test_static_target_shifts_zero():
    res = align_profiles(delayed_matrix(np.zeros(6)))
    np.testing.assert_allclose(res.shifts, 0.0, atol=0.05)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_injected_delays_recovered(seed):
    d = np.random.default_rng(seed).uniform(-20, 20, 8)
    res = align_profiles(delayed_matrix(d))
    np.testing.assert_allclose(res.shifts, d - d[0], atol=0.25)


def test_aligned_columns_share_a_range_peak():
    from sonomesh.imaging import range_profiles

    d = np.array([0.0, 3.3, -7.6, 12.25])
    before, _ = range_profiles(delayed_matrix(d))
    after, _ = range_profiles(align_profiles(delayed_matrix(d)).aligned)
    assert len(set(np.argmax(before, axis=0))) == 4
    peaks = np.argmax(after, axis=0)
    assert np.ptp(peaks) <= 1


def test_radial_velocity_gives_linear_shifts():
    v = 0.05
    sc = scene([ScatterPoint((0.0, 1.5))], motion=TargetMotion(v, 0.0))
    res = align_profiles(simulate_echoes(sc))
    slope = np.polyfit(np.arange(sc.n_profiles), res.shifts, 1)[0]
    expected = 2 * v * CHIRP.T * CHIRP.f_s / sc.v_s
    assert slope == pytest.approx(expected, rel=0.05)


def test_zero_column_named_in_alignment_error():
    m = delayed_matrix(np.zeros(4))
    data = np.array(m.data)
    data[:, 2] = 0
    with pytest.raises(AlignmentError, match="column 2"):
        align_profiles(m.with_data(data))


def test_alignment_options_validated():
    m = delayed_matrix(np.zeros(3))
    with pytest.raises(ConfigError):
        align_profiles(m, reference="median")
    with pytest.raises(ConfigError):
        align_profiles(m, fit="cubic")


def test_linear_fit_keeps_slope_only():
    d = 1.5 * np.arange(8) + 4.0
    res = align_profiles(delayed_matrix(d), fit="linear")
    np.testing.assert_allclose(res.shifts, 1.5 * np.arange(8), atol=0.1)


def test_shift_columns_integer_shift_is_a_roll():
    x = np.random.default_rng(0).standard_normal((32, 2)) + 0j
    y = shift_columns(x, [3.0, -2.0])
    np.testing.assert_allclose(y[:, 0], np.roll(x[:, 0], -3), atol=1e-12)
    np.testing.assert_allclose(y[:, 1], np.roll(x[:, 1], 2), atol=1e-12)


# -- entropy and autofocus -----------------------------------------------------------------

def test_entropy_extremes():
    single = np.zeros((5, 7))
    single[2, 3] = 4.0
    assert entropy(single) == 0.0
    assert entropy(np.ones((5, 7))) == pytest.approx(np.log(35))
    with pytest.raises(NumericError):
        entropy(np.zeros((3, 3)))


def test_focused_matrix_is_a_fixed_point():
    m = if_scene(tones=((1.0, 10.0, 3.0), (0.5, -7.0, 5.0)))
    res = mea_autofocus(m, max_iters=1, tol=1e-6)
    assert res.entropy_trace[0] - res.entropy_trace[-1] < 1e-6
    np.testing.assert_allclose(np.angle(np.exp(1j * res.phases)), 0.0, atol=1e-3)


@settings(max_examples=5, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_autofocus_recovers_random_phase_errors(seed):
    m = if_scene()
    clean = form_image(m)
    ph = np.random.default_rng(seed).uniform(-np.pi, np.pi, m.N)
    res = mea_autofocus(m.with_data(m.data * np.exp(1j * ph)[None, :]))
    img = form_image(res.focused)
    assert img.pixels.max() >= 0.9 * clean.pixels.max()
    assert entropy(img.pixels) <= entropy(clean.pixels) + 0.05
    assert np.all(np.diff(res.entropy_trace) <= 1e-12)
    assert res.phases[0] == 0.0


def test_autofocus_all_zero_is_numeric_error():
    with pytest.raises(NumericError):
        mea_autofocus(ProfileMatrix(np.zeros((8, 4)), f_s=1.0, k=1.0))


@settings(max_examples=20, deadline=None)
@given(st.floats(-np.pi, np.pi))
def test_global_phase_gauge(phi):
    m = if_scene()
    a = form_image(m).pixels
    b = form_image(m.with_data(m.data * np.exp(1j * phi))).pixels
    np.testing.assert_allclose(a, b, atol=1e-9 * a.max())


# -- image formation -------------------------------------------------------------------

def test_zero_matrix_zero_image():
    img = form_image(ProfileMatrix(np.zeros((8, 4)), f_s=1.0, k=1.0))
    assert not np.any(img.pixels)


def test_pad_validation():
    with pytest.raises(ConfigError):
        form_image(if_scene(), pad=0)
    with pytest.raises(ConfigError):
        image_spectrum(if_scene().data, window="kaiser")


def test_image_shape_and_geometry():
    m = if_scene(M=32, N=8)
    img = form_image(m, pad=4)
    assert img.shape == (128, 32)
    assert img.range_bin_m == pytest.approx(m.v_s / (2 * m.k * m.T_c * 4))
    assert img.azimuth_bin == 0.25


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 3))
def test_parseval_and_homogeneity(seed, pad):
    rng = np.random.default_rng(seed)
    d = rng.standard_normal((16, 8)) + 1j * rng.standard_normal((16, 8))
    m = ProfileMatrix(d, f_s=1.0, k=1.0)
    img = form_image(m, pad=pad)
    # an unnormalised DFT of length L scales energy by L in each axis
    scale = (16 * pad) * (8 * pad)
    assert np.sum(img.pixels ** 2) == pytest.approx(scale * np.sum(np.abs(d) ** 2), rel=1e-9)
    np.testing.assert_array_equal(form_image(m.with_data(2 * d), pad=pad).pixels, 2 * img.pixels)


def test_static_scatter_peak_where_psf_predicts():
    sc = scene([ScatterPoint((0.0, 1.6))], motion=TargetMotion(0.0, 0.2))
    img, info = process(simulate_echoes(sc), align=False, autofocus=False)
    peak = np.unravel_index(np.argmax(img.pixels), img.shape)
    pred = psf_predict(ScatterPoint((0.0, 1.6)), info["if_matrix"])
    ppk = np.unravel_index(np.argmax(pred.pixels), pred.shape)
    assert abs(peak[0] - ppk[0]) <= 1 and abs(peak[1] - ppk[1]) <= 1


def test_two_scatters_in_azimuth_share_a_row():
    # silent third scatter keeps the rotation centre between the two
    pts = [ScatterPoint((-0.15, 1.5)), ScatterPoint((0.15, 1.5)), ScatterPoint((0.0, 1.5), 0.0)]
    sc = scene(pts, n_profiles=32)
    img, info = process(simulate_echoes(sc), align=False, autofocus=False)
    px = img.pixels
    row = int(np.argmax(px.max(axis=1)))
    line = px[row]
    peaks = np.sort(np.argsort(line)[-2:])
    # same range row: both peaks stand far above the rest of the row
    assert line[peaks].min() > 0.5 * line.max()
    expected = [img.col_of_cross(0.15), img.col_of_cross(-0.15)]
    np.testing.assert_allclose(peaks, expected, atol=1.0)
    sep_bins = 0.30 / img.azimuth_bin_m
    assert abs(abs(peaks[1] - peaks[0]) - sep_bins) <= 1.0


# -- PSF model ----------------------------------------------------------------------------

def test_psf_peak_and_first_nulls():
    m = if_scene(M=128, N=32)
    m = ProfileMatrix(m.data, f_s=96_000.0, k=4e6, theta=0.2, wavelength=0.01715, gate_range=1.5)
    p = (0.0, 1.5)
    psf = psf_predict(p, m, A=2.5, pad=8)
    assert psf.pixels.max() == pytest.approx(2.5)
    T = m.T_c
    # evaluate the model exactly at the first null offsets
    null_r = m.v_s / (2 * m.k * T)
    null_a = m.wavelength / (2 * m.theta)
    one = psf_predict((0.0, 1.5 + null_r), m, shape=psf.shape, pad=8)
    assert one.pixels[psf.center[0], psf.center[1]] == pytest.approx(0.0, abs=1e-12)
    two = psf_predict((null_a, 1.5), m, shape=psf.shape, pad=8)
    assert two.pixels[psf.center[0], psf.center[1]] == pytest.approx(0.0, abs=1e-12)


def test_psf_period_reading_changes_range_width():
    m = ProfileMatrix(if_scene(M=128, N=32).data, f_s=96_000.0, k=4e6, gate_range=1.5)
    a = psf_predict((0.0, 1.5), m, pad=8)
    b = psf_predict((0.0, 1.5), m, pad=8, T=3 * m.T_c)
    c = a.center
    wa = half_power_width(a.pixels[:, c[1]], c[0])
    wb = half_power_width(b.pixels[:, c[1]], c[0])
    assert wb == pytest.approx(wa / 3, rel=0.05)


def test_half_power_width_of_sampled_sinc():
    x = np.linspace(-4, 4, 8001)
    y = np.abs(np.sinc(x))
    w = half_power_width(y, 4000) * (x[1] - x[0])
    assert w == pytest.approx(0.8859, abs=1e-3)


# -- doppler recentering ----------------------------------------------------------------------

@settings(max_examples=20, deadline=None)
@given(st.floats(-0.4, 0.4))
def test_doppler_centroid_of_a_tone(f0):
    n = np.arange(32)
    data = np.ones((4, 1)) * np.exp(2j * np.pi * f0 * n)[None, :]
    assert doppler_centroid(data) == pytest.approx(f0, abs=1e-12)
    m = ProfileMatrix(data, f_s=1.0, k=1.0)
    centred, est = center_doppler(m)
    assert abs(doppler_centroid(centred.data)) < 1e-12


def test_process_runs_every_stage():
    sc = scene([ScatterPoint((0.05, 1.55)), ScatterPoint((-0.1, 1.45))],
               background=(ScatterPoint((0.5, 2.0)),), motion=TargetMotion(0.03, 0.2))
    img, info = process(simulate_echoes(sc), background_profile(sc), pad=2, max_iters=3,
                        reference="mean", fit="linear", recenter=True)
    assert img.shape == (CHIRP.M * 2, 32)
    assert {"shifts", "phases", "entropy_trace", "doppler_centroid", "if_matrix"} <= set(info)
    assert np.all(np.diff(info["entropy_trace"]) <= 1e-12)
    dm = dechirp_matrix(simulate_echoes(sc))
    assert dm.data.shape == (CHIRP.M, 16)
