"""ISAR imaging chain: background subtraction, profile alignment, minimum
entropy autofocus, 2-D FFT image formation, and the point-spread model.

Image geometry (fftshift layout, ``pad`` = zero-pad factor):

* row ``i`` holds beat frequency ``(i - R//2) * f_s / (M*pad)``; because
  dechirp forms echo * conj(reference), range *decreases* with row index:
  ``range = gate_range - (i - R//2) * range_bin_m``.
* column ``j`` holds Doppler ``(j - A//2) / (N*pad)`` cycles/profile, which
  maps to cross-range ``x = -(j - A//2) * azimuth_bin_m``.
"""

from dataclasses import dataclass, replace

import numpy as np

from .errors import AlignmentError, ConfigError, NumericError, ShapeError
from .signal import SPEED_OF_SOUND, dechirp_columns, reference_chirp


@dataclass(frozen=True)
class ProfileMatrix:
    data: np.ndarray
    f_s: float
    k: float
    theta: float = 0.2
    wavelength: float = SPEED_OF_SOUND / 20_000.0
    v_s: float = SPEED_OF_SOUND
    chirp: object = None
    gate_range: float = 0.0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=complex)
        if data.ndim != 2 or data.shape[0] < 2 or data.shape[1] < 2:
            raise ShapeError(f"profile matrix must be at least 2x2, got {data.shape}")
        if not self.k > 0:
            raise ConfigError(f"chirp slope k must be > 0, got {self.k}")
        if not self.wavelength > 0:
            raise ConfigError(f"wavelength must be > 0, got {self.wavelength}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def M(self):
        return self.data.shape[0]

    @property
    def N(self):
        return self.data.shape[1]

    @property
    def T_c(self):
        return self.M / self.f_s

    def with_data(self, data):
        return replace(self, data=data)

    def metadata(self):
        return (self.f_s, self.k, self.theta, self.wavelength, self.v_s, self.gate_range)


@dataclass(frozen=True)
class AcousticImage:
    pixels: np.ndarray
    range_bin_m: float
    azimuth_bin: float = 1.0  # cycles per aperture per column (1/pad)
    azimuth_bin_m: float = float("nan")
    pad: int = 1
    gate_range: float = 0.0
    center: tuple = (0, 0)  # (row, col) of zero beat / zero Doppler, in this array's indices

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=float)
        if px.ndim != 2 or px.size == 0:
            raise ShapeError(f"image must be a non-empty 2-D array, got {px.shape}")
        if np.any(px < 0):
            raise ShapeError("image pixels must be >= 0")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "center", (int(self.center[0]), int(self.center[1])))

    @property
    def shape(self):
        return self.pixels.shape

    def with_pixels(self, pixels):
        return replace(self, pixels=pixels)

    def crop(self, r0, r1, c0=0, c1=None):
        c1 = self.shape[1] if c1 is None else c1
        r0, r1 = max(0, r0), min(self.shape[0], r1)
        c0, c1 = max(0, c0), min(self.shape[1], c1)
        return replace(self, pixels=self.pixels[r0:r1, c0:c1],
                       center=(self.center[0] - r0, self.center[1] - c0))

    def range_of_row(self, row):
        return self.gate_range - (np.asarray(row, dtype=float) - self.center[0]) * self.range_bin_m

    def row_of_range(self, rng):
        return self.center[0] - (np.asarray(rng, dtype=float) - self.gate_range) / self.range_bin_m

    def cross_of_col(self, col):
        return -(np.asarray(col, dtype=float) - self.center[1]) * self.azimuth_bin_m

    def col_of_cross(self, x):
        return self.center[1] - np.asarray(x, dtype=float) / self.azimuth_bin_m

    def pixel_to_scene(self, xy):
        """(col, row) pixel coordinates -> (cross-range, range) meters."""
        xy = np.asarray(xy, dtype=float)
        return np.stack([self.cross_of_col(xy[..., 0]), self.range_of_row(xy[..., 1])], axis=-1)

    def scene_to_pixel(self, xy):
        xy = np.asarray(xy, dtype=float)
        return np.stack([self.col_of_cross(xy[..., 0]), self.row_of_range(xy[..., 1])], axis=-1)


@dataclass(frozen=True)
class AlignmentResult:
    shifts: np.ndarray
    aligned: ProfileMatrix


@dataclass(frozen=True)
class FocusResult:
    phases: np.ndarray
    entropy_trace: np.ndarray
    focused: ProfileMatrix


def _same_geometry(a, b):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"profile matrices differ in shape: {a.data.shape} vs {b.data.shape}")
    if not np.allclose(a.metadata(), b.metadata(), rtol=1e-12, atol=0):
        raise ShapeError("profile matrices differ in metadata (f_s, k, theta, wavelength, v_s, gate)")


def subtract_background(m, bg):
    _same_geometry(m, bg)
    return m.with_data(m.data - bg.data)


def dechirp_matrix(m, reference=None):
    """Dechirp every column against the analytic transmit chirp."""
    if reference is None:
        if m.chirp is None:
            raise ConfigError("profile matrix carries no chirp config; pass a reference")
        reference = reference_chirp(m.chirp)
    return m.with_data(dechirp_columns(m.data, reference))


# -- alignment ---------------------------------------------------------------

def _parabolic(y, i):
    n = y.size
    a, b, c = y[(i - 1) % n], y[i], y[(i + 1) % n]
    den = a - 2 * b + c
    return 0.0 if den == 0 else 0.5 * (a - c) / den


def range_profiles(m, oversample=None):
    """Magnitude range profiles, oversampled so one bin is ~one sample of delay.

    Returns ``(profiles, bins_per_sample)``.

    A delay of d samples moves the dechirped tone by B*d/f_s FFT bins at
    length M, so zero-padding by f_s/B makes bins and samples coincide.
    The profile axis is ordered so that a later echo has a larger index.
    """
    if m.chirp is None:
        raise ConfigError("profile matrix carries no chirp config; cannot range-compress")
    P = oversample or max(1, int(round(m.f_s / (m.k * m.T_c))))
    ifm = dechirp_columns(m.data, reference_chirp(m.chirp))
    prof = np.abs(np.fft.fft(ifm, n=m.M * P, axis=0))
    # bin b holds beat +b; a delay d lands at beat -d, so reverse the axis
    return np.roll(prof[::-1], 1, axis=0), P * m.k * m.T_c / m.f_s


def _xcorr_shift(prof, ref, scale=1.0):
    """Delay of ``prof`` relative to ``ref`` from their circular correlation."""
    L = prof.size
    c = np.fft.ifft(np.fft.fft(prof) * np.conj(np.fft.fft(ref))).real
    i = int(np.argmax(c))
    lag = i if i < L // 2 else i - L
    return (lag + _parabolic(c, i)) / scale


def shift_columns(data, shifts):
    """Advance each column by ``shifts[n]`` samples (circular, sub-sample)."""
    M = data.shape[0]
    f = np.fft.fftfreq(M)
    ramp = np.exp(2j * np.pi * f[:, None] * np.asarray(shifts)[None, :])
    return np.fft.ifft(np.fft.fft(data, axis=0) * ramp, axis=0)


def align_profiles(m, reference="first", passes=2, fit=None):
    """Envelope-correlate each range profile with a reference, undo the delay.

    ``reference`` is ``"first"`` (column 0) or ``"mean"`` (mean of the
    aligned profiles, refined over ``passes`` passes).  Shifts are in
    samples of the echo columns; a positive shift means a later echo.

    A rotating extended target changes the shape of its profile from column
    to column, which makes single-column estimates jumpy.  ``fit="linear"``
    replaces them with a least-squares line (constant radial velocity) and
    leaves the residual to autofocus.  The fitted intercept is dropped so
    the result stays referenced to column 0.
    """
    if m.M < 4:
        raise ShapeError(f"alignment needs M >= 4, got {m.M}")
    if reference not in ("first", "mean"):
        raise ConfigError(f"alignment reference must be 'first' or 'mean', got {reference!r}")
    if fit not in (None, "none", "linear"):
        raise ConfigError(f"alignment fit must be None or 'linear', got {fit!r}")
    data = m.data
    for n in range(m.N):
        if not np.any(data[:, n]):
            raise AlignmentError(f"column {n} is all zero; cannot align")
    prof, bins_per_sample = range_profiles(m)
    ref = prof[:, 0]
    shifts = np.array([_xcorr_shift(prof[:, n], ref, bins_per_sample) for n in range(m.N)])
    if reference == "mean":
        for _ in range(passes):
            ref = range_profiles(m.with_data(shift_columns(data, shifts)))[0].mean(axis=1)
            shifts = np.array([_xcorr_shift(prof[:, n], ref, bins_per_sample) for n in range(m.N)])
            shifts -= shifts[0]
    if fit == "linear":
        # keep the slope only: column 0 stays the range reference
        n = np.arange(m.N)
        shifts = np.polyfit(n, shifts, 1)[0] * n
    if np.any(np.abs(shifts) >= m.M / 2):
        raise AlignmentError(f"shift estimate {np.max(np.abs(shifts)):.1f} samples exceeds M/2")
    return AlignmentResult(shifts=shifts, aligned=m.with_data(shift_columns(data, shifts)))


# -- image formation ---------------------------------------------------------

def image_spectrum(data, pad=1, window=None):
    """Complex 2-D spectrum (fftshifted), range FFT down columns then azimuth."""
    if pad < 1 or int(pad) != pad:
        raise ConfigError(f"pad must be an integer >= 1, got {pad}")
    pad = int(pad)
    M, N = data.shape
    if window == "hann":
        data = data * np.outer(np.hanning(M), np.hanning(N))
    elif window not in (None, "none"):
        raise ConfigError(f"unknown window {window!r}")
    spec = np.fft.fft(np.fft.fft(data, n=M * pad, axis=0), n=N * pad, axis=1)
    return np.fft.fftshift(spec)


def geometry(m, pad=1):
    """Range and cross-range bin sizes (meters) of an image of ``m``."""
    range_bin = m.v_s / (2 * m.k * m.T_c * pad)
    az_bin = m.wavelength * (m.N - 1) / (2 * m.theta * m.N * pad) if m.theta else float("nan")
    return range_bin, az_bin


def form_image(m, pad=1, window=None):
    spec = image_spectrum(m.data, pad, window)
    R, A = spec.shape
    range_bin, az_bin = geometry(m, pad)
    return AcousticImage(
        pixels=np.abs(spec), range_bin_m=range_bin, azimuth_bin=1.0 / pad, azimuth_bin_m=az_bin,
        pad=int(pad), gate_range=m.gate_range, center=(R // 2, A // 2))


def entropy(values):
    """Shannon entropy of |values|^2 normalised to a distribution."""
    p = np.abs(np.asarray(values)) ** 2
    total = p.sum()
    if not np.isfinite(total) or total <= 0:
        raise NumericError("image entropy undefined: zero or non-finite image energy")
    p = p / total
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


# -- minimum entropy autofocus -------------------------------------------------

_GOLD = (np.sqrt(5) - 1) / 2


def _entropy_batch(base, cross, phis, total):
    # |I_rest + C e^{-j phi}|^2 = base + 2 Re(cross e^{-j phi})
    e = np.exp(-1j * np.atleast_1d(phis))
    out = np.empty(e.size)
    for i, ei in enumerate(e):
        p = (base + 2 * (cross * ei).real) / total
        p = p[p > 0]
        out[i] = -(p * np.log(p)).sum()
    return out


def mea_autofocus(m, max_iters=50, tol=1e-6, rows=None, n_scan=16, xtol=1e-7):
    """Per-profile phase correction minimising image entropy.

    Cyclic coordinate descent: each sweep visits profiles 1..N-1 (profile 0
    is the phase gauge), scans ``n_scan`` trial phases, and refines the best
    bracket by golden-section search.  A move is kept only when it lowers the
    entropy, so the trace is non-increasing.  ``rows`` optionally restricts
    the entropy to a slice of range rows.
    """
    Y = np.fft.fftshift(np.fft.fft(m.data, axis=0), axes=0)
    if rows is not None:
        Y = Y[rows]
    R, N = Y.shape
    W = np.fft.fftshift(np.fft.fft(np.eye(N), axis=1), axes=1)  # row n: azimuth response of profile n
    phases = np.zeros(N)
    img = Y @ W
    total = float(np.sum(np.abs(img) ** 2))
    if not np.isfinite(total) or total <= 0:
        raise NumericError("autofocus: image energy is zero or non-finite")
    current = entropy(img)
    trace = [current]
    grid = np.linspace(-np.pi, np.pi, n_scan, endpoint=False)
    for _ in range(max_iters):
        for n in range(1, N):
            contrib = np.outer(Y[:, n], W[n])
            rest = img - np.exp(-1j * phases[n]) * contrib
            base = np.abs(rest) ** 2 + np.abs(contrib) ** 2
            cross = np.conj(rest) * contrib
            trial = phases[n] + grid
            vals = _entropy_batch(base, cross, trial, total)
            b = int(np.argmin(vals))
            step = grid[1] - grid[0]
            lo, hi = trial[b] - step, trial[b] + step
            x1, x2 = hi - _GOLD * (hi - lo), lo + _GOLD * (hi - lo)
            f1, f2 = _entropy_batch(base, cross, [x1, x2], total)
            while hi - lo > xtol:
                if f1 < f2:
                    hi, x2, f2 = x2, x1, f1
                    x1 = hi - _GOLD * (hi - lo)
                    f1 = _entropy_batch(base, cross, x1, total)[0]
                else:
                    lo, x1, f1 = x1, x2, f2
                    x2 = lo + _GOLD * (hi - lo)
                    f2 = _entropy_batch(base, cross, x2, total)[0]
            cand, fc = (x1, f1) if f1 < f2 else (x2, f2)
            if vals[b] < fc:
                cand, fc = trial[b], vals[b]
            if fc < current:
                phases[n] = np.angle(np.exp(1j * cand))
                img = rest + np.exp(-1j * phases[n]) * contrib
                current = fc
        img = (Y * np.exp(-1j * phases)[None, :]) @ W  # resync against drift
        trace.append(current)
        if abs(trace[-2] - trace[-1]) < tol:
            break
    trace = np.array(trace)
    focused = m.with_data(m.data * np.exp(-1j * phases)[None, :])
    return FocusResult(phases=phases, entropy_trace=trace, focused=focused)


def doppler_centroid(data):
    """Mean Doppler of an IF matrix in cycles per profile (pulse-pair estimate)."""
    data = np.asarray(data)
    lag1 = np.sum(np.conj(data[:, :-1]) * data[:, 1:])
    if lag1 == 0:
        return 0.0
    return float(np.angle(lag1) / (2 * np.pi))


def center_doppler(m):
    """Remove the linear phase ramp that puts the mean Doppler off zero.

    Entropy cannot see a linear phase ramp (it only shifts the image in
    azimuth), so after autofocus the cross-range origin is pinned by moving
    the energy-weighted Doppler centroid, i.e. the rotation centre, to zero.
    Returns ``(matrix, f0)``.
    """
    f0 = doppler_centroid(m.data)
    ramp = np.exp(-2j * np.pi * f0 * np.arange(m.N))
    return m.with_data(m.data * ramp[None, :]), f0


# -- point spread model ----------------------------------------------------------

def psf_predict(point, m, pad=1, A=1.0, T=None, shape=None):
    """Separable sinc envelope of an ideal point scatter on the image grid.

    ``T`` is the duration in the range-sinc argument; it defaults to the
    chirp duration ``T_c``.  Pass the full period to evaluate the other
    reading of the model.  Returns an :class:`AcousticImage` of |I|.
    """
    T = m.T_c if T is None else T
    range_bin, az_bin = geometry(m, pad)
    R, Az = shape or (m.M * pad, m.N * pad)
    img = AcousticImage(np.zeros((1, 1)), range_bin_m=range_bin, azimuth_bin=1.0 / pad,
                        azimuth_bin_m=az_bin, pad=pad, gate_range=m.gate_range, center=(R // 2, Az // 2))
    rr = img.range_of_row(np.arange(R))
    xx = img.cross_of_col(np.arange(Az))
    px, pr = point.position if hasattr(point, "position") else point
    s_r = np.sinc(2 * m.k * T / m.v_s * (rr - pr))
    s_a = np.sinc(2 * m.theta / m.wavelength * (xx - px))
    return img.with_pixels(A * np.abs(np.outer(s_r, s_a)))


def half_power_width(profile, peak):
    """-3 dB full width (in samples) of a magnitude profile around ``peak``."""
    y = np.asarray(profile, dtype=float)
    level = y[peak] / np.sqrt(2)

    def edge(direction):
        i = peak
        while 0 <= i + direction < y.size and y[i + direction] >= level:
            i += direction
        j = i + direction
        if not 0 <= j < y.size:
            return float(i)
        # linear interpolation between i (above) and j (below)
        return i + direction * (y[i] - level) / (y[i] - y[j])

    return edge(1) - edge(-1)


def process(m, background=None, align=True, autofocus=True, pad=1, window=None,
            max_iters=50, tol=1e-6, focus_rows=None, reference="first", fit=None,
            recenter=False):
    """Subtract -> align -> dechirp -> autofocus -> (recenter) -> form image.

    Returns ``(image, info)`` where info carries the intermediate results.
    ``focus_rows`` is a half-width in range bins around the gate used to
    restrict the autofocus entropy (None = all rows).
    """
    info = {}
    if background is not None:
        m = subtract_background(m, background)
    if align:
        res = align_profiles(m, reference=reference, fit=fit)
        info["shifts"] = res.shifts
        m = res.aligned
    m = dechirp_matrix(m)
    if autofocus:
        rows = None
        if focus_rows is not None:
            c = m.M // 2
            rows = slice(max(0, c - focus_rows), min(m.M, c + focus_rows + 1))
        foc = mea_autofocus(m, max_iters=max_iters, tol=tol, rows=rows)
        info["phases"] = foc.phases
        info["entropy_trace"] = foc.entropy_trace
        m = foc.focused
    if recenter:
        m, info["doppler_centroid"] = center_doppler(m)
    info["if_matrix"] = m
    return form_image(m, pad=pad, window=window), info
