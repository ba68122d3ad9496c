"""FMCW chirp synthesis, band-pass filtering, analytic signal, and dechirp.

Sweep convention: ``f_c`` is the sweep centre, so a chirp runs from
``f_c - B/2`` to ``f_c + B/2``.  With the defaults that is 18 kHz to 22 kHz.
"""

from dataclasses import dataclass

import numpy as np
from scipy import signal as sps

from .errors import ConfigError, DomainError, ShapeError

SPEED_OF_SOUND = 343.0  # m/s in air at 20 degC


@dataclass(frozen=True)
class ChirpConfig:
    f_c: float = 20_000.0
    B: float = 4_000.0
    T_c: float = 1e-3
    T_e: float = 5e-3
    f_s: float = 96_000.0
    amplitude: float = 1.0

    def __post_init__(self):
        for name in ("f_c", "B", "T_c", "T_e", "f_s", "amplitude"):
            value = getattr(self, name)
            if not np.isfinite(value):
                raise ConfigError(f"chirp.{name} must be finite, got {value}")
        if self.B < 0:
            raise ConfigError(f"chirp.B must be >= 0, got {self.B}")
        if not self.f_c - self.B / 2 > 0:
            raise ConfigError(f"chirp.f_c: sweep start f_c - B/2 must be > 0, got {self.f_c - self.B / 2}")
        if not self.f_s > 2 * (self.f_c + self.B / 2):
            raise ConfigError(
                f"chirp.f_s={self.f_s} violates Nyquist for a sweep ending at {self.f_c + self.B / 2} Hz")
        if not self.T_c > 0:
            raise ConfigError(f"chirp.T_c must be > 0, got {self.T_c}")
        if self.T_e < 0:
            raise ConfigError(f"chirp.T_e must be >= 0, got {self.T_e}")
        if round(self.T_c * self.f_s) < 1:
            raise ConfigError("chirp.T_c * chirp.f_s rounds to zero samples")

    @classmethod
    def from_start(cls, f_start, B, **kw):
        """Build from the sweep start frequency instead of the centre."""
        return cls(f_c=f_start + B / 2, B=B, **kw)

    @classmethod
    def imaging(cls):
        """Long-chirp preset used for body-scale scenes (see README)."""
        return cls(T_c=40e-3, T_e=20e-3)

    @property
    def f_start(self):
        return self.f_c - self.B / 2

    @property
    def f_stop(self):
        return self.f_c + self.B / 2

    @property
    def T(self):
        return self.T_c + self.T_e

    @property
    def k(self):
        return self.B / self.T_c

    @property
    def M(self):
        return int(round(self.T_c * self.f_s))

    def wavelength(self, v_s=SPEED_OF_SOUND):
        return v_s / self.f_c


@dataclass(frozen=True)
class SampleBuffer:
    samples: np.ndarray
    f_s: float

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=float)
        if x.ndim != 1 or x.size < 1:
            raise ShapeError("SampleBuffer needs a non-empty 1-D sequence")
        if not self.f_s > 0:
            raise ConfigError(f"f_s must be > 0, got {self.f_s}")
        x.setflags(write=False)
        object.__setattr__(self, "samples", x)

    def __len__(self):
        return self.samples.size


@dataclass(frozen=True)
class ComplexBuffer:
    samples: np.ndarray
    f_s: float

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=complex)
        if x.ndim != 1 or x.size < 1:
            raise ShapeError("ComplexBuffer needs a non-empty 1-D sequence")
        if not self.f_s > 0:
            raise ConfigError(f"f_s must be > 0, got {self.f_s}")
        x.setflags(write=False)
        object.__setattr__(self, "samples", x)

    def __len__(self):
        return self.samples.size


def rect_window(x):
    """1 on the closed support |x| <= 0.5, else 0 (works on arrays)."""
    x = np.asarray(x, dtype=float)
    out = (np.abs(x) <= 0.5).astype(float)
    return out if out.ndim else float(out)


def chirp_phase(t, cfg):
    """Phase in cycles of the transmitted chirp at time ``t`` after its start."""
    return cfg.f_start * t + 0.5 * cfg.k * t * t


def synth_chirp(cfg):
    t = np.arange(cfg.M) / cfg.f_s
    return SampleBuffer(cfg.amplitude * np.cos(2 * np.pi * chirp_phase(t, cfg)), cfg.f_s)


def chirp_train(cfg, n_periods=1):
    """Chirp followed by T_e of silence, repeated ``n_periods`` times."""
    period = np.zeros(int(round(cfg.T * cfg.f_s)))
    period[: cfg.M] = synth_chirp(cfg).samples
    return SampleBuffer(np.tile(period, n_periods), cfg.f_s)


_FIR_CACHE = {}


def bandpass_taps(lo, hi, f_s, transition=1_500.0, atten_db=60.0):
    """Linear-phase Kaiser FIR whose transition bands lie outside [lo, hi]."""
    key = (lo, hi, f_s, transition, atten_db)
    if key not in _FIR_CACHE:
        nyq = f_s / 2
        numtaps, beta = sps.kaiserord(atten_db, transition / nyq)
        numtaps |= 1  # odd length: integer group delay
        edges = [max(lo - transition / 2, 1.0), min(hi + transition / 2, nyq - 1.0)]
        taps = sps.firwin(numtaps, edges, window=("kaiser", beta), pass_zero=False, fs=f_s)
        taps.setflags(write=False)
        _FIR_CACHE[key] = taps
    return _FIR_CACHE[key]


def _fir_same(x, taps):
    # full convolution then slice out the group delay: linear phase, same length
    delay = (len(taps) - 1) // 2
    return sps.oaconvolve(x, taps)[delay: delay + x.size]


def bandpass(buf, lo, hi):
    """Band-pass a real buffer; output has the input length and no net delay."""
    if not 0 < lo < hi < buf.f_s / 2:
        raise ConfigError(f"band [{lo}, {hi}] Hz invalid for f_s={buf.f_s}")
    taps = bandpass_taps(lo, hi, buf.f_s)
    return SampleBuffer(_fir_same(buf.samples, taps), buf.f_s)


def bandpass_columns(x, lo, hi, f_s):
    """Band-pass every column of a real (M, N) array."""
    if not 0 < lo < hi < f_s / 2:
        raise ConfigError(f"band [{lo}, {hi}] Hz invalid for f_s={f_s}")
    taps = bandpass_taps(lo, hi, f_s)
    delay = (len(taps) - 1) // 2
    y = sps.oaconvolve(x, taps[:, None], axes=0)
    return y[delay: delay + x.shape[0]]


def analytic_array(x, axis=0):
    """Analytic signal along ``axis``: forward FFT, zero negative bins, inverse."""
    x = np.asarray(x, dtype=float)
    n = x.shape[axis]
    spec = np.fft.fft(x, axis=axis)
    h = np.zeros(n)
    h[0] = 1.0
    if n % 2 == 0:
        h[n // 2] = 1.0
        h[1: n // 2] = 2.0
    else:
        h[1: (n + 1) // 2] = 2.0
    shape = [1] * x.ndim
    shape[axis] = n
    return np.fft.ifft(spec * h.reshape(shape), axis=axis)


def analytic(buf):
    if len(buf) < 2:
        raise ShapeError("analytic signal needs at least 2 samples")
    return ComplexBuffer(analytic_array(buf.samples), buf.f_s)


def reference_chirp(cfg):
    """Analytic transmit chirp used as the dechirp reference."""
    return analytic(synth_chirp(cfg))


def dechirp(echo, reference):
    if len(echo) != len(reference):
        raise ShapeError(f"dechirp length mismatch: echo {len(echo)} vs reference {len(reference)}")
    if echo.f_s != reference.f_s:
        raise ShapeError(f"dechirp sample-rate mismatch: {echo.f_s} vs {reference.f_s}")
    return ComplexBuffer(echo.samples * np.conj(reference.samples), echo.f_s)


def dechirp_columns(echoes, reference):
    """Dechirp every column of an (M, N) echo matrix against one reference."""
    ref = np.asarray(reference.samples if isinstance(reference, ComplexBuffer) else reference)
    if echoes.shape[0] != ref.size:
        raise ShapeError(f"dechirp length mismatch: echo {echoes.shape[0]} vs reference {ref.size}")
    return echoes * np.conj(ref)[:, None]


def delay_to_distance(dt, v_s=SPEED_OF_SOUND):
    if dt < 0:
        raise DomainError(f"delay must be >= 0, got {dt}")
    if not v_s > 0:
        raise DomainError(f"v_s must be > 0, got {v_s}")
    return dt * v_s / 2


def distance_to_delay(d, v_s=SPEED_OF_SOUND):
    if d < 0:
        raise DomainError(f"distance must be >= 0, got {d}")
    if not v_s > 0:
        raise DomainError(f"v_s must be > 0, got {v_s}")
    return 2 * d / v_s


def beat_to_range_offset(f_beat, k, v_s=SPEED_OF_SOUND):
    """Range offset from the reference for an IF tone at ``f_beat`` Hz.

    ``dechirp`` forms echo * conj(reference), so an echo delayed by a
    positive Δτ lands at the negative frequency -k·Δτ.
    """
    return -f_beat / k * v_s / 2
