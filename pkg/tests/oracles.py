"""Closed-form signals used as independent references by several test modules."""

import numpy as np
from scipy.optimize import minimize_scalar

from sonomesh.imaging import ProfileMatrix
from sonomesh.signal import ChirpConfig

SHORT = ChirpConfig(T_c=10e-3, T_e=20e-3)  # 960 samples: quicker alignment trials


def analytic_chirp_at(t, cfg):
    live = (t >= 0) & (t < cfg.T_c)
    return np.exp(2j * np.pi * (cfg.f_start * t + 0.5 * cfg.k * t ** 2)) * live


def delayed_matrix(delays, cfg=SHORT, base=200):
    """Closed-form echo columns of one point, column n delayed by base + delays[n] samples."""
    t = np.arange(cfg.M) / cfg.f_s
    cols = [analytic_chirp_at(t - (base + d) / cfg.f_s, cfg) for d in delays]
    return ProfileMatrix(np.column_stack(cols), f_s=cfg.f_s, k=cfg.k, chirp=cfg)


def if_scene(M=64, N=16, tones=((1.0, 10.3, 3.2), (0.8, -20.1, -5.7), (0.6, 25.0, 6.0))):
    """Dechirped IF data of point scatters: one 2-D complex exponential each."""
    m = np.arange(M)[:, None]
    n = np.arange(N)[None, :]
    d = sum(a * np.exp(2j * np.pi * (fr * m / M + fa * n / N)) for a, fr, fa in tones)
    return ProfileMatrix(d, f_s=96_000.0, k=4e6)


def fitted_delay(column, cfg, guess):
    """Delay maximising correlation with a closed-form chirp (independent of the simulator)."""
    u = np.arange(column.size) / cfg.f_s

    def cost(tau):
        return -abs(np.vdot(analytic_chirp_at(u - tau, cfg), column))

    res = minimize_scalar(cost, bounds=(guess - 3 / cfg.f_s, guess + 3 / cfg.f_s), method="bounded",
                          options={"xatol": 1e-10})
    return res.x
