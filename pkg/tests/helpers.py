"""Shared fixture builders for the test suite."""
from dataclasses import replace

import numpy as np

from mcsep.simulate import sample_scenario, speech_like_source, synthesize_mixture


def make_bundle(seed, profile="smswsj_like", duration=3.0, num_sources=2, t60=None, snr_db=None, sample_rate=None,
                min_separation_deg=10.0):
    rng = np.random.default_rng(seed)
    scn, geom = sample_scenario(profile, rng, num_sources=num_sources, sample_rate=sample_rate,
                                min_separation_deg=min_separation_deg, seed=seed)
    changes = {}
    if t60 is not None:
        changes["t60"] = t60
    if snr_db is not None:
        changes["snr_db"] = snr_db
    if changes:
        scn = replace(scn, **changes)
    fs = scn.sample_rate
    n = int(round(duration * fs))
    sources = [speech_like_source(n, fs, rng) for _ in range(num_sources)]
    return synthesize_mixture(sources, scn, geom)


def circle(P, radius):
    ang = 2 * np.pi * np.arange(P) / P
    return np.stack([radius * np.cos(ang), radius * np.sin(ang), np.zeros(P)], axis=1)


def plane_wave_steering(mics, azimuth, freqs, c=343.0):
    """(F, P) far-field array response relative to the first mic."""
    u = np.array([np.cos(azimuth), np.sin(azimuth), 0.0])
    tau = -(mics - mics[0]) @ u / c  # arrival delay of each mic relative to mic 0
    return np.exp(-2j * np.pi * np.asarray(freqs)[:, None] * tau[None, :])


def random_complex(rng, shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def random_psd(rng, P, rank=None, batch=()):
    rank = rank or P
    A = random_complex(rng, batch + (P, rank))
    return A @ np.conj(np.swapaxes(A, -1, -2))
