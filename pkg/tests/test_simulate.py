from dataclasses import replace

import numpy as np
import pytest

from mcsep.simulate import (
    ArrayGeometry, PROFILES, RoomScenario, eyring_reflection, load_bundle, max_reflection_order,
    perturb_geometry, sample_scenario, save_bundle, schroeder_t60, simulate_rir, speech_like_source,
    synthesize_mixture,
)
from helpers import make_bundle


def xcorr_lag(a, b, max_lag):
    """Lag (samples) by which b trails a, from the full cross-correlation."""
    full = np.correlate(b, a, mode="full")
    lags = np.arange(-len(a) + 1, len(b))
    keep = np.abs(lags) <= max_lag
    return lags[keep][np.argmax(full[keep])]


def test_geometry_layouts():
    g = ArrayGeometry("pure_circle", 0.1, 6, (1.0, 2.0, 1.2))
    pos = g.mic_positions
    np.testing.assert_allclose(np.linalg.norm(pos - [1.0, 2.0, 1.2], axis=1), 0.1)
    g7 = ArrayGeometry("circle_plus_center", 0.0425, 7, (1.0, 1.0, 1.0))
    np.testing.assert_allclose(g7.mic_positions[-1], [1.0, 1.0, 1.0])
    assert g7.num_circle == 6
    assert ArrayGeometry.from_dict(g7.to_dict()).mic_positions.tolist() == g7.mic_positions.tolist()


def test_profiles():
    scn, geom = sample_scenario("smswsj_like", 3)
    assert geom.num_mics == 6 and scn.sample_rate == 8000 and geom.layout == "pure_circle"
    lo, hi = PROFILES["smswsj_like"]["t60"]
    assert lo <= scn.t60 <= hi
    scn, geom = sample_scenario("libricss_like", 4)
    assert geom.num_mics == 7 and scn.sample_rate == 16000 and geom.layout == "circle_plus_center"
    with pytest.raises(ValueError, match="profile"):
        sample_scenario("nope", 0)


def test_min_separation():
    for seed in range(10):
        scn, geom = sample_scenario("smswsj_like", seed, num_sources=3, min_separation_deg=30)
        rel = scn.source_positions[:, :2] - np.asarray(geom.center)[:2]
        az = np.arctan2(rel[:, 1], rel[:, 0])
        for i in range(3):
            for j in range(i + 1, 3):
                gap = abs((az[i] - az[j] + np.pi) % (2 * np.pi) - np.pi)
                assert np.rad2deg(gap) >= 30 - 1e-9


def test_additivity_and_levels():
    b = make_bundle(0)
    np.testing.assert_allclose(b.mixture, b.image.sum(0) + b.noise, atol=1e-9)
    snr = 10 * np.log10(np.sum(b.direct.sum(0) ** 2) / np.sum(b.noise**2))
    assert snr == pytest.approx(b.scenario.snr_db, abs=1e-9)
    power = np.mean(b.direct[:, 0] ** 2, axis=1)
    np.testing.assert_allclose(10 * np.log10(power), b.scenario.speaker_gains_db, atol=1e-9)


def test_determinism():
    a, b = make_bundle(5, duration=1.0), make_bundle(5, duration=1.0)
    assert np.array_equal(a.mixture, b.mixture)


def test_anechoic_image_equals_direct():
    b = make_bundle(1, t60=0.0, duration=1.0)
    np.testing.assert_array_equal(b.image, b.direct)


@pytest.mark.parametrize("profile", ["smswsj_like", "libricss_like"])
def test_tdoa_matches_geometry(profile):
    b = make_bundle(11, profile=profile, duration=1.5, t60=0.0)
    fs = b.sample_rate
    mics = b.geometry.mic_positions
    for c in range(b.num_sources):
        dist = np.linalg.norm(b.scenario.source_positions[c] - mics, axis=1)
        for p in range(1, len(mics)):
            expect = (dist[p] - dist[0]) / 343.0 * fs
            lag = xcorr_lag(b.direct[c, 0], b.direct[c, p], 40)
            assert abs(lag - expect) <= 1.0


@pytest.mark.parametrize("t60", [0.2, 0.3, 0.45, 0.6])
def test_schroeder_t60(t60):
    for seed in range(3):
        scn, geom = sample_scenario("smswsj_like", 100 + seed)
        scn = replace(scn, t60=t60)
        rir = simulate_rir(scn, geom)
        est = np.mean([schroeder_t60(h, scn.sample_rate) for h in rir.taps[:, 0]])
        assert abs(est / t60 - 1) < 0.2


def test_schroeder_on_exponential_decay():
    fs, t60 = 8000, 0.4
    t = np.arange(int(fs * 1.0)) / fs
    rng = np.random.default_rng(0)
    h = rng.standard_normal(len(t)) * 10 ** (-3 * t / t60)
    assert schroeder_t60(h, fs) == pytest.approx(t60, rel=0.05)


def test_reflection_order_and_infeasible():
    assert max_reflection_order((5, 5, 3), 0.0) == 0
    assert max_reflection_order((5, 5, 3), 0.3) == int(np.ceil(0.3 * 343 / 3)) + 1
    with pytest.raises(ValueError, match="infeasible"):
        eyring_reflection((3.0, 3.0, 2.5), 0.01)


def test_scenario_validation():
    with pytest.raises(ValueError, match="source"):
        RoomScenario((5, 5, 3), 0.3, [[6.0, 1.0, 1.0]], [0.0])
    scn, geom = sample_scenario("smswsj_like", 0)
    with pytest.raises(ValueError, match="degenerate"):
        synthesize_mixture(np.zeros((2, 800)), scn, geom)


def test_perturbation_rms():
    geom = ArrayGeometry("pure_circle", 0.1, 6, (2.0, 2.0, 1.2))
    rng = np.random.default_rng(0)
    disp = []
    for _ in range(400):
        g = perturb_geometry(geom, 5.0, rng)
        disp.append(np.linalg.norm(g.mic_positions - geom.mic_positions, axis=1))
    rms_mm = np.sqrt(np.mean(np.square(disp))) * 1e3
    assert rms_mm == pytest.approx(5.0 * np.sqrt(3.0), rel=0.05)
    same = perturb_geometry(geom, 0.0, rng)
    np.testing.assert_array_equal(same.mic_positions, geom.mic_positions)


def test_speech_like_source():
    x = speech_like_source(16000, 8000, 0)
    assert np.max(np.abs(x)) == pytest.approx(1.0)
    frames = x[: 16000 // 160 * 160].reshape(-1, 160)
    # syllables and pauses: a sizable share of near-silent frames
    quiet = np.mean(np.sqrt(np.mean(frames**2, axis=1)) < 1e-3)
    assert 0.0 < quiet < 0.8


def test_bundle_round_trip(tmp_path):
    b = make_bundle(2, duration=0.5)
    save_bundle(b, tmp_path / "m")
    c = load_bundle(tmp_path / "m")
    np.testing.assert_allclose(c.mixture, b.mixture, atol=1e-6)
    np.testing.assert_allclose(c.direct, b.direct, atol=1e-6)
    assert c.scenario.t60 == b.scenario.t60
    np.testing.assert_allclose(c.geometry.mic_positions, b.geometry.mic_positions)
