"""Shoebox-room mixture simulation with full ground truth.

A mixture bundle keeps every term of the additive model: per-source
direct-path signals, per-source reverberant images and the noise, so that
``mixture == image.sum(0) + noise`` holds sample for sample.
"""
from dataclasses import asdict, dataclass, field
import json
import math
from pathlib import Path

import numpy as np
from scipy import signal

from .kernels import axis_bounds, image_lattice, image_source_rir
from .wavio import read_wav, write_wav

__all__ = [
    "SPEED_OF_SOUND",
    "ArrayGeometry",
    "RoomScenario",
    "Rir",
    "MixtureBundle",
    "PROFILES",
    "eyring_reflection",
    "ism_reflection",
    "sabine_absorption",
    "simulate_rir",
    "direct_path_target",
    "synthesize_mixture",
    "sample_scenario",
    "perturb_geometry",
    "speech_like_source",
    "schroeder_t60",
    "save_bundle",
    "load_bundle",
]

SPEED_OF_SOUND = 343.0
WALL_MARGIN = 0.3
# positive-only image amplitudes pile up a low-frequency bias in the tail
RIR_HIGHPASS_HZ = 50.0


@dataclass
class ArrayGeometry:
    layout: str = "pure_circle"  # or "circle_plus_center"
    radius: float = 0.1
    num_mics: int = 6
    center: tuple = (0.0, 0.0, 0.0)
    offsets: np.ndarray | None = None  # per-mic displacement, set by perturb_geometry
    reference_index: int = 0

    def __post_init__(self):
        if self.layout not in ("pure_circle", "circle_plus_center"):
            raise ValueError(f"unknown array layout {self.layout!r}")
        if self.layout == "circle_plus_center" and self.num_mics < 3:
            raise ValueError("circle_plus_center needs at least 3 mics")
        self.center = tuple(float(v) for v in self.center)

    @property
    def num_circle(self):
        return self.num_mics - 1 if self.layout == "circle_plus_center" else self.num_mics

    @property
    def mic_positions(self):
        n = self.num_circle
        ang = 2.0 * np.pi * np.arange(n) / n
        pos = np.zeros((self.num_mics, 3))
        pos[:n, 0] = self.radius * np.cos(ang)
        pos[:n, 1] = self.radius * np.sin(ang)
        pos += np.asarray(self.center)
        if self.offsets is not None:
            pos = pos + self.offsets
        return pos

    def to_dict(self):
        d = asdict(self)
        d["offsets"] = None if self.offsets is None else self.offsets.tolist()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("offsets") is not None:
            d["offsets"] = np.asarray(d["offsets"], dtype=float)
        return cls(**d)


@dataclass
class RoomScenario:
    room_dims: tuple
    t60: float
    source_positions: np.ndarray
    speaker_gains_db: np.ndarray
    snr_db: float = 30.0
    noise_kind: str = "white"
    seed: int = 0
    sample_rate: int = 8000
    min_separation_deg: float = 10.0
    profile: str = "custom"

    def __post_init__(self):
        self.room_dims = tuple(float(v) for v in self.room_dims)
        self.source_positions = np.atleast_2d(np.asarray(self.source_positions, dtype=float))
        self.speaker_gains_db = np.atleast_1d(np.asarray(self.speaker_gains_db, dtype=float))
        if len(self.source_positions) < 1:
            raise ValueError("scenario needs at least one source")
        if len(self.speaker_gains_db) != len(self.source_positions):
            raise ValueError("one gain per source required")
        if self.noise_kind not in ("white", "filtered"):
            raise ValueError(f"unknown noise kind {self.noise_kind!r}")
        _check_inside(self.source_positions, self.room_dims, "source")

    @property
    def num_sources(self):
        return len(self.source_positions)

    def to_dict(self):
        d = asdict(self)
        d["source_positions"] = self.source_positions.tolist()
        d["speaker_gains_db"] = self.speaker_gains_db.tolist()
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class Rir:
    taps: np.ndarray  # (C, P, L)
    sample_rate: int
    direct_delay_samples: np.ndarray  # (C, P) int
    distances: np.ndarray  # (C, P)
    mic_positions: np.ndarray
    source_positions: np.ndarray
    room_dims: tuple
    max_order: int
    highpass_hz: float | None = None


@dataclass
class MixtureBundle:
    mixture: np.ndarray  # (P, N)
    direct: np.ndarray  # (C, P, N)
    image: np.ndarray  # (C, P, N)
    noise: np.ndarray  # (P, N)
    scenario: RoomScenario
    geometry: ArrayGeometry
    sample_rate: int
    meta: dict = field(default_factory=dict)

    @property
    def num_sources(self):
        return self.direct.shape[0]


def _check_inside(points, room, what):
    points = np.atleast_2d(points)
    room = np.asarray(room)
    if np.any(points <= 0) or np.any(points >= room):
        raise ValueError(f"{what} position outside the room {tuple(room)}")


def sabine_absorption(room_dims, t60, c=SPEED_OF_SOUND):
    Lx, Ly, Lz = room_dims
    V = Lx * Ly * Lz
    S = 2.0 * (Lx * Ly + Lx * Lz + Ly * Lz)
    return 24.0 * math.log(10.0) * V / (c * S * t60)


def eyring_reflection(room_dims, t60, c=SPEED_OF_SOUND):
    """Uniform wall reflection coefficient from Eyring's reverberation formula."""
    if sabine_absorption(room_dims, t60, c) > 1.0:
        raise ValueError(f"infeasible t60 {t60:.3f} s for room {tuple(room_dims)}")
    Lx, Ly, Lz = room_dims
    V = Lx * Ly * Lz
    S = 2.0 * (Lx * Ly + Lx * Lz + Ly * Lz)
    alpha = 1.0 - math.exp(-24.0 * math.log(10.0) * V / (c * S * t60))
    return math.sqrt(1.0 - alpha)


def ism_reflection(room_dims, t60, src, mic, fs, length, max_order, c=SPEED_OF_SOUND):
    """Wall reflection coefficient at which the image model itself decays in t60.

    Specular image sums decay more slowly than the diffuse-field formulas
    predict (grazing paths meet few walls), so Eyring's coefficient gives
    rooms that ring too long. The image set for one source/mic probe is
    enumerated once; its energy histogram is then re-weighted per candidate
    coefficient and bisected on the Schroeder T20 estimate.
    """
    eyring = eyring_reflection(room_dims, t60, c)
    room = np.asarray(room_dims, dtype=float)
    pos, refl = image_lattice(np.asarray(src, float), room, axis_bounds(length, room, fs, c), max_order)
    dist = np.linalg.norm(pos - np.asarray(mic, float), axis=1)
    idx = np.rint(dist / c * fs).astype(np.int64)
    ok = idx < length
    idx, refl, spread = idx[ok], refl[ok], 1.0 / dist[ok] ** 2

    def decay_time(beta):
        energy = np.bincount(idx, weights=spread * beta ** (2.0 * refl), minlength=length)
        return schroeder_t60_from_energy(energy, fs)

    lo, hi = 1e-3, min(0.99999, eyring ** 0.25)
    if decay_time(hi) < t60:
        return hi
    for _ in range(50):
        mid = 0.5 * (lo + hi)
        if decay_time(mid) < t60:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def max_reflection_order(room_dims, t60, c=SPEED_OF_SOUND):
    if t60 <= 0:
        return 0
    return int(math.ceil(t60 * c / min(room_dims))) + 1


def simulate_rir(scn, geom, c=SPEED_OF_SOUND, absorption="ism", backend=None):
    """Image-method RIRs for every (source, mic) pair of a scenario."""
    room = np.asarray(scn.room_dims)
    mics = geom.mic_positions
    _check_inside(mics, room, "microphone")
    fs = scn.sample_rate
    dist = np.linalg.norm(scn.source_positions[:, None, :] - mics[None], axis=-1)
    hw = 8
    max_delay = int(np.ceil(dist.max() / c * fs))
    if scn.t60 > 0:
        order = max_reflection_order(scn.room_dims, scn.t60, c)
        length = int(np.ceil(scn.t60 * fs)) + max_delay + 2 * hw
        if absorption == "eyring":
            beta = eyring_reflection(scn.room_dims, scn.t60, c)
        elif absorption == "ism":
            beta = ism_reflection(
                scn.room_dims, scn.t60, scn.source_positions[0], mics.mean(axis=0), fs, length, order, c
            )
        else:
            raise ValueError(f"unknown absorption model {absorption!r}")
    else:
        beta, order = 0.0, 0
        length = max_delay + 2 * hw
    taps = np.stack(
        [image_source_rir(mics, s, room, beta, fs, length, order, c=c, backend=backend) for s in scn.source_positions]
    )
    highpass = RIR_HIGHPASS_HZ if order > 0 else None
    taps = _highpass(taps, highpass, fs)
    return Rir(
        taps=taps,
        sample_rate=fs,
        direct_delay_samples=np.rint(dist / c * fs).astype(int),
        distances=dist,
        mic_positions=mics,
        source_positions=scn.source_positions.copy(),
        room_dims=scn.room_dims,
        max_order=order,
        highpass_hz=highpass,
    )


def _highpass(taps, cutoff, fs):
    if cutoff is None:
        return taps
    sos = signal.butter(2, cutoff, btype="high", fs=fs, output="sos")
    return signal.sosfilt(sos, taps, axis=-1)


def direct_path_target(rir, c=SPEED_OF_SOUND, backend=None):
    """Keep only the direct-path image of every RIR (same length, same taps)."""
    if rir.max_order == 0:
        return rir
    L = rir.taps.shape[-1]
    room = np.asarray(rir.room_dims)
    taps = np.stack(
        [
            image_source_rir(rir.mic_positions, s, room, 0.0, rir.sample_rate, L, 0, c=c, backend=backend)
            for s in rir.source_positions
        ]
    )
    taps = _highpass(taps, rir.highpass_hz, rir.sample_rate)
    return Rir(
        taps=taps,
        sample_rate=rir.sample_rate,
        direct_delay_samples=rir.direct_delay_samples,
        distances=rir.distances,
        mic_positions=rir.mic_positions,
        source_positions=rir.source_positions,
        room_dims=rir.room_dims,
        max_order=0,
        highpass_hz=rir.highpass_hz,
    )


def _noise(kind, shape, fs, rng):
    noise = rng.standard_normal(shape)
    if kind == "filtered":
        # air-conditioning stand-in: low-passed Gaussian noise
        sos = signal.butter(4, min(400.0, 0.45 * fs) / (fs / 2), output="sos")
        noise = signal.sosfilt(sos, noise, axis=-1)
    return noise


def synthesize_mixture(sources, scn, geom, rir=None, backend=None):
    """Convolve dry sources into the room and add noise at the requested SNR.

    Each source is scaled so that its direct-path signal at the reference mic
    has power ``10 ** (gain_db / 10)``. Noise is scaled against the summed
    direct-path (anechoic) mixture over all channels.
    """
    sources = np.atleast_2d(np.asarray(sources, dtype=float))
    C, N = sources.shape
    if C != scn.num_sources:
        raise ValueError(f"{C} dry sources for a {scn.num_sources}-source scenario")
    if rir is None:
        rir = simulate_rir(scn, geom, backend=backend)
    drir = direct_path_target(rir, backend=backend)
    q = geom.reference_index
    P = rir.taps.shape[1]
    direct = np.empty((C, P, N))
    image = np.empty((C, P, N))
    for ci in range(C):
        if not np.any(sources[ci]):
            raise ValueError(f"degenerate source {ci}: all-zero dry signal")
        d = signal.fftconvolve(sources[ci][None], drir.taps[ci], axes=-1)[:, :N]
        x = signal.fftconvolve(sources[ci][None], rir.taps[ci], axes=-1)[:, :N]
        power = np.mean(d[q] ** 2)
        if power == 0:
            raise ValueError(f"degenerate source {ci}: no direct-path energy in the mixture window")
        g = 10.0 ** (scn.speaker_gains_db[ci] / 20.0) / np.sqrt(power)
        direct[ci] = g * d
        image[ci] = g * x
    rng = np.random.default_rng([scn.seed, 1])
    noise = _noise(scn.noise_kind, (P, N), scn.sample_rate, rng)
    anechoic = direct.sum(axis=0)
    noise *= np.sqrt(np.sum(anechoic**2) / np.sum(noise**2) / 10.0 ** (scn.snr_db / 10.0))
    mixture = image.sum(axis=0) + noise
    return MixtureBundle(mixture, direct, image, noise, scn, geom, scn.sample_rate)


PROFILES = {
    "smswsj_like": dict(
        layout="pure_circle", num_mics=6, radius=0.10, sample_rate=8000,
        t60=(0.2, 0.5), distance=(1.0, 2.0), snr=(20.0, 30.0), gains=(-7.0, 7.0),
        noise_kind="white",
    ),
    "libricss_like": dict(
        layout="circle_plus_center", num_mics=7, radius=0.0425, sample_rate=16000,
        t60=(0.2, 0.6), distance=(0.75, 2.5), snr=(10.0, 30.0), gains=(-7.0, 7.0),
        noise_kind="filtered",
    ),
}
ROOM_RANGE = ((5.0, 5.0, 2.7), (9.0, 8.0, 3.5))


def _angle_gap(a, b):
    d = abs(a - b) % (2 * np.pi)
    return min(d, 2 * np.pi - d)


def sample_scenario(profile, rng, num_sources=2, sample_rate=None, min_separation_deg=10.0, seed=None):
    """Draw a room, array placement and speaker layout from a named profile.

    Returns ``(RoomScenario, ArrayGeometry)``; deterministic given ``rng``.
    """
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    if isinstance(rng, (int, np.integer)):
        seed = int(rng) if seed is None else seed
        rng = np.random.default_rng(rng)
    prof = PROFILES[profile]
    fs = sample_rate or prof["sample_rate"]
    while True:
        room = rng.uniform(*ROOM_RANGE)
        t60 = rng.uniform(*prof["t60"])
        if sabine_absorption(room, t60) > 1.0:
            continue
        center = np.array(
            [rng.uniform(WALL_MARGIN + 0.5, room[0] - WALL_MARGIN - 0.5),
             rng.uniform(WALL_MARGIN + 0.5, room[1] - WALL_MARGIN - 0.5),
             rng.uniform(1.0, 1.5)]
        )
        azimuths = []
        positions = []
        for _ in range(num_sources):
            for _attempt in range(100):
                az = rng.uniform(-np.pi, np.pi)
                dist = rng.uniform(*prof["distance"])
                height = rng.uniform(1.2, 1.8)
                pos = center + np.array([dist * np.cos(az), dist * np.sin(az), 0.0])
                pos[2] = height
                inside = np.all(pos > WALL_MARGIN) and np.all(pos < room - WALL_MARGIN)
                separated = all(_angle_gap(az, a) >= np.deg2rad(min_separation_deg) for a in azimuths)
                if inside and separated:
                    azimuths.append(az)
                    positions.append(pos)
                    break
            else:
                break
        if len(positions) == num_sources:
            break
    scn = RoomScenario(
        room_dims=tuple(room),
        t60=float(t60),
        source_positions=np.array(positions),
        speaker_gains_db=rng.uniform(*prof["gains"], size=num_sources),
        snr_db=float(rng.uniform(*prof["snr"])),
        noise_kind=prof["noise_kind"],
        seed=int(seed) if seed is not None else int(rng.integers(2**31)),
        sample_rate=int(fs),
        min_separation_deg=min_separation_deg,
        profile=profile,
    )
    geom = ArrayGeometry(prof["layout"], prof["radius"], prof["num_mics"], tuple(center))
    return scn, geom


def perturb_geometry(geom, sigma_mm, rng, room_dims=None):
    """Displace every mic coordinate by independent N(0, sigma_mm^2) millimetres."""
    if sigma_mm < 0:
        raise ValueError("sigma_mm must be non-negative")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    delta = rng.normal(0.0, sigma_mm * 1e-3, size=(geom.num_mics, 3)) if sigma_mm > 0 else np.zeros((geom.num_mics, 3))
    base = np.zeros((geom.num_mics, 3)) if geom.offsets is None else geom.offsets
    out = ArrayGeometry(geom.layout, geom.radius, geom.num_mics, geom.center, base + delta, geom.reference_index)
    if room_dims is not None:
        _check_inside(out.mic_positions, room_dims, "perturbed microphone")
    return out


def speech_like_source(num_samples, sample_rate, rng, active_ratio=0.8):
    """Dry test signal with syllable structure: voiced harmonic bursts with
    gliding pitch and random formants, unvoiced noise bursts, and pauses."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    fs = sample_rate
    out = np.zeros(num_samples)
    pos = int(rng.uniform(0, 0.1) * fs)
    while pos < num_samples:
        dur = int(rng.uniform(0.08, 0.3) * fs)
        seg = np.arange(min(dur, num_samples - pos))
        if len(seg) < 16:
            break
        t = seg / fs
        if rng.random() < 0.85:
            f0 = rng.uniform(90, 240) * (1 + rng.uniform(-0.2, 0.2) * t / t[-1])
            phase = 2 * np.pi * np.cumsum(f0) / fs
            formants = rng.uniform([300, 900, 2000], [900, 2200, 3400])
            burst = np.zeros(len(seg))
            for k in range(1, int(0.5 * fs / f0.max())):
                fk = k * f0.mean()
                env = sum(np.exp(-0.5 * ((fk - fm) / 120.0) ** 2) for fm in formants) + 0.05
                burst += env / k**0.5 * np.sin(k * phase + rng.uniform(0, 2 * np.pi))
        else:
            sos = signal.butter(2, [min(2000, 0.3 * fs), min(3800, 0.49 * fs)], btype="band", fs=fs, output="sos")
            burst = signal.sosfilt(sos, rng.standard_normal(len(seg))) * 3.0
        burst *= np.hanning(len(seg)) * rng.uniform(0.3, 1.0)
        out[pos : pos + len(seg)] += burst
        gap = rng.exponential((1 - active_ratio) / active_ratio * 0.18)
        pos += len(seg) + int(gap * fs)
    return out / (np.max(np.abs(out)) + 1e-12)


def schroeder_t60(rir, fs, start_db=-5.0, stop_db=-25.0):
    """Reverberation time from Schroeder backward integration (T20 fit by default)."""
    return schroeder_t60_from_energy(np.asarray(rir) ** 2, fs, start_db, stop_db)


def schroeder_t60_from_energy(energy, fs, start_db=-5.0, stop_db=-25.0):
    edc = np.cumsum(energy[::-1])[::-1]
    edc_db = 10 * np.log10(edc / edc[0] + 1e-300)
    i0 = np.argmax(edc_db <= start_db)
    i1 = np.argmax(edc_db <= stop_db)
    t = np.arange(i0, i1) / fs
    slope, _ = np.polyfit(t, edc_db[i0:i1], 1)
    return -60.0 / slope


def save_bundle(bundle, out_dir):
    """Write mixture.wav, direct_cN.wav, image_cN.wav, noise.wav and scenario.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fs = bundle.sample_rate
    write_wav(out / "mixture.wav", bundle.mixture, fs)
    for ci in range(bundle.num_sources):
        write_wav(out / f"direct_c{ci + 1}.wav", bundle.direct[ci], fs)
        write_wav(out / f"image_c{ci + 1}.wav", bundle.image[ci], fs)
    write_wav(out / "noise.wav", bundle.noise, fs)
    meta = {
        "scenario": bundle.scenario.to_dict(),
        "geometry": bundle.geometry.to_dict(),
        "sample_rate": fs,
        "num_sources": bundle.num_sources,
        **bundle.meta,
    }
    (out / "scenario.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return out


def load_bundle(bundle_dir):
    d = Path(bundle_dir)
    meta = json.loads((d / "scenario.json").read_text())
    mixture, fs = read_wav(d / "mixture.wav")
    C = meta["num_sources"]
    direct = np.stack([read_wav(d / f"direct_c{i + 1}.wav")[0] for i in range(C)])
    image = np.stack([read_wav(d / f"image_c{i + 1}.wav")[0] for i in range(C)])
    noise, _ = read_wav(d / "noise.wav")
    extra = {k: v for k, v in meta.items() if k not in ("scenario", "geometry", "sample_rate", "num_sources")}
    return MixtureBundle(
        mixture, direct, image, noise,
        RoomScenario.from_dict(meta["scenario"]),
        ArrayGeometry.from_dict(meta["geometry"]),
        fs, extra,
    )
