"""Two-stage separation systems: stage-1 separation at every microphone,
cross-microphone alignment, MVDR, and a post-filter on the reference mic.

Topology names follow the ``<stage1>[_BF][_<stage2>]`` convention:

=================  =========  ====  ====================================
topology           stage 1    BF    stage 2 planes
=================  =========  ====  ====================================
SISO1              1 mic      no    -
SISO1_BF           1 mic      yes   -
SISO1_BF_SISO2     1 mic      yes   Y_q, BF(1..C), S1(1..C)    (joint)
MISO1              all mics   no    -
MISO1_BF           all mics   yes   -
MISO1_BF_MISO2     all mics   yes   Y..., BF(1..C), S1(1..C)   (joint)
MISO1_BF_MISO3     all mics   yes   Y..., BF(c), S1(c)         (per speaker)
MISO1_MISO4        all mics   no    Y..., S1(1..C)             (joint)
MISO1_MISO5        all mics   no    Y..., S1(c)                (per speaker)
=================  =========  ====  ====================================

``|Y_q|`` is appended as a last plane when the magnitude feature is enabled.
"""
from dataclasses import dataclass, field, replace
import itertools
import json
from pathlib import Path

import numpy as np

from .beamform import (
    TvMvdrConfig,
    apply_beamformer,
    covariance_from_estimates,
    covariance_from_mask,
    mvdr_weights,
    steering_vector,
    tv_mvdr_weights,
)
from .separator import (
    LinearSeparatorModel,
    NoisyOracleSeparator,
    OracleSeparator,
    SeparatorContext,
    SourceEstimates,
    apply_separator,
)
from .spectral import StftConfig, Waveform, denormalize, istft, normalize_variance, stft

__all__ = [
    "TOPOLOGIES",
    "PipelineConfig",
    "PipelineResult",
    "AlignedEstimates",
    "circular_orders",
    "plane_layout",
    "align_sources",
    "run_pipeline",
    "build_separator",
    "config_from_dict",
    "load_pipeline_config",
]

TOPOLOGIES = {
    "SISO1": ("siso", False, None, True),
    "SISO1_BF": ("siso", True, None, True),
    "SISO1_BF_SISO2": ("siso", True, "joint", True),
    "MISO1": ("miso", False, None, True),
    "MISO1_BF": ("miso", True, None, True),
    "MISO1_BF_MISO2": ("miso", True, "joint", True),
    "MISO1_BF_MISO3": ("miso", True, "per_speaker", True),
    "MISO1_MISO4": ("miso", False, "joint", False),
    "MISO1_MISO5": ("miso", False, "per_speaker", False),
}


@dataclass(frozen=True)
class PipelineConfig:
    topology: str = "MISO1_BF_MISO3"
    num_speakers: int = 2
    layout: str = "pure_circle"
    stage1: object = None
    stage2: object = None
    include_magnitude_feature: bool = False
    tv_mvdr: TvMvdrConfig | None = None
    covariance: str = "estimates"  # or "mask": stage 1 at the reference mic only
    align_metric: str = "l1"
    debug: bool = False
    stft: StftConfig | None = None

    def __post_init__(self):
        if self.topology not in TOPOLOGIES:
            raise ValueError(f"unknown topology {self.topology!r}; valid: {', '.join(TOPOLOGIES)}")
        if self.covariance not in ("estimates", "mask"):
            raise ValueError(f"unknown covariance mode {self.covariance!r}")
        if self.align_metric not in ("l1", "l2"):
            raise ValueError(f"unknown alignment metric {self.align_metric!r}")
        if self.layout not in ("pure_circle", "circle_plus_center"):
            raise ValueError(f"unknown layout {self.layout!r}")
        if self.stage1 is None:
            raise ValueError(f"topology {self.topology} needs a separator bound to stage 'stage1'")
        if self.has_stage2 and self.stage2 is None:
            raise ValueError(f"topology {self.topology} needs a separator bound to stage 'stage2'")

    @property
    def input_kind(self):
        return TOPOLOGIES[self.topology][0]

    @property
    def has_bf(self):
        return TOPOLOGIES[self.topology][1]

    @property
    def stage2_mode(self):
        return TOPOLOGIES[self.topology][2]

    @property
    def has_stage2(self):
        return self.stage2_mode is not None

    @property
    def stage2_uses_bf(self):
        return TOPOLOGIES[self.topology][3]


@dataclass
class AlignedEstimates:
    estimates: np.ndarray  # (C, P', T, F), speaker index consistent across mics
    mics: list
    permutations: list


@dataclass
class PipelineResult:
    estimates: SourceEstimates
    waveforms: np.ndarray  # (C, N)
    sample_rate: int
    intermediates: dict = field(default_factory=dict)


def circular_orders(P, layout="pure_circle"):
    """Input channel orderings that put each mic first (0-based indices).

    For ``circle_plus_center`` only the P-1 circle mics rotate and the
    centre mic (index P-1) stays last.
    """
    if P < 2:
        raise ValueError("circular shifting needs P >= 2")
    if layout == "pure_circle":
        return [[(p + k) % P for k in range(P)] for p in range(P)]
    if layout == "circle_plus_center":
        n = P - 1
        return [[(p + k) % n for k in range(n)] + [P - 1] for p in range(n)]
    raise ValueError(f"unknown layout {layout!r}")


def plane_layout(cfg, P, stage, order=None, speaker=None):
    """Labels of the input planes, in contractual order (1-based names)."""
    C = cfg.num_speakers
    if order is None:
        order = list(range(P))
    if stage == 1:
        mics = [order[0]] if cfg.input_kind == "siso" else order
        names = [f"Y{m + 1}" for m in mics]
    else:
        mics = [0] if cfg.input_kind == "siso" else list(range(P))
        names = [f"Y{m + 1}" for m in mics]
        spk = range(C) if speaker is None else [speaker]
        if cfg.stage2_uses_bf:
            names += [f"BF{c + 1}" for c in spk]
        names += [f"S1_{c + 1}" for c in spk]
    if cfg.include_magnitude_feature:
        names.append(f"|Y{order[0] + 1 if stage == 1 else 1}|")
    return tuple(names)


def _distance(a, b, metric):
    d = np.abs(a) - np.abs(b)
    return np.sum(np.abs(d)) if metric == "l1" else np.sqrt(np.sum(d * d))


def align_permutation(est, ref, metric="l1"):
    """perm minimizing sum_c dist(|est[perm[c]]|, |ref[c]|); lexicographic ties."""
    C = len(ref)
    dist = np.array([[_distance(e, r, metric) for r in ref] for e in est])
    best, best_perm = np.inf, None
    for perm in itertools.permutations(range(C)):
        total = sum(dist[perm[c], c] for c in range(C))
        if total < best:
            best, best_perm = total, perm
    return best_perm


def align_sources(per_mic_est, q=0, metric="l1", mics=None):
    """Re-order each mic's outputs to match the speaker order at mic ``q``.

    Args:
        per_mic_est: list of (C, T, F) arrays (or SourceEstimates), one per mic
        q: position of the reference mic in the list
    """
    arrs = [e.data if isinstance(e, SourceEstimates) else np.asarray(e) for e in per_mic_est]
    shapes = {a.shape for a in arrs}
    if len(shapes) != 1:
        raise ValueError(f"inconsistent estimate shapes across mics: {shapes}")
    ref = arrs[q]
    perms, out = [], []
    for i, a in enumerate(arrs):
        perm = tuple(range(len(ref))) if i == q else align_permutation(a, ref, metric)
        perms.append(perm)
        out.append(a[list(perm)])
    return AlignedEstimates(np.stack(out, axis=1), list(mics) if mics is not None else list(range(len(arrs))), perms)


def _tail_padding(N, stft_cfg):
    if N <= stft_cfg.window:
        return stft_cfg.window - N
    return (-(N - stft_cfg.window)) % stft_cfg.shift


def _with_magnitude(planes, ref_plane, cfg):
    if not cfg.include_magnitude_feature:
        return planes
    return np.concatenate([planes, np.abs(ref_plane)[None] + 0j])


def run_pipeline(mix, cfg, references=None, normalize=True, sample_rate=None):
    """Run one topology on a multichannel mixture.

    Args:
        mix: Waveform or (P, N) array
        references: optional (C, P, N) direct-path signals for oracle stages
        normalize: scale the mixture to unit variance first (undone at the end)
    """
    if isinstance(mix, Waveform):
        x, fs = mix.samples, mix.sample_rate
    else:
        x, fs = np.atleast_2d(np.asarray(mix, dtype=float)), sample_rate
    stft_cfg = cfg.stft or StftConfig(fs or 16000)
    fs = stft_cfg.sample_rate
    P, N = x.shape
    if cfg.layout == "circle_plus_center" and P < 3:
        raise ValueError("circle_plus_center needs at least 3 channels")
    trace = None
    if normalize:
        x, trace = normalize_variance(x)
    # zero-pad so the trailing partial frame is analysed too
    pad = _tail_padding(N, stft_cfg)
    Y = stft(np.pad(x, ((0, 0), (0, pad))), stft_cfg)
    truth = None
    if references is not None:
        refs = np.asarray(references, dtype=float)
        if trace is not None:
            refs = refs * trace.scale
        truth = np.stack([stft(np.pad(r, ((0, 0), (0, pad))), stft_cfg) for r in refs])
    inter = {}

    def ctx(ref_mic, layout, speaker=None):
        return SeparatorContext(ref_mic=ref_mic, speaker=speaker, layout=layout, truth=truth, stft_cfg=stft_cfg)

    # stage 1 ------------------------------------------------------------
    need_all = cfg.has_bf and cfg.covariance == "estimates"
    if cfg.input_kind == "siso":
        orders = [[p] + [m for m in range(P) if m != p] for p in range(P)]
    else:
        orders = circular_orders(P, cfg.layout)
    if not need_all:
        orders = orders[:1]
    per_mic = []
    for order in orders:
        layout = plane_layout(cfg, P, 1, order)
        if cfg.input_kind == "siso":
            planes = Y[order[:1]]
        else:
            planes = Y[order]
        planes = _with_magnitude(planes, Y[order[0]], cfg)
        per_mic.append(apply_separator(cfg.stage1, planes, ctx(order[0], layout), stage=1).data)
    mics = [o[0] for o in orders]
    aligned = align_sources(per_mic, 0, cfg.align_metric, mics)
    s1_ref = aligned.estimates[:, 0]
    if cfg.debug:
        inter.update(stage1=per_mic, aligned=aligned)
    final = s1_ref

    # beamforming ----------------------------------------------------------
    bf = None
    if cfg.has_bf:
        if cfg.covariance == "estimates":
            Ysub = Y[mics]
            cov = covariance_from_estimates(aligned.estimates, Ysub)
            phi_s, phi_v = cov.phi_s, cov.phi_v
        else:
            Ysub = Y
            mag = np.abs(Y[0])
            lam = np.clip(np.abs(s1_ref) / np.where(mag > 0, mag, 1.0), 0.0, 1.0)
            lam = np.where(mag > 0, lam, 0.0)
            phi_s = covariance_from_mask(lam, Ysub)
            phi_v = covariance_from_mask(1.0 - lam, Ysub)
        d = steering_vector(phi_s, 0)
        if cfg.tv_mvdr is not None and cfg.covariance == "estimates":
            V = Ysub[None] - aligned.estimates
            w = tv_mvdr_weights(V, phi_v, d, cfg.tv_mvdr)
        else:
            w = mvdr_weights(phi_v, d)
        bf = apply_beamformer(w, Ysub)
        final = bf
        if cfg.debug:
            inter.update(phi_s=phi_s, phi_v=phi_v, steering=d, weights=w, beamformed=bf)

    # stage 2 ----------------------------------------------------------------
    if cfg.has_stage2:
        base = Y[:1] if cfg.input_kind == "siso" else Y
        if cfg.stage2_mode == "joint":
            parts = [base] + ([bf] if cfg.stage2_uses_bf else []) + [s1_ref]
            planes = _with_magnitude(np.concatenate(parts), Y[0], cfg)
            final = apply_separator(cfg.stage2, planes, ctx(0, plane_layout(cfg, P, 2)), stage=2).data
        else:
            outs = []
            for c in range(cfg.num_speakers):
                parts = [base] + ([bf[c : c + 1]] if cfg.stage2_uses_bf else []) + [s1_ref[c : c + 1]]
                planes = _with_magnitude(np.concatenate(parts), Y[0], cfg)
                layout = plane_layout(cfg, P, 2, speaker=c)
                est = apply_separator(cfg.stage2, planes, ctx(0, layout, speaker=c), stage=2).data
                outs.append(est[0])
            final = np.stack(outs)
        if cfg.debug:
            inter["stage2"] = final

    waves = istft(final, stft_cfg, out_len=N + pad)[:, :N]
    if trace is not None:
        waves = denormalize(waves, trace)
    inter["bf"] = bf
    inter["stage1_ref"] = s1_ref
    inter["trace"] = trace
    return PipelineResult(SourceEstimates(final, 2 if cfg.has_stage2 else 1), waves, fs, inter)


# --------------------------------------------------------------------------
# JSON configuration
# --------------------------------------------------------------------------


def build_separator(spec, base_dir=None):
    """Separator from a binding: "oracle_complex", "oracle_psm", "oracle_smm",
    {"name": "noisy_oracle", "snr_db": 5, "seed": 0} or
    {"name": "linear", "path": "model.json"}."""
    if spec is None:
        return None
    if isinstance(spec, str):
        spec = {"name": spec}
    name = spec.get("name")
    if name in ("oracle_complex", "oracle_psm", "oracle_smm"):
        return OracleSeparator(name.split("_", 1)[1], clamp=bool(spec.get("clamp", False)))
    if name == "noisy_oracle":
        return NoisyOracleSeparator(float(spec.get("snr_db", 5.0)), int(spec.get("seed", 0)))
    if name == "linear":
        path = Path(spec["path"])
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        return LinearSeparatorModel.load(path)
    raise ValueError(
        f"unknown separator binding {name!r}; valid: oracle_complex, oracle_psm, oracle_smm, noisy_oracle, linear"
    )


def config_from_dict(d, base_dir=None, sample_rate=None):
    d = dict(d)
    topology = d.get("topology", "MISO1_BF_MISO3")
    if topology not in TOPOLOGIES:
        raise ValueError(f"unknown topology {topology!r}; valid: {', '.join(TOPOLOGIES)}")
    seps = d.get("separators", {})
    tv = d.get("tv_mvdr")
    stft_cfg = None
    if sample_rate is not None or "sample_rate" in d:
        stft_cfg = StftConfig(int(d.get("sample_rate", sample_rate)))
    return PipelineConfig(
        topology=topology,
        num_speakers=int(d.get("num_speakers", 2)),
        layout=d.get("layout", "pure_circle"),
        stage1=build_separator(seps.get("stage1"), base_dir),
        stage2=build_separator(seps.get("stage2"), base_dir),
        include_magnitude_feature=bool(d.get("include_magnitude_feature", False)),
        tv_mvdr=TvMvdrConfig(int(tv.get("delta", 3)), float(tv.get("alpha", 0.5))) if tv else None,
        covariance=d.get("covariance", "estimates"),
        align_metric=d.get("align_metric", "l1"),
        debug=bool(d.get("debug", False)),
        stft=stft_cfg,
    )


def load_pipeline_config(path, sample_rate=None):
    path = Path(path)
    return config_from_dict(json.loads(path.read_text()), base_dir=path.parent, sample_rate=sample_rate)


def with_sample_rate(cfg, sample_rate):
    if cfg.stft is not None and cfg.stft.sample_rate == sample_rate:
        return cfg
    return replace(cfg, stft=StftConfig(sample_rate))
