"""Separators, oracle masks and the utterance-level PIT loss.

A separator maps a stack of complex input planes ``(N, T, F)`` to ``C``
complex estimates ``(C, T, F)`` at the microphone the first plane belongs to.
The plane order is part of the contract; see ``mcsep.pipeline.plane_layout``.
"""
from dataclasses import dataclass, field
import itertools
import json
import math
from pathlib import Path

import numpy as np

from .spectral import stft

__all__ = [
    "SourceEstimates",
    "SeparatorContext",
    "Separator",
    "OracleSeparator",
    "NoisyOracleSeparator",
    "LinearSeparatorModel",
    "oracle_mask",
    "oracle_separate",
    "pairwise_loss",
    "upit_loss",
    "spectral_l1_loss",
    "apply_separator",
    "stack_context",
    "loss_and_grad",
    "train_linear_separator",
    "fit_linear_separator",
    "miso_training_pairs",
    "MAX_PIT_SOURCES",
]

MAX_PIT_SOURCES = 10


@dataclass
class SourceEstimates:
    """Complex estimates ``data[c, t, f]`` at one microphone; ``stage`` is 1 or 2."""

    data: np.ndarray
    stage: int = 1

    @property
    def num_sources(self):
        return self.data.shape[0]


@dataclass
class SeparatorContext:
    """Run-time information the pipeline passes alongside the planes.

    ``truth`` holds direct-path spectra ``(C, P, T, F)`` in the same
    normalization as the planes; only oracle separators read it.
    """

    ref_mic: int = 0
    speaker: int | None = None
    layout: tuple = ()
    truth: np.ndarray | None = None
    stft_cfg: object = None


class Separator:
    """Base class. ``arity`` is the number of input planes (None = any)."""

    arity = None
    name = "separator"

    def separate(self, planes, ctx):
        raise NotImplementedError


def apply_separator(sep, planes, ctx=None, stage=1):
    planes = np.asarray(planes)
    ctx = ctx or SeparatorContext()
    if sep.arity is not None and planes.shape[0] != sep.arity:
        layout = ", ".join(ctx.layout) if ctx.layout else "unknown"
        raise ValueError(
            f"{sep.name} expects {sep.arity} input planes, got {planes.shape[0]} (layout: <{layout}>)"
        )
    return SourceEstimates(np.asarray(sep.separate(planes, ctx)), stage=stage)


# --------------------------------------------------------------------------
# oracle masks
# --------------------------------------------------------------------------


def oracle_mask(kind, mix_ref, targets, clamp=False):
    """Spectral magnitude (smm) or phase-sensitive (psm) mask per source.

    Bins where the mixture is exactly zero get mask 0.
    """
    mix_ref = np.asarray(mix_ref)
    targets = np.asarray(targets)
    mag = np.abs(mix_ref)
    safe = np.where(mag > 0, mag, 1.0)
    if kind == "smm":
        mask = np.abs(targets) / safe
    elif kind == "psm":
        mask = np.abs(targets) * np.cos(np.angle(targets) - np.angle(mix_ref)) / safe
    else:
        raise ValueError(f"unknown mask kind {kind!r}")
    mask = np.where(mag > 0, mask, 0.0)
    if clamp:
        mask = np.clip(mask, 0.0, 1.0)
    return mask


def oracle_separate(kind, mix, targets, q=0, clamp=False):
    """Oracle estimates at reference mic ``q``.

    Args:
        mix: (P, T, F) mixture spectrogram
        targets: (C, T, F) direct-path spectra at mic q
    """
    mix = np.asarray(mix)
    targets = np.asarray(targets)
    if kind == "complex":
        return SourceEstimates(targets.copy())
    return SourceEstimates(oracle_mask(kind, mix[q], targets, clamp) * mix[q])


def _match_planes(stage1, truth_ref):
    """Index of the truth source closest (L1 magnitude) to each stage-1 plane."""
    C = len(stage1)
    dist = np.array([[np.sum(np.abs(np.abs(s) - np.abs(t))) for t in truth_ref] for s in stage1])
    if C <= len(truth_ref):
        best, best_perm = np.inf, None
        for perm in itertools.permutations(range(len(truth_ref)), C):
            total = sum(dist[i, perm[i]] for i in range(C))
            if total < best:
                best, best_perm = total, perm
        return list(best_perm)
    return list(np.argmin(dist, axis=1))


class OracleSeparator(Separator):
    """Oracle estimates from ground truth carried in the context.

    As a first stage it returns the sources in ground-truth order. As a
    post-filter (stage-1 planes present in the layout) it follows the speaker
    order of the stage-1 planes, so its output does not depend on their quality.
    """

    def __init__(self, kind="complex", clamp=False):
        if kind not in ("complex", "smm", "psm"):
            raise ValueError(f"unknown oracle kind {kind!r}")
        self.kind = kind
        self.clamp = clamp
        self.name = f"oracle_{kind}"

    def _truth(self, ctx):
        if ctx.truth is None:
            raise ValueError(f"{self.name} needs ground truth in the separator context")
        return ctx.truth[:, ctx.ref_mic]

    def _order(self, planes, ctx, truth):
        s1 = [i for i, name in enumerate(ctx.layout) if name.startswith("S1")]
        if not s1:
            return list(range(len(truth)))
        return _match_planes(planes[s1], truth)

    def separate(self, planes, ctx):
        truth = self._truth(ctx)
        out = truth[self._order(planes, ctx, truth)]
        if self.kind == "complex":
            return out.copy()
        return oracle_mask(self.kind, planes[0], out, self.clamp) * planes[0]


class NoisyOracleSeparator(OracleSeparator):
    """Complex oracle degraded by additive noise at a fixed per-source SNR.

    The noise is the STFT of white Gaussian noise, so it is a consistent
    spectrogram and survives resynthesis at the stated SNR.
    """

    def __init__(self, snr_db=5.0, seed=0):
        super().__init__("complex")
        self.snr_db = snr_db
        self.seed = seed
        self.name = f"noisy_oracle_{snr_db:g}dB"

    def separate(self, planes, ctx):
        clean = super().separate(planes, ctx)
        if ctx.stft_cfg is None:
            raise ValueError(f"{self.name} needs the STFT config in the separator context")
        cfg = ctx.stft_cfg
        C, T, F = clean.shape
        rng = np.random.default_rng([self.seed, ctx.ref_mic, 0 if ctx.speaker is None else ctx.speaker + 1])
        n = (T - 1) * cfg.shift + cfg.window
        noise = stft(rng.standard_normal((C, n)), cfg)
        pc = np.sum(np.abs(clean) ** 2, axis=(1, 2))
        pn = np.sum(np.abs(noise) ** 2, axis=(1, 2))
        gain = np.sqrt(pc / pn / 10.0 ** (self.snr_db / 10.0))
        return clean + gain[:, None, None] * noise


# --------------------------------------------------------------------------
# uPIT loss
# --------------------------------------------------------------------------


def spectral_l1_loss(est, ref):
    """L1 on real part + L1 on imaginary part + L1 on magnitude, summed."""
    est = np.asarray(est)
    ref = np.asarray(ref)
    return float(
        np.sum(np.abs(est.real - ref.real))
        + np.sum(np.abs(est.imag - ref.imag))
        + np.sum(np.abs(np.abs(est) - np.abs(ref)))
    )


def pairwise_loss(est, ref):
    """(C_est, C_ref) matrix of per-pair losses."""
    return np.array([[spectral_l1_loss(e, r) for r in ref] for e in est])


def upit_loss(est, ref, resolve_permutation=True):
    """Utterance-level PIT loss.

    Returns ``(loss, perm)`` with ``perm[c]`` the estimate index paired with
    reference speaker c. Ties go to the lexicographically smallest perm.
    Without ``resolve_permutation`` the identity pairing is scored.
    """
    est = est.data if isinstance(est, SourceEstimates) else np.asarray(est)
    ref = ref.data if isinstance(ref, SourceEstimates) else np.asarray(ref)
    if est.shape != ref.shape:
        raise ValueError(f"shape mismatch: {est.shape} vs {ref.shape}")
    C = est.shape[0]
    if not resolve_permutation:
        ident = tuple(range(C))
        return sum(spectral_l1_loss(est[c], ref[c]) for c in range(C)), ident
    if C > MAX_PIT_SOURCES:
        raise ValueError(f"{C}! permutations exceeds the exhaustive-search bound ({MAX_PIT_SOURCES}!)")
    pair = pairwise_loss(est, ref)
    best, best_perm = np.inf, None
    for perm in itertools.permutations(range(C)):
        total = sum(pair[perm[c], c] for c in range(C))
        if total < best:
            best, best_perm = total, perm
    return float(best), best_perm


# --------------------------------------------------------------------------
# trainable per-frequency linear separator
# --------------------------------------------------------------------------


def stack_context(planes, K):
    """Stack K frames of context per plane: feature ``n * K + k`` is plane n
    shifted by ``k - (K - 1) // 2`` frames, zero padded at the edges."""
    planes = np.asarray(planes, dtype=np.complex128)
    if K < 1 or K % 2 == 0:
        raise ValueError("context K must be a positive odd number")
    N, T, F = planes.shape
    half = (K - 1) // 2
    out = np.zeros((N, K, T, F), dtype=np.complex128)
    for k in range(K):
        off = k - half
        lo, hi = max(0, -off), min(T, T - off)
        if lo < hi:
            out[:, k, lo:hi] = planes[:, lo + off : hi + off]
    return out.reshape(N * K, T, F)


@dataclass
class LinearSeparatorModel(Separator):
    """``est[c, t, f] = sum_j weights[c, f, j] * features[j, t, f]``."""

    weights: np.ndarray
    context: int = 1
    num_planes: int = 1
    log: list = field(default_factory=list)

    FORMAT = "mcsep-linear-separator"
    VERSION = 1

    @property
    def arity(self):
        return self.num_planes

    @property
    def name(self):
        return f"linear(K={self.context}, planes={self.num_planes})"

    @property
    def num_outputs(self):
        return self.weights.shape[0]

    def separate(self, planes, ctx=None):
        X = stack_context(planes, self.context)
        return np.einsum("cfj,jtf->ctf", self.weights, X)

    def to_json(self):
        w = self.weights
        return json.dumps(
            {
                "format": self.FORMAT,
                "version": self.VERSION,
                "shape": list(w.shape),
                "context": self.context,
                "num_planes": self.num_planes,
                "real": w.real.ravel().tolist(),
                "imag": w.imag.ravel().tolist(),
                "log": [float(v) for v in self.log],
            }
        )

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        if d.get("format") != cls.FORMAT:
            raise ValueError("not a linear separator model file")
        if d.get("version") != cls.VERSION:
            raise ValueError(f"unsupported model version {d.get('version')}")
        shape = tuple(d["shape"])
        w = (np.array(d["real"], dtype=np.float64) + 1j * np.array(d["imag"], dtype=np.float64)).reshape(shape)
        return cls(w, d["context"], d["num_planes"], list(d["log"]))

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path):
        return cls.from_json(Path(path).read_text())


def loss_and_grad(weights, features, target, perm=None):
    """uPIT L1 loss (real, imaginary and magnitude terms) of one example and its subgradient w.r.t. complex weights.

    The gradient is returned as dL/dRe(W) + 1j * dL/dIm(W). ``perm[c]`` is
    the output index paired with target c (identity when None).
    """
    est = np.einsum("cfj,jtf->ctf", weights, features)
    C = target.shape[0]
    if perm is None:
        perm = tuple(range(C))
    inv = np.empty(C, dtype=int)
    inv[list(perm)] = np.arange(C)
    ref = target[inv]  # reference paired with each output
    err = est - ref
    mag = np.abs(est)
    mag_err = mag - np.abs(ref)
    loss = np.sum(np.abs(err.real)) + np.sum(np.abs(err.imag)) + np.sum(np.abs(mag_err))
    safe = np.where(mag > 0, mag, 1.0)
    unit = np.where(mag > 0, est / safe, 0.0)
    G = np.sign(err.real) + 1j * np.sign(err.imag) + np.sign(mag_err) * unit
    grad = np.einsum("ctf,jtf->cfj", G, np.conj(features))
    return float(loss), grad


def miso_training_pairs(bundles, stft_cfg, include_magnitude=False):
    """(planes, target) pairs: all mics in array order -> direct path at the reference mic."""
    from .spectral import normalize_variance

    pairs = []
    for b in bundles:
        mix, trace = normalize_variance(b.mixture)
        Y = stft(mix, stft_cfg)
        q = b.geometry.reference_index
        S = stft(b.direct[:, q] * trace.scale, stft_cfg)
        planes = Y if not include_magnitude else np.concatenate([Y, np.abs(Y[q : q + 1]) + 0j])
        pairs.append((planes, S))
    return pairs


def fit_linear_separator(
    pairs,
    num_outputs,
    K=1,
    epochs=200,
    lr=0.01,
    resolve_permutation=True,
    optimizer="adam",
    seed=0,
    init_scale=1e-3,
    model=None,
):
    """Full-batch subgradient training on the uPIT L1 loss.

    ``optimizer`` is "adam" (default) or "sgd". Raises RuntimeError when the
    loss exceeds ten times its initial value.
    """
    feats = [stack_context(p, K) for p, _ in pairs]
    targets = [np.asarray(t, dtype=np.complex128) for _, t in pairs]
    N = pairs[0][0].shape[0]
    F = pairs[0][0].shape[2]
    if model is None:
        rng = np.random.default_rng(seed)
        shape = (num_outputs, F, N * K)
        W = init_scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))
    else:
        W = model.weights.copy()
    log = []

    def evaluate(W):
        total, grad = 0.0, np.zeros_like(W)
        for X, S in zip(feats, targets):
            perm = None
            if resolve_permutation:
                est = np.einsum("cfj,jtf->ctf", W, X)
                _, perm = upit_loss(est, S)
            loss, g = loss_and_grad(W, X, S, perm)
            total += loss
            grad += g
        return total, grad

    m = np.zeros_like(W)
    v = np.zeros(W.shape + (2,))
    b1, b2, eps = 0.9, 0.999, 1e-12
    initial = None
    for epoch in range(epochs):
        loss, grad = evaluate(W)
        if initial is None:
            initial = loss
        log.append(loss)
        if not math.isfinite(loss) or loss > 10.0 * initial:
            raise RuntimeError(
                f"training diverged at epoch {epoch}: loss {loss:.4g} vs initial {initial:.4g}; lower lr (now {lr})"
            )
        if lr == 0:
            continue
        if optimizer == "sgd":
            W = W - lr * grad
        elif optimizer == "adam":
            m = b1 * m + (1 - b1) * grad
            g2 = np.stack([grad.real**2, grad.imag**2], axis=-1)
            v = b2 * v + (1 - b2) * g2
            mh = m / (1 - b1 ** (epoch + 1))
            vh = v / (1 - b2 ** (epoch + 1))
            W = W - lr * (mh.real / (np.sqrt(vh[..., 0]) + eps) + 1j * mh.imag / (np.sqrt(vh[..., 1]) + eps))
        else:
            raise ValueError(f"unknown optimizer {optimizer!r}")
    final, _ = evaluate(W)
    log.append(final)
    return LinearSeparatorModel(W, K, N, log)


def train_linear_separator(dataset, C, K=1, epochs=200, lr=0.01, stft_cfg=None, include_magnitude=False, **kwargs):
    """Train a MISO linear separator on mixture bundles (uPIT, all mics as input)."""
    from .spectral import StftConfig

    if not dataset:
        raise ValueError("need at least one mixture")
    stft_cfg = stft_cfg or StftConfig(dataset[0].sample_rate)
    pairs = miso_training_pairs(dataset, stft_cfg, include_magnitude)
    return fit_linear_separator(pairs, C, K=K, epochs=epochs, lr=lr, **kwargs)
