"""Covariance estimation, steering vectors and (time-varying) MVDR.

Shapes: spectra are ``(P, T, F)``; per-source multichannel estimates are
``(C, P, T, F)``; covariance stacks are ``(C, F, P, P)``.
"""
from dataclasses import dataclass
import warnings

import numpy as np

from .kernels import jacobi_eigh, windowed_outer_sum

__all__ = [
    "CovarianceStack",
    "BeamformerWeights",
    "TvMvdrConfig",
    "hermitize",
    "covariance_from_estimates",
    "covariance_from_mask",
    "principal_eigenvector",
    "steering_vector",
    "mvdr_weights",
    "apply_beamformer",
    "tv_mvdr_weights",
    "tv_noise_covariance",
    "LOADING",
]

LOADING = 1e-6
LOADING_ABS = 1e-12
REF_FLOOR = 1e-12


@dataclass
class CovarianceStack:
    phi_s: np.ndarray
    phi_v: np.ndarray
    frames: int


@dataclass
class BeamformerWeights:
    w: np.ndarray  # (C, F, P) or (C, T, F, P)
    fallback: np.ndarray | None = None  # items solved by pseudo-inverse

    @property
    def time_varying(self):
        return self.w.ndim == 4


@dataclass(frozen=True)
class TvMvdrConfig:
    delta: int = 3
    alpha: float = 0.5

    def __post_init__(self):
        if self.delta < 0:
            raise ValueError("delta must be >= 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")


def hermitize(a):
    return 0.5 * (a + np.conj(np.swapaxes(a, -1, -2)))


def covariance_from_estimates(S_hat, Y):
    """Target and non-target covariances from complex estimates at every mic.

    phi_s = mean_t S S^H ; phi_v = mean_t V V^H with V = Y - S.
    """
    S_hat = np.asarray(S_hat)
    Y = np.asarray(Y)
    C, P, T, F = S_hat.shape
    if T == 0:
        raise ValueError("no frames to average")
    V = Y[None] - S_hat
    phi_s = np.einsum("cptf,cqtf->cfpq", S_hat, np.conj(S_hat)) / T
    phi_v = np.einsum("cptf,cqtf->cfpq", V, np.conj(V)) / T
    return CovarianceStack(hermitize(phi_s), hermitize(phi_v), T)


def covariance_from_mask(mask, Y):
    """Mask-weighted mixture covariance, mean_t lambda(c, t, f) Y Y^H."""
    mask = np.asarray(mask, dtype=float)
    Y = np.asarray(Y)
    T = Y.shape[1]
    return hermitize(np.einsum("ctf,ptf,qtf->cfpq", mask, Y, np.conj(Y)) / T)


def principal_eigenvector(phi, backend=None):
    """Unit eigenvector of the largest eigenvalue (first index on ties)."""
    vals, vecs = jacobi_eigh(phi, backend=backend)
    top = np.argmax(vals, axis=-1)
    r = np.take_along_axis(vecs, top[..., None, None], axis=-1)[..., 0]
    return r, np.take_along_axis(vals, top[..., None], axis=-1)[..., 0]


def steering_vector(phi_s, q=0, backend=None):
    """Relative transfer function: principal eigenvector divided by its q-th entry."""
    phi_s = np.asarray(phi_s, dtype=np.complex128)
    r, _ = principal_eigenvector(phi_s, backend=backend)
    rq = r[..., q]
    if np.any(np.abs(rq) < REF_FLOOR):
        bad = np.argwhere(np.abs(rq) < REF_FLOOR)[0]
        raise ValueError(f"reference element vanishes in principal eigenvector at index {tuple(bad)}")
    # fix the global phase so the reference entry is real-positive
    r = r * (np.conj(rq) / np.abs(rq))[..., None]
    d = r / r[..., q : q + 1]
    d[..., q] = 1.0
    return d


def _load(phi):
    P = phi.shape[-1]
    tr = np.real(np.trace(phi, axis1=-2, axis2=-1))
    eps = LOADING * tr / P + LOADING_ABS
    return phi + eps[..., None, None] * np.eye(P)


def mvdr_weights(phi_v, d_hat):
    """w = phi_v^-1 d / (d^H phi_v^-1 d), with diagonal loading and a Cholesky solve."""
    phi = _load(hermitize(np.asarray(phi_v, dtype=np.complex128)))
    d = np.asarray(d_hat, dtype=np.complex128)
    shape = d.shape
    phi = phi.reshape((-1,) + phi.shape[-2:])
    d = d.reshape(-1, shape[-1])
    fallback = np.zeros(len(d), dtype=bool)
    try:
        L = np.linalg.cholesky(phi)
        y = np.linalg.solve(L, d[..., None])
        x = np.linalg.solve(np.conj(np.swapaxes(L, -1, -2)), y)[..., 0]
    except np.linalg.LinAlgError:
        x = np.empty_like(d)
        for i in range(len(d)):
            try:
                Li = np.linalg.cholesky(phi[i])
                x[i] = np.linalg.solve(Li.conj().T, np.linalg.solve(Li, d[i]))
            except np.linalg.LinAlgError:
                fallback[i] = True
                x[i] = np.linalg.pinv(phi[i], hermitian=True) @ d[i]
    denom = np.einsum("bp,bp->b", np.conj(d), x)
    bad = ~np.isfinite(denom) | (np.abs(denom) < 1e-300)
    if np.any(bad):
        i = int(np.argmax(bad))
        cond = np.linalg.cond(phi[i])
        raise np.linalg.LinAlgError(f"non-target covariance singular beyond loading (cond ~ {cond:.3g})")
    if fallback.any():
        warnings.warn(f"{int(fallback.sum())} covariance(s) solved by pseudo-inverse", RuntimeWarning)
    w = x / denom[:, None]
    return BeamformerWeights(w.reshape(shape), fallback.reshape(shape[:-1]))


def apply_beamformer(w, Y):
    """Beamformed spectra w^H Y per source.

    Args:
        w: BeamformerWeights or array (C, F, P) / (C, T, F, P)
        Y: (P, T, F)
    Returns:
        (C, T, F)
    """
    w = w.w if isinstance(w, BeamformerWeights) else np.asarray(w)
    Y = np.asarray(Y)
    if w.ndim == 3:
        return np.einsum("cfp,ptf->ctf", np.conj(w), Y)
    return np.einsum("ctfp,ptf->ctf", np.conj(w), Y)


def tv_noise_covariance(V_hat, phi_v, cfg, backend=None):
    """Blend of a windowed short-term and the long-term non-target covariance,
    each scaled to trace P.

    Args:
        V_hat: (C, P, T, F) residuals Y - S_hat
        phi_v: (C, F, P, P) long-term covariance
    Returns:
        (C, F, T, P, P)
    """
    V_hat = np.asarray(V_hat)
    C, P, T, F = V_hat.shape
    x = np.transpose(V_hat, (0, 3, 2, 1))  # (C, F, T, P)
    short = windowed_outer_sum(x, cfg.delta, backend=backend)
    tr_short = np.real(np.trace(short, axis1=-2, axis2=-1))
    ok = tr_short >= 1e-12
    short_n = short / np.where(ok, tr_short / P, 1.0)[..., None, None]
    tr_long = np.real(np.trace(phi_v, axis1=-2, axis2=-1))
    long_n = phi_v / np.maximum(tr_long / P, 1e-300)[..., None, None]
    long_n = np.broadcast_to(long_n[:, :, None], short.shape)
    blend = cfg.alpha * short_n + (1.0 - cfg.alpha) * long_n
    return np.where(ok[..., None, None], blend, long_n)


def tv_mvdr_weights(V_hat, phi_v, d_hat, cfg, backend=None):
    """Per-frame MVDR with the blended non-target covariance and a fixed RTF.

    Returns BeamformerWeights with ``w`` shaped (C, T, F, P).
    """
    phi_t = tv_noise_covariance(V_hat, phi_v, cfg, backend=backend)
    # back to the long-term scale so the absolute loading term matches the
    # time-invariant solve (the weights are otherwise scale-free)
    tr_long = np.real(np.trace(phi_v, axis1=-2, axis2=-1)) / phi_t.shape[-1]
    phi_t = phi_t * tr_long[:, :, None, None, None]
    d = np.broadcast_to(np.asarray(d_hat)[:, :, None, :], phi_t.shape[:-1])
    bw = mvdr_weights(phi_t, d)
    return BeamformerWeights(np.swapaxes(bw.w, 1, 2), np.swapaxes(bw.fallback, 1, 2))
