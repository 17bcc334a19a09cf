"""Hot numeric kernels with a numba path and a pure-numpy fallback.

Every public kernel takes ``backend`` ("numba", "numpy" or None). ``None``
follows the module-wide switch in :mod:`mcsep._accel`.
"""
import math

import numpy as np

from ._accel import USE_NUMBA, optional_njit

SINC_HALF_WIDTH = 8  # 16-tap windowed-sinc fractional delay

__all__ = [
    "image_source_rir",
    "image_lattice",
    "jacobi_eigh",
    "windowed_outer_sum",
    "resolve_backend",
]


def resolve_backend(backend=None):
    if backend is None:
        return "numba" if USE_NUMBA else "numpy"
    if backend not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {backend!r}")
    return backend


# --------------------------------------------------------------------------
# image-source room impulse response
# --------------------------------------------------------------------------


def axis_bounds(length, room, fs, c):
    max_dist = (length + SINC_HALF_WIDTH) / fs * c
    return np.array([int(math.ceil(max_dist / (2.0 * room[i]))) + 1 for i in range(3)], dtype=np.int64)


@optional_njit(cache=True)
def _image_source_numba(mics, src, room, beta, fs, c, length, max_order, bounds):
    M = mics.shape[0]
    out = np.zeros((M, length))
    hw = SINC_HALF_WIDTH
    max_delay = length + hw
    for m in range(M):
        for nx in range(-bounds[0], bounds[0] + 1):
            for u in range(2):
                rx = abs(nx - u) + abs(nx)
                if rx > max_order:
                    continue
                dx = (1 - 2 * u) * src[0] + 2 * nx * room[0] - mics[m, 0]
                for ny in range(-bounds[1], bounds[1] + 1):
                    for v in range(2):
                        ry = abs(ny - v) + abs(ny)
                        if rx + ry > max_order:
                            continue
                        dy = (1 - 2 * v) * src[1] + 2 * ny * room[1] - mics[m, 1]
                        for nz in range(-bounds[2], bounds[2] + 1):
                            for w in range(2):
                                rz = abs(nz - w) + abs(nz)
                                refl = rx + ry + rz
                                if refl > max_order:
                                    continue
                                dz = (1 - 2 * w) * src[2] + 2 * nz * room[2] - mics[m, 2]
                                dist = math.sqrt(dx * dx + dy * dy + dz * dz)
                                tau = dist / c * fs
                                if tau >= max_delay:
                                    continue
                                amp = beta**refl / (4.0 * math.pi * dist)
                                n0 = int(math.floor(tau))
                                for k in range(-hw + 1, hw + 1):
                                    idx = n0 + k
                                    if idx < 0 or idx >= length:
                                        continue
                                    x = idx - tau
                                    if x == 0.0:
                                        s = 1.0
                                    else:
                                        s = math.sin(math.pi * x) / (math.pi * x)
                                    win = 0.5 * (1.0 + math.cos(math.pi * x / hw))
                                    out[m, idx] += amp * s * win
    return out


def image_lattice(src, room, bounds, max_order):
    """Positions and total reflection counts of all images within the bounds."""
    comps = []
    for i in range(3):
        n = np.arange(-bounds[i], bounds[i] + 1)
        n, u = np.meshgrid(n, np.arange(2), indexing="ij")
        n, u = n.ravel(), u.ravel()
        comps.append(((1 - 2 * u) * src[i] + 2 * n * room[i], np.abs(n - u) + np.abs(n)))
    (px, rx), (py, ry), (pz, rz) = comps
    refl = rx[:, None, None] + ry[None, :, None] + rz[None, None, :]
    keep = refl <= max_order
    ix, iy, iz = np.nonzero(keep)
    return np.stack([px[ix], py[iy], pz[iz]], axis=1), refl[keep]


def _image_source_numpy(mics, src, room, beta, fs, c, length, max_order, bounds):
    hw = SINC_HALF_WIDTH
    pos, refl = image_lattice(src, room, bounds, max_order)
    gain = beta ** refl.astype(float)
    out = np.zeros((mics.shape[0], length))
    offsets = np.arange(-hw + 1, hw + 1)
    for m in range(mics.shape[0]):
        dist = np.sqrt(np.sum((pos - mics[m]) ** 2, axis=1))
        tau = dist / c * fs
        ok = tau < length + hw
        tau, amp = tau[ok], gain[ok] / (4.0 * np.pi * dist[ok])
        idx = np.floor(tau).astype(np.int64)[:, None] + offsets[None, :]
        x = idx - tau[:, None]
        taps = np.sinc(x) * 0.5 * (1.0 + np.cos(np.pi * x / hw)) * amp[:, None]
        valid = (idx >= 0) & (idx < length)
        out[m] = np.bincount(idx[valid], weights=taps[valid], minlength=length)[:length]
    return out


def image_source_rir(mics, src, room, beta, fs, length, max_order, c=343.0, backend=None):
    """Shoebox image-source RIRs from one source to every microphone.

    Args:
        mics: (M, 3) microphone positions [m]
        src: (3,) source position [m]
        room: (3,) room dimensions [m]
        beta: uniform wall reflection coefficient
        fs: sampling rate [Hz]
        length: number of output taps
        max_order: maximum total number of wall reflections per image
    Returns:
        (M, length) impulse responses; 16-tap Hann-windowed sinc per image
    """
    mics = np.ascontiguousarray(mics, dtype=np.float64)
    src = np.ascontiguousarray(src, dtype=np.float64)
    room = np.ascontiguousarray(room, dtype=np.float64)
    bounds = axis_bounds(length, room, fs, c)
    args = (mics, src, room, float(beta), float(fs), float(c), int(length), int(max_order), bounds)
    if resolve_backend(backend) == "numba":
        return _image_source_numba(*args)
    return _image_source_numpy(*args)


# --------------------------------------------------------------------------
# cyclic Jacobi eigendecomposition of Hermitian matrices
# --------------------------------------------------------------------------

JACOBI_TOL = 1e-15
JACOBI_MAX_SWEEPS = 60


@optional_njit(cache=True)
def _jacobi_numba(mats, tol, max_sweeps):
    B, P, _ = mats.shape
    vals = np.zeros((B, P))
    vecs = np.zeros((B, P, P), dtype=np.complex128)
    for b in range(B):
        a = mats[b].copy()
        v = np.eye(P, dtype=np.complex128)
        fro = 0.0
        for i in range(P):
            for j in range(P):
                fro += a[i, j].real ** 2 + a[i, j].imag ** 2
        fro = math.sqrt(fro)
        for _ in range(max_sweeps):
            off = 0.0
            for i in range(P):
                for j in range(i + 1, P):
                    off += 2.0 * (a[i, j].real ** 2 + a[i, j].imag ** 2)
            if math.sqrt(off) <= tol * fro or fro == 0.0:
                break
            for p in range(P - 1):
                for q in range(p + 1, P):
                    apq = a[p, q]
                    mag = abs(apq)
                    if mag == 0.0:
                        continue
                    ph = apq / mag
                    theta = (a[q, q].real - a[p, p].real) / (2.0 * mag)
                    t = 1.0 / (abs(theta) + math.sqrt(theta * theta + 1.0))
                    if theta < 0.0:
                        t = -t
                    cs = 1.0 / math.sqrt(t * t + 1.0)
                    sn = t * cs
                    eph = np.conj(ph)
                    # columns: A <- A U, U = [[c, s], [-s e^{-i phi}, c e^{-i phi}]]
                    for k in range(P):
                        akp = a[k, p]
                        akq = a[k, q]
                        a[k, p] = cs * akp - sn * eph * akq
                        a[k, q] = sn * akp + cs * eph * akq
                        vkp = v[k, p]
                        vkq = v[k, q]
                        v[k, p] = cs * vkp - sn * eph * vkq
                        v[k, q] = sn * vkp + cs * eph * vkq
                    # rows: A <- U^H A
                    for k in range(P):
                        apk = a[p, k]
                        aqk = a[q, k]
                        a[p, k] = cs * apk - sn * ph * aqk
                        a[q, k] = sn * apk + cs * ph * aqk
                    a[p, q] = 0.0
                    a[q, p] = 0.0
                    a[p, p] = a[p, p].real
                    a[q, q] = a[q, q].real
        for i in range(P):
            vals[b, i] = a[i, i].real
        vecs[b] = v
    return vals, vecs


def _jacobi_numpy(mats, tol, max_sweeps):
    a = mats.copy()
    B, P, _ = a.shape
    v = np.broadcast_to(np.eye(P, dtype=np.complex128), (B, P, P)).copy()
    fro = np.sqrt(np.sum(np.abs(a) ** 2, axis=(1, 2)))
    iu = np.triu_indices(P, 1)
    for _ in range(max_sweeps):
        off = np.sqrt(2.0 * np.sum(np.abs(a[:, iu[0], iu[1]]) ** 2, axis=1))
        active = (off > tol * fro) & (fro > 0)
        if not active.any():
            break
        for p in range(P - 1):
            for q in range(p + 1, P):
                apq = a[:, p, q]
                mag = np.abs(apq)
                rot = active & (mag > 0)
                safe = np.where(rot, mag, 1.0)
                ph = np.where(rot, apq / safe, 1.0)
                theta = (a[:, q, q].real - a[:, p, p].real) / (2.0 * safe)
                t = np.where(theta < 0, -1.0, 1.0) / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
                t = np.where(rot, t, 0.0)
                cs = 1.0 / np.sqrt(t * t + 1.0)
                sn = t * cs
                eph = np.conj(ph)
                cs_c, sn_c = cs[:, None], sn[:, None]
                for m in (a, v):
                    colp, colq = m[:, :, p].copy(), m[:, :, q]
                    m[:, :, p] = cs_c * colp - (sn * eph)[:, None] * colq
                    m[:, :, q] = sn_c * colp + (cs * eph)[:, None] * colq
                rowp, rowq = a[:, p, :].copy(), a[:, q, :]
                a[:, p, :] = cs_c * rowp - (sn * ph)[:, None] * rowq
                a[:, q, :] = sn_c * rowp + (cs * ph)[:, None] * rowq
                a[rot, p, q] = 0.0
                a[rot, q, p] = 0.0
                a[:, p, p] = a[:, p, p].real
                a[:, q, q] = a[:, q, q].real
    return np.real(np.diagonal(a, axis1=1, axis2=2)).copy(), v


def jacobi_eigh(mats, tol=JACOBI_TOL, max_sweeps=JACOBI_MAX_SWEEPS, backend=None):
    """Eigendecomposition of a stack of Hermitian matrices by cyclic Jacobi.

    Sweeps visit (p, q) pairs in row-major order, so results are
    deterministic. Eigenvalues are returned unsorted (diagonal order) with
    eigenvectors as the columns of ``vecs``.
    """
    mats = np.asarray(mats, dtype=np.complex128)
    shape = mats.shape
    flat = np.ascontiguousarray(mats.reshape((-1,) + shape[-2:]))
    if resolve_backend(backend) == "numba":
        vals, vecs = _jacobi_numba(flat, tol, max_sweeps)
    else:
        vals, vecs = _jacobi_numpy(flat, tol, max_sweeps)
    return vals.reshape(shape[:-1]), vecs.reshape(shape)


# --------------------------------------------------------------------------
# sliding-window sum of outer products (time-varying covariance)
# --------------------------------------------------------------------------


@optional_njit(cache=True)
def _windowed_outer_numba(x, delta):
    B, T, P = x.shape
    out = np.zeros((B, T, P, P), dtype=np.complex128)
    for b in range(B):
        for t in range(T):
            lo = max(0, t - delta)
            hi = min(T - 1, t + delta)
            for s in range(lo, hi + 1):
                for i in range(P):
                    xi = x[b, s, i]
                    for j in range(P):
                        out[b, t, i, j] += xi * np.conj(x[b, s, j])
    return out


def _windowed_outer_numpy(x, delta):
    B, T, P = x.shape
    outer = x[..., :, None] * np.conj(x[..., None, :])
    out = np.zeros_like(outer)
    for off in range(-delta, delta + 1):
        # out[t] += outer[t + off] wherever both frames exist
        lo, hi = max(0, -off), min(T, T - off)
        if lo < hi:
            out[:, lo:hi] += outer[:, lo + off : hi + off]
    return out


def windowed_outer_sum(x, delta, backend=None):
    """Sum of x x^H over frames [max(0, t-delta), min(T-1, t+delta)].

    Args:
        x: (..., T, P) complex frames
    Returns:
        (..., T, P, P)
    """
    x = np.asarray(x, dtype=np.complex128)
    shape = x.shape
    flat = np.ascontiguousarray(x.reshape((-1,) + shape[-2:]))
    if resolve_backend(backend) == "numba":
        out = _windowed_outer_numba(flat, int(delta))
    else:
        out = _windowed_outer_numpy(flat, int(delta))
    return out.reshape(shape + (shape[-1],))
