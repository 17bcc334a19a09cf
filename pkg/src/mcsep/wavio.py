"""32-bit float WAV read/write."""
from pathlib import Path

import numpy as np
from scipy.io import wavfile

__all__ = ["read_wav", "write_wav"]


def write_wav(path, samples, sample_rate):
    """Write a (P, N) or (N,) signal as float32 PCM, channels interleaved."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float32))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), int(sample_rate), samples.T.copy())


def read_wav(path, mmap=False):
    """Return ``(samples (P, N) float64, sample_rate)``.

    Integer PCM is rescaled to [-1, 1). With ``mmap`` the file is mapped
    instead of loaded, which is how streaming consumers read progressively.
    """
    fs, data = wavfile.read(str(path), mmap=mmap)
    if data.ndim == 1:
        data = data[:, None]
    if np.issubdtype(data.dtype, np.integer):
        info = np.iinfo(data.dtype)
        data = data.astype(np.float64) / float(-info.min)
        return data.T, fs
    if mmap:
        return data.T, fs
    return data.T.astype(np.float64), fs
