"""Block-online continuous speech separation.

The stream is cut into overlapping blocks, each block is variance-normalized
with statistics accumulated from the start of the stream, separated by a
pipeline, scaled back, stitched to the previous block by comparing the
overlapping part, and the newly covered samples are emitted.

Emission is causal: the samples emitted after a block are the ones not yet
covered by earlier blocks, so an output sample at time t only depends on
input up to t + shift.
"""
from dataclasses import dataclass, field
import itertools

import numpy as np
from scipy.ndimage import median_filter

from .pipeline import run_pipeline, with_sample_rate
from .spectral import StftConfig, Waveform, stft

__all__ = [
    "CssConfig",
    "CssState",
    "CssResult",
    "Block",
    "segment_blocks",
    "stitch",
    "stitch_distance",
    "energy_vad",
    "count_speakers_oracle",
    "one_speaker_segments",
    "merge_and_suppress",
    "run_css",
]


@dataclass(frozen=True)
class CssConfig:
    block_s: float = 2.424
    shift_s: float = 1.2
    num_speakers: int = 2
    suppress_gain: float = 1e-3
    counting: str = "oracle"  # or "none"
    overlap_floor_dbfs: float = -50.0
    vad_threshold_db: float = -40.0
    vad_hangover: int = 10
    median_frames: int = 11
    stitch_metric: str = "l1"

    def __post_init__(self):
        if not 0 < self.shift_s < self.block_s:
            raise ValueError(f"need 0 < shift_s < block_s, got {self.shift_s} / {self.block_s}")
        if self.counting not in ("oracle", "none"):
            raise ValueError(f"unknown counting mode {self.counting!r}")
        if self.stitch_metric not in ("l1", "l2"):
            raise ValueError(f"unknown stitch metric {self.stitch_metric!r}")
        if self.num_speakers != 2:
            raise ValueError("block stitching handles exactly two output streams")

    def block_samples(self, fs):
        return int(round(self.block_s * fs))

    def shift_samples(self, fs):
        return int(round(self.shift_s * fs))


@dataclass
class Block:
    index: int
    start: int
    stop: int

    @property
    def length(self):
        return self.stop - self.start


@dataclass
class CssState:
    """Carry-over between blocks (single owner)."""

    tail: np.ndarray | None = None  # previous block's stream-ordered output past the next offset
    perm: tuple = (0, 1)
    sum1: float = 0.0
    sum2: float = 0.0
    count: int = 0
    seen: int = 0  # input samples accumulated into the variance statistics
    cursor: int = 0  # output samples emitted so far

    def update_stats(self, x, stop):
        """Fold input samples [seen, stop) into the running statistics; return 1/std."""
        if stop > self.seen:
            seg = x[:, self.seen : stop]
            self.sum1 += float(seg.sum())
            self.sum2 += float(np.sum(seg * seg))
            self.count += seg.size
            self.seen = stop
        mean = self.sum1 / self.count
        var = self.sum2 / self.count - mean * mean
        return 1.0 / np.sqrt(var) if var > 0 else 1.0


@dataclass
class CssResult:
    streams: np.ndarray  # (2, N)
    sample_rate: int
    blocks: list
    permutations: list
    scales: list
    counts: np.ndarray | None = None
    unmerged: np.ndarray | None = field(default=None, repr=False)


def segment_blocks(num_samples, cfg, fs):
    """Blocks at offsets k * shift until the stream end is covered.

    The last block may be short. A stream shorter than one block gives a
    single truncated block.
    """
    if isinstance(num_samples, Waveform):
        num_samples = len(num_samples)
    if num_samples <= 0:
        raise ValueError("empty stream")
    L, S = cfg.block_samples(fs), cfg.shift_samples(fs)
    blocks = []
    start = 0
    while True:
        stop = min(start + L, num_samples)
        blocks.append(Block(len(blocks), start, stop))
        if stop >= num_samples:
            return blocks
        start += S


def stitch_distance(a, b, metric="l1", stft_cfg=None):
    """Magnitude distance between two single-channel overlap segments."""
    if stft_cfg is not None and a.shape[-1] >= stft_cfg.window:
        ma, mb = np.abs(stft(a, stft_cfg)), np.abs(stft(b, stft_cfg))
    else:
        ma, mb = np.abs(a), np.abs(b)
    d = ma - mb
    return float(np.sum(np.abs(d))) if metric == "l1" else float(np.sqrt(np.sum(d * d)))


def stitch(state, block_out, cfg, stft_cfg=None):
    """Choose the output order of a new block that continues the previous streams.

    Args:
        state: CssState whose ``tail`` holds the previous block's
            stream-ordered output over the overlap (or None for the first block)
        block_out: (2, L) new block outputs in separator order
    Returns:
        (perm, state): stream k takes ``block_out[perm[k]]``
    """
    if state.tail is None:
        return (0, 1), state
    n = min(state.tail.shape[-1], block_out.shape[-1])
    prev = state.tail[:, :n]
    rms = np.sqrt(np.mean(prev * prev)) if n else 0.0
    if n == 0 or rms <= 10.0 ** (cfg.overlap_floor_dbfs / 20.0):
        # silent overlap: no evidence, keep the previous decision
        return state.perm, state
    best, best_perm = np.inf, None
    for perm in itertools.permutations(range(block_out.shape[0])):
        d = sum(stitch_distance(prev[k], block_out[perm[k], :n], cfg.stitch_metric, stft_cfg) for k in range(len(perm)))
        if d < best:
            best, best_perm = d, perm
    state.perm = tuple(best_perm)
    return state.perm, state


def energy_vad(x, stft_cfg, threshold_db=-40.0, hangover=10):
    """Frame-level activity: frame RMS above ``threshold_db`` relative to the
    loudest frame, held for ``hangover`` frames after the last active one."""
    x = np.asarray(x, dtype=float)
    if len(x) < stft_cfg.window:
        return np.zeros(0, dtype=bool)
    T = (len(x) - stft_cfg.window) // stft_cfg.shift + 1
    idx = np.arange(T)[:, None] * stft_cfg.shift + np.arange(stft_cfg.window)
    rms = np.sqrt(np.mean(x[idx] ** 2, axis=1))
    peak = rms.max()
    if peak == 0:
        return np.zeros(T, dtype=bool)
    raw = rms > peak * 10.0 ** (threshold_db / 20.0)
    out = raw.copy()
    last = -np.inf
    for t in range(T):
        if raw[t]:
            last = t
        elif t - last <= hangover:
            out[t] = True
    return out


def count_speakers_oracle(direct, cfg, stft_cfg):
    """Number of active speakers per frame from per-speaker reference signals.

    Args:
        direct: (C, N) direct-path signals at the reference microphone
    """
    direct = np.atleast_2d(np.asarray(direct, dtype=float))
    vads = [energy_vad(d, stft_cfg, cfg.vad_threshold_db, cfg.vad_hangover) for d in direct]
    return np.sum(vads, axis=0).astype(np.int64)


def one_speaker_segments(counts, median_frames=11):
    """Maximal runs of frames whose smoothed count equals one, as (first, stop)."""
    counts = np.asarray(counts)
    if counts.size == 0:
        return []
    smooth = median_filter(counts, size=median_frames, mode="nearest") if median_frames > 1 else counts
    one = np.concatenate([[False], smooth == 1, [False]])
    edges = np.flatnonzero(np.diff(one.astype(np.int8)))
    return [(int(a), int(b)) for a, b in zip(edges[::2], edges[1::2])]


def _frame_to_sample(frame, stft_cfg):
    return frame * stft_cfg.shift


def merge_and_suppress(streams, counts, cfg, stft_cfg, region=None, inplace=False):
    """Within one-speaker segments, fold the weaker stream into the stronger one
    and scale the weaker stream by ``suppress_gain``.

    Frame t maps to samples [t * shift, (t + 1) * shift). ``region`` limits
    the edit to samples [start, stop).
    """
    out = streams if inplace else np.array(streams, dtype=float, copy=True)
    N = out.shape[-1]
    lo, hi = region if region is not None else (0, N)
    for f0, f1 in one_speaker_segments(counts, cfg.median_frames):
        a = max(_frame_to_sample(f0, stft_cfg), lo)
        b = min(_frame_to_sample(f1, stft_cfg), hi) if f1 < len(counts) else hi
        if b <= a:
            continue
        seg = out[:, a:b]
        energy = np.sum(seg * seg, axis=1)
        strong = int(np.argmax(energy))
        weak = 1 - strong
        seg[strong] += seg[weak]
        seg[weak] *= cfg.suppress_gain
    return out


def run_css(stream, pipeline_cfg, cfg=None, references=None, sample_rate=None, state=None):
    """Separate a continuous multichannel stream into two output streams.

    Args:
        stream: Waveform or (P, N) array
        pipeline_cfg: PipelineConfig applied to every block
        references: optional (C, P, N) direct-path signals, used by oracle
            separators and by oracle speaker counting
    """
    cfg = cfg or CssConfig()
    if isinstance(stream, Waveform):
        x, fs = stream.samples, stream.sample_rate
    else:
        x, fs = np.atleast_2d(np.asarray(stream, dtype=float)), sample_rate
    if fs is None:
        raise ValueError("sample rate unknown")
    if x.shape[-1] == 0:
        raise ValueError("empty stream")
    pipeline_cfg = with_sample_rate(pipeline_cfg, fs)
    stft_cfg = pipeline_cfg.stft or StftConfig(fs)
    refs = None if references is None else np.asarray(references, dtype=float)
    if cfg.counting == "oracle" and refs is None:
        raise ValueError("oracle counting needs reference signals")

    counts = None
    if cfg.counting == "oracle":
        counts = count_speakers_oracle(refs[:, 0], cfg, stft_cfg)

    N = x.shape[-1]
    blocks = segment_blocks(N, cfg, fs)
    S = cfg.shift_samples(fs)
    state = state or CssState()
    out = np.zeros((cfg.num_speakers, N))
    unmerged = np.zeros_like(out)
    perms, scales = [], []
    for blk in blocks:
        scale = state.update_stats(x, blk.stop)
        xb = x[:, blk.start : blk.stop] * scale
        rb = None if refs is None else refs[..., blk.start : blk.stop] * scale
        res = run_pipeline(xb, pipeline_cfg, references=rb, normalize=False)
        y = res.waveforms / scale
        perm, state = stitch(state, y, cfg, stft_cfg)
        y = y[list(perm)]
        perms.append(perm)
        scales.append(scale)
        a, b = state.cursor, blk.stop
        out[:, a:b] = y[:, a - blk.start :]
        if counts is not None:
            unmerged[:, a:b] = out[:, a:b]
            merge_and_suppress(out, counts, cfg, stft_cfg, region=(a, b), inplace=True)
        state.cursor = b
        nxt = blk.start + S
        state.tail = y[:, nxt - blk.start :] if nxt < blk.stop else None
    return CssResult(out, fs, blocks, perms, scales, counts, unmerged if counts is not None else None)
