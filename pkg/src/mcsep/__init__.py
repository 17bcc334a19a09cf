"""Multi-microphone speech separation toolkit.

Mixture simulation, oracle and trainable separators, MVDR beamforming,
two-stage pipelines and block-online continuous separation.
"""
import os

_threads = os.environ.get("MCSEP_NUM_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"

from . import beamform, css, metrics, pipeline, separator, simulate, spectral  # noqa: E402
from .beamform import TvMvdrConfig, mvdr_weights, steering_vector, tv_mvdr_weights  # noqa: E402
from .css import CssConfig, run_css  # noqa: E402
from .metrics import eval_mixture, si_sdr  # noqa: E402
from .pipeline import PipelineConfig, run_pipeline  # noqa: E402
from .separator import NoisyOracleSeparator, OracleSeparator, upit_loss  # noqa: E402
from .spectral import StftConfig, Waveform, istft, stft  # noqa: E402

__all__ = [
    "beamform",
    "css",
    "metrics",
    "pipeline",
    "separator",
    "simulate",
    "spectral",
    "TvMvdrConfig",
    "mvdr_weights",
    "steering_vector",
    "tv_mvdr_weights",
    "CssConfig",
    "run_css",
    "eval_mixture",
    "si_sdr",
    "PipelineConfig",
    "run_pipeline",
    "NoisyOracleSeparator",
    "OracleSeparator",
    "upit_loss",
    "StftConfig",
    "Waveform",
    "istft",
    "stft",
]
