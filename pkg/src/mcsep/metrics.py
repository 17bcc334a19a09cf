"""SI-SDR and permutation-resolved evaluation against direct-path references."""
from dataclasses import asdict, dataclass, field
import csv
import itertools
import json
import warnings

import numpy as np

__all__ = ["SISDR_CAP", "si_sdr", "EvalReport", "eval_mixture", "write_csv", "write_json", "aggregate", "REPORT_COLUMNS"]

SISDR_CAP = 60.0

REPORT_COLUMNS = ["mixture", "source", "permutation", "si_sdr", "si_sdr_unprocessed", "improvement"]


def si_sdr(est, ref):
    """Scale-invariant SDR in dB, clipped to [-60, 60].

    alpha = <est, ref> / ||ref||^2 ; SI-SDR = 10 log10(||alpha ref||^2 / ||alpha ref - est||^2)
    """
    est = np.asarray(est, dtype=np.float64).ravel()
    ref = np.asarray(ref, dtype=np.float64).ravel()
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: {est.shape} vs {ref.shape}")
    ref_energy = np.dot(ref, ref)
    if ref_energy == 0:
        raise ValueError("reference signal is all zeros")
    target = np.dot(est, ref) / ref_energy * ref
    noise = target - est
    t, n = np.dot(target, target), np.dot(noise, noise)
    if t == 0:
        return -SISDR_CAP
    if n == 0:
        return SISDR_CAP
    return float(np.clip(10.0 * np.log10(t / n), -SISDR_CAP, SISDR_CAP))


@dataclass
class EvalReport:
    si_sdr: list
    permutation: tuple
    unprocessed: list
    improvement: list
    name: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def mean(self):
        return float(np.mean(self.si_sdr))

    @property
    def mean_improvement(self):
        return float(np.mean(self.improvement))

    def rows(self):
        return [
            {
                "mixture": self.name,
                "source": c + 1,
                "permutation": self.permutation[c] + 1,
                "si_sdr": self.si_sdr[c],
                "si_sdr_unprocessed": self.unprocessed[c],
                "improvement": self.improvement[c],
            }
            for c in range(len(self.si_sdr))
        ]


def _trim(signals):
    n = min(len(s) for s in signals)
    if any(len(s) != n for s in signals):
        warnings.warn(f"trimming signals to {n} samples", RuntimeWarning)
    return [np.asarray(s)[:n] for s in signals]


def eval_mixture(outputs, refs, mixture=None, name=""):
    """Score C outputs against C references under the best permutation.

    ``permutation[c]`` is the output index assigned to reference c. The
    unprocessed baseline scores ``mixture`` (reference-mic signal) against
    each reference; it defaults to the zero-improvement case when omitted.
    """
    outputs = [np.asarray(o, dtype=float).ravel() for o in outputs]
    refs = [np.asarray(r, dtype=float).ravel() for r in refs]
    if len(outputs) != len(refs):
        raise ValueError(f"{len(outputs)} outputs for {len(refs)} references")
    C = len(refs)
    sigs = _trim(outputs + refs + ([np.asarray(mixture).ravel()] if mixture is not None else []))
    outputs, refs = sigs[:C], sigs[C : 2 * C]
    scores = np.array([[si_sdr(o, r) for r in refs] for o in outputs])  # [output, ref]
    best, best_perm = -np.inf, None
    for perm in itertools.permutations(range(C)):
        total = sum(scores[perm[c], c] for c in range(C))
        if total > best:
            best, best_perm = total, perm
    per_source = [float(scores[best_perm[c], c]) for c in range(C)]
    if mixture is not None:
        unprocessed = [si_sdr(sigs[-1], r) for r in refs]
    else:
        unprocessed = per_source
    return EvalReport(
        si_sdr=per_source,
        permutation=tuple(best_perm),
        unprocessed=unprocessed,
        improvement=[s - u for s, u in zip(per_source, unprocessed)],
        name=name,
    )


def write_csv(reports, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        writer.writeheader()
        for rep in reports:
            for row in rep.rows():
                writer.writerow(row)


def aggregate(reports):
    if not reports:
        return {"num_mixtures": 0}
    sdr = [s for r in reports for s in r.si_sdr]
    unp = [s for r in reports for s in r.unprocessed]
    imp = [s for r in reports for s in r.improvement]
    return {
        "num_mixtures": len(reports),
        "num_sources": len(sdr),
        "mean_si_sdr": float(np.mean(sdr)),
        "mean_si_sdr_unprocessed": float(np.mean(unp)),
        "mean_improvement": float(np.mean(imp)),
    }


def write_json(reports, path):
    payload = {"aggregate": aggregate(reports), "mixtures": [asdict(r) for r in reports]}
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
