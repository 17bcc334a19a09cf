"""Command-line entry points: simulate, run, css, eval.

Every command writes ``manifest.json`` into its output directory. A failed
command leaves the manifest with ``"status": "failed"`` and exits nonzero.
Set ``MCSEP_NUM_THREADS`` to cap BLAS/numba threads.
"""
import argparse
from datetime import datetime, timezone
import json
import os
from pathlib import Path
import sys
import traceback

import numpy as np

from . import __version__
from .css import CssConfig, run_css
from .metrics import eval_mixture, aggregate, write_csv, write_json
from .pipeline import TOPOLOGIES, config_from_dict, run_pipeline, with_sample_rate
from .simulate import PROFILES, load_bundle, sample_scenario, save_bundle, speech_like_source, synthesize_mixture
from .spectral import Waveform
from .wavio import read_wav, write_wav

DEFAULT_DURATION_S = 4.0


class CliError(Exception):
    pass


def _manifest(out_dir, command, args, status, **extra):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "command": command,
        "args": {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"},
        "tool_version": __version__,
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "status": status,
        **extra,
    }
    (out_dir / "manifest.json").write_text(json.dumps(payload, indent=2, sort_keys=True, default=str))


def _bundle_dirs(dataset):
    root = Path(dataset)
    if not root.is_dir():
        raise CliError(f"dataset directory not found: {root}")
    return sorted(p for p in root.iterdir() if (p / "scenario.json").is_file())


def _load_config(path):
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise CliError(f"config not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"config {path} is not valid JSON: {exc}") from None
    topo = raw.get("topology")
    if topo not in TOPOLOGIES:
        raise CliError(f"unknown topology {topo!r}; valid topologies: {', '.join(TOPOLOGIES)}")
    return raw, path.parent


# --------------------------------------------------------------------------


def cmd_simulate(args):
    if args.n < 0:
        raise CliError("-n must be >= 0")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for i in range(args.n):
        rng = np.random.default_rng([args.seed, i])
        scn, geom = sample_scenario(args.profile, rng, num_sources=args.speakers, seed=args.seed * 100003 + i)
        fs = scn.sample_rate
        n = int(round(args.duration * fs))
        sources = [speech_like_source(n, fs, rng) for _ in range(args.speakers)]
        bundle = synthesize_mixture(sources, scn, geom)
        name = f"mix{i:04d}"
        save_bundle(bundle, out / name)
        names.append(name)
    _manifest(out, "simulate", args, "ok", seed=args.seed, mixtures=names)
    return 0


def cmd_run(args):
    raw, base = _load_config(args.config)
    dirs = _bundle_dirs(args.dataset)
    out = Path(args.out_dir)
    done = []
    for d in dirs:
        bundle = load_bundle(d)
        cfg = with_sample_rate(config_from_dict(raw, base_dir=base), bundle.sample_rate)
        res = run_pipeline(Waveform(bundle.mixture, bundle.sample_rate), cfg, references=bundle.direct)
        dest = out / d.name
        for c, w in enumerate(res.waveforms):
            write_wav(dest / f"est_c{c + 1}.wav", w, bundle.sample_rate)
        if args.save_intermediates and res.intermediates.get("bf") is not None:
            from .spectral import istft

            bf = istft(res.intermediates["bf"], cfg.stft, out_len=bundle.mixture.shape[-1])
            bf = bf / res.intermediates["trace"].scale
            for c, w in enumerate(bf):
                write_wav(dest / f"bf_c{c + 1}.wav", w, bundle.sample_rate)
        done.append(d.name)
    _manifest(out, "run", args, "ok", config=raw, dataset=str(args.dataset), mixtures=done)
    return 0


def cmd_css(args):
    raw, base = _load_config(args.config)
    src = Path(args.input)
    refs = None
    if src.is_dir():
        bundle = load_bundle(src)
        x, fs, refs = bundle.mixture, bundle.sample_rate, bundle.direct
    elif src.is_file():
        x, fs = read_wav(src, mmap=True)
    else:
        raise CliError(f"input not found: {src}")
    css_cfg = CssConfig(
        block_s=args.block_s, shift_s=args.shift_s, suppress_gain=args.suppress_gain, counting=args.counting
    )
    if refs is None and (css_cfg.counting == "oracle" or "oracle" in json.dumps(raw.get("separators", {}))):
        raise CliError("oracle counting or oracle separators need a bundle directory with direct_cN.wav references")
    cfg = config_from_dict(raw, base_dir=base, sample_rate=fs)
    res = run_css(Waveform(np.asarray(x, dtype=float), fs), cfg, css_cfg, references=refs)
    out = Path(args.out_dir)
    for k, s in enumerate(res.streams):
        write_wav(out / f"stream{k + 1}.wav", s, fs)
    _manifest(
        out, "css", args, "ok", config=raw,
        blocks=[[b.start, b.stop] for b in res.blocks],
        permutations=[list(map(int, p)) for p in res.permutations],
    )
    return 0


def cmd_eval(args):
    est_root, ref_root = Path(args.est_dir), Path(args.ref_dir)
    refs = {d.name: d for d in _bundle_dirs(ref_root)}
    if args.unprocessed:
        ests = dict(refs)
    else:
        if not est_root.is_dir():
            raise CliError(f"estimate directory not found: {est_root}")
        ests = {d.name: d for d in sorted(est_root.iterdir()) if d.is_dir() and any(d.glob("est_c*.wav"))}
    missing = sorted(set(refs) ^ set(ests))
    if missing:
        raise CliError("unmatched mixtures between estimates and references: " + ", ".join(missing))
    reports = []
    for name in sorted(refs):
        meta = json.loads((refs[name] / "scenario.json").read_text())
        C = meta["num_sources"]
        q = meta.get("geometry", {}).get("reference_index", 0)
        direct = [read_wav(refs[name] / f"direct_c{c + 1}.wav")[0][q] for c in range(C)]
        mix = read_wav(refs[name] / "mixture.wav")[0][q]
        if args.unprocessed:
            outs = [mix] * C
        else:
            paths = [ests[name] / f"est_c{c + 1}.wav" for c in range(C)]
            absent = [str(p) for p in paths if not p.is_file()]
            if absent:
                raise CliError("missing estimate files: " + ", ".join(absent))
            outs = [read_wav(p)[0][0] for p in paths]
        reports.append(eval_mixture(outs, direct, mix, name=name))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(reports, out / "report.csv")
    write_json(reports, out / "report.json")
    _manifest(out, "eval", args, "ok", aggregate=aggregate(reports))
    print(json.dumps(aggregate(reports), indent=2))
    return 0


# --------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="mcsep", description="multi-microphone speech separation experiments")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate a dataset of reverberant mixtures")
    s.add_argument("out_dir", type=Path)
    s.add_argument("--profile", choices=sorted(PROFILES), default="smswsj_like")
    s.add_argument("-n", type=int, default=20, help="number of mixtures")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--speakers", type=int, default=2)
    s.add_argument("--duration", type=float, default=DEFAULT_DURATION_S, help="seconds per mixture")
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("run", help="run a pipeline config over a dataset")
    r.add_argument("dataset", type=Path)
    r.add_argument("config", type=Path)
    r.add_argument("out_dir", type=Path)
    r.add_argument("--save-intermediates", action="store_true", help="also write beamformed signals")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("css", help="block-online separation of a continuous stream")
    c.add_argument("input", type=Path, help="stream WAV or a bundle directory (for oracle references)")
    c.add_argument("config", type=Path)
    c.add_argument("out_dir", type=Path)
    c.add_argument("--block-s", type=float, default=2.424)
    c.add_argument("--shift-s", type=float, default=1.2)
    c.add_argument("--suppress-gain", type=float, default=1e-3)
    c.add_argument("--counting", choices=["oracle", "none"], default="oracle")
    c.set_defaults(func=cmd_css)

    e = sub.add_parser("eval", help="score separated outputs against direct-path references")
    e.add_argument("est_dir", type=Path)
    e.add_argument("ref_dir", type=Path)
    e.add_argument("out_dir", type=Path)
    e.add_argument("--unprocessed", action="store_true", help="score the reference-mic mixture instead")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes a nonzero exit
        out = getattr(args, "out_dir", None)
        if out is not None:
            try:
                _manifest(out, args.command, args, "failed", error=str(exc))
            except OSError:
                pass
        if os.environ.get("MCSEP_DEBUG"):
            traceback.print_exc()
        print(f"mcsep {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
