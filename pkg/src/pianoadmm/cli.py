"""Command-line interface.

Exit codes: 0 success, 1 I/O failure, 2 validation or calibration failure,
3 numerical divergence.
"""

import argparse
import csv
import json
import logging
import sys
from contextlib import nullcontext

import numpy as np

from . import __version__
from .admm import CollectorSolveError, DivergenceError, SolveOptions
from .dictionary import (DictionaryError, build_dictionary, load_dictionary,
                         load_note_directory, save_dictionary)
from .evaluation import MidiError, read_midi, score, write_midi
from .frontend import FrontendConfig, WavError, logfreq_spectrogram, read_wav
from .refiner import RefineOptions, RefinerError
from .synth import (NoteSpec, events_to_notes, gen_activity, gen_dictionary,
                    gen_spectrogram, random_events)
from .prox import MarkovConfig
from .tensors import Spectrogram, flatten, load_tensor, save_tensor
from .transcriber import (CalibrationError, PipelineConfig, calibrate, read_csv,
                          transcribe_spectrogram, write_csv)

log = logging.getLogger("pianoadmm")

EXIT_OK, EXIT_IO, EXIT_INVALID, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(ValueError):
    pass


DEFAULTS = {
    "dict-build": {"pattern_frames": None, "pitches": None},
    "calibrate": {"margin": 0.10, "iters": 300, "L_M": None, "seed": 0},
    "transcribe": {"lambda1": 0.1, "lambda2": 0.4, "iters": 300, "decode": "direct",
                   "refine_durations": False, "refine_iters": 200, "L_M": None,
                   "seed": 0, "rho": 1.0, "mu_mode": "relaxed",
                   "collector": "exact", "overlap": None},
    "eval": {"tolerance_ms": 50.0, "duration": False, "optimal": False},
    "synth": {"keys": 5, "pattern_frames": 16, "bins": 60, "frames": 128,
              "noise": 0.0, "seed": 0, "min_length": 3, "overlap": 1,
              "n_events": 0},
}
# default template span for dict-build
PATTERN_SECONDS = 3.0


def _add_frontend(p):
    g = p.add_argument_group("front end")
    g.add_argument("--sample-rate", type=int)
    g.add_argument("--window", type=int)
    g.add_argument("--hop", type=int)
    g.add_argument("--bins-per-octave", type=int)
    g.add_argument("--f-min", type=float)
    g.add_argument("--f-max", type=float)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="pianoadmm",
        description="Piano transcription with spectro-temporal patterns and "
                    "consensus ADMM.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--config", help="JSON file with option defaults")
    parser.add_argument("--threads", type=int, help="cap on BLAS worker threads")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dict-build", help="pattern dictionary from note recordings")
    p.add_argument("--notes-dir", required=True, help="directory of <pitch>.wav files")
    p.add_argument("--out", required=True)
    p.add_argument("--pattern-frames", dest="pattern_frames", type=int, help="L")
    p.add_argument("--pitches", help="comma-separated pitches that must be present")
    _add_frontend(p)

    p = sub.add_parser("calibrate", help="minimum activation from a soft note")
    p.add_argument("--dict", required=True)
    p.add_argument("--soft-note", required=True)
    p.add_argument("--margin", type=float)
    p.add_argument("--iters", type=int)
    p.add_argument("--L-M", dest="L_M", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("transcribe", help="audio or spectrogram to note list")
    p.add_argument("--dict", required=True)
    p.add_argument("--a-m", dest="a_m", type=float, help="minimum activation")
    p.add_argument("--calibration", help="JSON written by 'calibrate'")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--in", dest="input", help="WAV recording")
    src.add_argument("--in-spectrogram", dest="input_spec",
                     help="spectrogram container (role V)")
    p.add_argument("--out", required=True, help="CSV note list")
    p.add_argument("--midi-out", help="also write a Standard MIDI File")
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)
    p.add_argument("--iters", type=int, help="iterations per stage")
    p.add_argument("--rho", type=float)
    p.add_argument("--mu-mode", dest="mu_mode", choices=("safe", "relaxed"))
    p.add_argument("--collector", choices=("exact", "linearized"))
    p.add_argument("--seed", type=int)
    p.add_argument("--L-M", dest="L_M", type=int)
    p.add_argument("--overlap", type=int, help="window overlap O in frames")
    p.add_argument("--decode", choices=("direct", "hmm"))
    p.add_argument("--refine-durations", dest="refine_durations",
                   action="store_true", default=None)
    p.add_argument("--refine-iters", dest="refine_iters", type=int)
    p.add_argument("--dump-activity", dest="dump_activity",
                   help="CSV of the flattened KL x N activity")
    p.add_argument("--dump-residuals", dest="dump_residuals",
                   help="JSON residual and objective history")
    p.add_argument("--figures", help="directory for PNG figures (needs matplotlib)")
    p.add_argument("--reference", help="ground truth (MIDI or CSV) drawn in figures")

    p = sub.add_parser("eval", help="score a note list against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True, help="MIDI file or CSV note list")
    p.add_argument("--tolerance-ms", dest="tolerance_ms", type=float)
    p.add_argument("--duration", action="store_true", default=None)
    p.add_argument("--optimal", action="store_true", default=None,
                   help="maximum bipartite matching instead of greedy")
    p.add_argument("--out", help="JSON report")

    p = sub.add_parser("synth", help="synthetic dictionary, spectrogram and ground truth")
    p.add_argument("--keys", type=int)
    p.add_argument("--events", help="CSV with key,onset_frame,length_frames,gain")
    p.add_argument("--n-events", dest="n_events", type=int,
                   help="draw this many seeded random notes when --events is absent")
    p.add_argument("--noise", type=float, help="noise level")
    p.add_argument("--seed", type=int)
    p.add_argument("--pattern-frames", dest="pattern_frames", type=int)
    p.add_argument("--bins", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--min-length", dest="min_length", type=int)
    p.add_argument("--overlap", type=int)
    p.add_argument("--out-wavless", dest="out", required=True,
                   help="output prefix for .V, .P and .csv files")
    return parser


def effective_config(args):
    """Merge built-in defaults, the ``--config`` file and explicit flags."""
    cfg = dict(DEFAULTS.get(args.command, {}))
    fe = FrontendConfig().to_dict()
    file_cfg = {}
    if args.config:
        with open(args.config) as fh:
            file_cfg = json.load(fh)
        if not isinstance(file_cfg, dict):
            raise UsageError("--config must hold a JSON object")
        file_cfg = {k.replace("-", "_"): v for k, v in file_cfg.items()}
        section = file_cfg.pop(args.command.replace("-", "_"), {})
        file_cfg.update({k.replace("-", "_"): v for k, v in section.items()})
    for key, val in file_cfg.items():
        if key in fe:
            fe[key] = val
        elif key in cfg:
            cfg[key] = val
    for key, val in vars(args).items():
        if val is None or key in ("command", "config", "verbose"):
            continue
        if key in fe:
            fe[key] = val
        else:
            cfg[key] = val
    cfg["frontend"] = fe
    return cfg


def _sidecar(path, cfg, extra=None):
    meta = {"config": cfg, "version": __version__}
    if extra:
        meta.update(extra)
    with open(path + ".json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True, default=str)


def _check_positive(cfg, *keys):
    for k in keys:
        if cfg.get(k) is not None and cfg[k] < 0:
            raise UsageError("--%s must be non-negative" % k.replace("_", "-"))


def cmd_dict_build(cfg):
    fe = FrontendConfig(**cfg["frontend"])
    clips = load_note_directory(cfg["notes_dir"])
    pitches = None
    if cfg.get("pitches"):
        p = cfg["pitches"]
        pitches = [int(x) for x in (p.split(",") if isinstance(p, str) else p)]
    L = cfg.get("pattern_frames") or fe.frames_for_seconds(PATTERN_SECONDS)
    cfg["pattern_frames"] = L
    P = build_dictionary(clips, fe, int(L), pitches)
    save_dictionary(cfg["out"], P, fe, {"config": cfg})
    print("dictionary: K=%d L=%d M=%d -> %s" % (P.K, P.L, P.M, cfg["out"]))
    return EXIT_OK


def _pipeline(cfg, P, fe):
    L_M = cfg.get("L_M")
    solve = SolveOptions(iters=int(cfg.get("iters", 300)), rho=float(cfg.get("rho", 1.0)),
                         mu_mode=cfg.get("mu_mode", "relaxed"),
                         collector=cfg.get("collector", "exact"),
                         seed=int(cfg.get("seed", 0)))
    return PipelineConfig(frontend=fe, lambda1=float(cfg.get("lambda1", 0.1)),
                          lambda2=float(cfg.get("lambda2", 0.4)), L_M=L_M,
                          overlap=cfg.get("overlap"),
                          calibration_margin=float(cfg.get("margin", 0.10)),
                          use_refiner=bool(cfg.get("refine_durations", False)),
                          decode_mode=cfg.get("decode", "direct"), solve=solve,
                          refine=RefineOptions(iters=int(cfg.get("refine_iters", 200))))


def _load_dict(path, cfg):
    """Dictionary plus front end; Markov settings stored with it fill gaps."""
    P, fe = load_dictionary(path)
    with open(path + ".json") as fh:
        stored = json.load(fh).get("config") or {}
    if cfg.get("overlap") is None and stored.get("overlap") is not None:
        cfg["overlap"] = int(stored["overlap"])
    if cfg.get("L_M") is None and stored.get("min_length") is not None:
        cfg["L_M"] = int(stored["min_length"])
    if fe is None:
        fe = FrontendConfig(sample_rate=P.sample_rate, window=P.window, hop=P.hop,
                            f_max=P.sample_rate / 2.0)
    return P, fe


def cmd_calibrate(cfg):
    _check_positive(cfg, "margin")
    P, fe = _load_dict(cfg["dict"], cfg)
    pipe = _pipeline(cfg, P, fe)
    clip = read_wav(cfg["soft_note"])
    a_m = calibrate(clip, P, pipe)
    with open(cfg["out"], "w") as fh:
        json.dump({"a_m": a_m, "margin": pipe.calibration_margin}, fh, indent=2)
    _sidecar(cfg["out"], cfg)
    print("a_m = %.6g -> %s" % (a_m, cfg["out"]))
    return EXIT_OK


def load_spectrogram(path):
    data, header = load_tensor(path)
    if header.get("role") != "V":
        raise UsageError("%s is not a spectrogram container" % path)
    return Spectrogram(data, header.get("sample_rate", 22050), header.get("hop", 256),
                       header.get("window", 1024), header.get("freq_map"))


def save_spectrogram(path, V):
    save_tensor(path, V.data, "V", {"sample_rate": V.sample_rate, "hop": V.hop,
                                    "window": V.window,
                                    "freq_map": [float(f) for f in V.freq_map]})


def read_notes(path):
    if path.lower().endswith((".mid", ".midi", ".smf")):
        warnings = []
        notes = read_midi(path, warnings)
        for w in warnings:
            log.warning("%s: %s", path, w)
        return notes
    return read_csv(path)


def cmd_transcribe(cfg):
    _check_positive(cfg, "lambda1", "lambda2", "iters", "refine_iters")
    P, fe = _load_dict(cfg["dict"], cfg)
    a_m = cfg.get("a_m")
    if a_m is None and cfg.get("calibration"):
        with open(cfg["calibration"]) as fh:
            a_m = json.load(fh)["a_m"]
    if a_m is None:
        raise UsageError("need --a-m or --calibration")
    if not a_m > 0:
        raise UsageError("--a-m must be positive")
    pipe = _pipeline(cfg, P, fe)
    if cfg.get("input"):
        V = logfreq_spectrogram(read_wav(cfg["input"]), fe)
    else:
        V = load_spectrogram(cfg["input_spec"])
    if V.data.shape[0] != P.M:
        raise UsageError("spectrogram has %d bins, dictionary %d" % (V.data.shape[0], P.M))
    result = transcribe_spectrogram(V, P, float(a_m), pipe)
    write_csv(cfg["out"], result.events)
    _sidecar(cfg["out"], cfg, {"a_m": a_m, "pipeline": pipe.to_dict(),
                               "events": len(result.events)})
    if cfg.get("midi_out"):
        write_midi(cfg["midi_out"], result.events)
    if cfg.get("dump_activity"):
        F = flatten(result.A)
        with open(cfg["dump_activity"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["row", "key", "pitch", "template"]
                       + ["f%d" % n for n in range(F.shape[1])])
            for r in range(F.shape[0]):
                k, ell = divmod(r, P.L)
                w.writerow([r, k, P.pitch_map[k], ell] + ["%.6g" % v for v in F[r]])
    if cfg.get("dump_residuals"):
        hist = result.report.to_dict()
        if result.refine_report is not None:
            hist["refine"] = result.refine_report.to_dict()
        with open(cfg["dump_residuals"], "w") as fh:
            json.dump(hist, fh, indent=1)
    if cfg.get("figures"):
        from .plotting import render_transcription
        reference = read_notes(cfg["reference"]) if cfg.get("reference") else None
        for path in render_transcription(cfg["figures"], result, P.pitch_map,
                                         V.hop_seconds, reference):
            print("figure: %s" % path)
    print("%d notes -> %s" % (len(result.events), cfg["out"]))
    return EXIT_OK


def cmd_eval(cfg):
    tol = float(cfg["tolerance_ms"]) / 1000.0
    if tol < 0:
        raise UsageError("--tolerance-ms must be non-negative")
    pred = read_csv(cfg["pred"])
    gt = read_notes(cfg["gt"])
    rep = score(pred, gt, tol, bool(cfg.get("duration")), bool(cfg.get("optimal")))
    print(rep.table())
    if cfg.get("out"):
        with open(cfg["out"], "w") as fh:
            fh.write(rep.to_json())
        _sidecar(cfg["out"], cfg)
    return EXIT_OK


def read_event_specs(path):
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if rows and not rows[0][0].strip().lstrip("-").isdigit():
        rows = rows[1:]
    try:
        return [NoteSpec(int(r[0]), int(r[1]), int(r[2]), float(r[3])) for r in rows]
    except (IndexError, ValueError) as err:
        raise UsageError("%s: expected key,onset_frame,length_frames,gain rows" % path) from err


def cmd_synth(cfg):
    _check_positive(cfg, "noise")
    K, L, M, N = (int(cfg[k]) for k in ("keys", "pattern_frames", "bins", "frames"))
    mc = MarkovConfig(int(cfg["min_length"]), int(cfg["overlap"]), L)
    seed = int(cfg["seed"])
    if cfg.get("events"):
        events = read_event_specs(cfg["events"])
    elif cfg.get("n_events"):
        events = random_events(K, N, int(cfg["n_events"]), mc, seed=seed)
    else:
        events = []
    P = gen_dictionary(K, L, M, seed)
    A = gen_activity(K, L, N, events, mc)
    V = gen_spectrogram(P.data, A, float(cfg["noise"]), seed)
    prefix = cfg["out"]
    save_spectrogram(prefix + ".V", V)
    save_dictionary(prefix + ".P", P, extra={"config": cfg})
    save_tensor(prefix + ".A", A, "A")
    write_csv(prefix + ".csv", events_to_notes(events, P.pitch_map, V.hop_seconds))
    _sidecar(prefix + ".csv", cfg, {"events": len(events)})
    print("synthetic piece: K=%d L=%d M=%d N=%d, %d notes -> %s.{V,P,A,csv}"
          % (K, L, M, N, len(events), prefix))
    return EXIT_OK


COMMANDS = {"dict-build": cmd_dict_build, "calibrate": cmd_calibrate,
            "transcribe": cmd_transcribe, "eval": cmd_eval, "synth": cmd_synth}


def _limits(threads):
    if not threads:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(threads))


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = effective_config(args)
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be >= 1")
        with _limits(args.threads):
            return COMMANDS[args.command](cfg)
    except (DivergenceError, CollectorSolveError, RefinerError) as err:
        print("error: numerical divergence: %s" % err, file=sys.stderr)
        return EXIT_DIVERGED
    except (WavError, MidiError, OSError) as err:
        print("error: %s" % err, file=sys.stderr)
        return EXIT_IO
    except (CalibrationError, DictionaryError, UsageError, ValueError, KeyError) as err:
        print("error: %s" % err, file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
