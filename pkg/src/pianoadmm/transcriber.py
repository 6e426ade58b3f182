"""From audio to note events: calibration, activity estimation, decoding."""

import csv
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import prox
from .admm import ObjectiveSpec, SolveOptions, two_stage_solve
from .frontend import FrontendConfig, logfreq_spectrogram
from .refiner import RefineOptions, init_bg, refine

log = logging.getLogger(__name__)

CSV_HEADER = ("onset_sec", "pitch_midi", "duration_sec", "intensity")
MIN_NOTE_SECONDS = 0.1
# activations below this are treated as silence during calibration
SILENCE_LEVEL = 1e-9


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class NoteEvent:
    pitch: int
    onset: float
    duration: float
    intensity: float = 0.0

    def __post_init__(self):
        if self.onset < 0 or self.duration < 0 or self.intensity < 0:
            raise ValueError("onset, duration and intensity must be >= 0")


@dataclass
class PipelineConfig:
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    lambda1: float = 0.1
    lambda2: float = 0.4
    L_M: int = None
    overlap: int = None
    calibration_margin: float = 0.10
    use_refiner: bool = False
    decode_mode: str = "direct"
    objective_name: str = "h_f"
    solve: SolveOptions = field(default_factory=SolveOptions)
    refine: RefineOptions = field(default_factory=RefineOptions)

    def __post_init__(self):
        if not 0 <= self.calibration_margin < 1:
            raise ValueError("calibration_margin must be in [0, 1)")
        if self.objective_name not in ("h_b", "h_c", "h_d", "h_e", "h_f"):
            raise ValueError("objective_name must be one of h_b..h_f")
        if self.decode_mode not in ("direct", "hmm"):
            raise ValueError("decode_mode must be 'direct' or 'hmm'")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1 and lambda2 must be >= 0")
        if self.L_M is None:
            self.L_M = self.frontend.frames_for_seconds(MIN_NOTE_SECONDS)
        if self.L_M < 1:
            raise ValueError("L_M must be >= 1")
        if self.overlap is None:
            self.overlap = self.frontend.overlap

    def markov(self, L):
        return prox.MarkovConfig(min(self.L_M, L), self.overlap, L)

    def objective(self, name, L, a_m=None):
        return ObjectiveSpec.named(name, self.lambda1, self.lambda2, a_m,
                                   self.markov(L))

    def to_dict(self):
        return {"frontend": self.frontend.to_dict(), "lambda1": self.lambda1,
                "lambda2": self.lambda2, "L_M": self.L_M, "overlap": self.overlap,
                "calibration_margin": self.calibration_margin,
                "use_refiner": self.use_refiner, "decode_mode": self.decode_mode,
                "objective": self.objective_name,
                "iters": self.solve.iters, "rho": self.solve.rho,
                "mu_mode": self.solve.mu_mode, "collector": self.solve.collector,
                "seed": self.solve.seed, "refine_iters": self.refine.iters}


def _spectrogram(recording, cfg):
    if hasattr(recording, "samples"):
        return logfreq_spectrogram(recording, cfg.frontend)
    return recording


def calibrate(soft_note, P, cfg):
    """Minimum activation ``a_m`` from a softly played single note.

    ``soft_note`` is an :class:`AudioClip` or an already computed spectrogram.
    """
    spec = _spectrogram(soft_note, cfg)
    objective = cfg.objective("h_e", P.L)
    rep = two_stage_solve(spec, P, objective, cfg.solve)
    peak = float(rep.A.max(initial=0.0))
    if not peak > SILENCE_LEVEL:
        raise CalibrationError("calibration note produced no activation "
                               "(silent input?)")
    return (1.0 - cfg.calibration_margin) * peak


def is_onset(row, n, a_m, L_M):
    """Detection predicate on one key's first-template activations."""
    v = row[n]
    if not v >= a_m:
        return False
    lo, hi = max(0, n - L_M), min(len(row), n + L_M + 1)
    return bool(np.all(row[lo:n] < v) and np.all(row[n + 1:hi] <= v))


def _onset_frames(A, a_m, L_M):
    out = []
    for k in range(A.shape[0]):
        row = A[k, 0]
        for n in np.flatnonzero(row >= a_m):
            if is_onset(row, int(n), a_m, L_M):
                out.append((k, int(n)))
    return out


def _events(frames, A, pitch_map, hop_seconds, lengths):
    events = [NoteEvent(int(pitch_map[k]), n * hop_seconds, ln * hop_seconds,
                        float(A[k, 0, n]))
              for (k, n), ln in zip(frames, lengths)]
    return sorted(events, key=lambda e: (e.onset, e.pitch))


def detect_onsets(A, a_m, L_M, hop_seconds, pitch_map=None):
    """Onsets where the first template peaks above ``a_m`` within ``+-L_M`` frames.

    Plateaus report only their first frame.
    """
    A = np.asarray(A, dtype=np.float64)
    pitch_map = list(range(A.shape[0])) if pitch_map is None else pitch_map
    frames = _onset_frames(A, a_m, L_M)
    return _events(frames, A, pitch_map, hop_seconds, [0] * len(frames))


def chain_length(source, k, n, test):
    """Largest ``l`` such that ``test`` holds on diagonal entries 0..l-1."""
    _, L, N = source.shape
    ell = 0
    while ell < L and n + ell < N and test(source[k, ell, n + ell]):
        ell += 1
    return ell


def estimate_durations(source, events, a_m, hop_seconds, pitch_map=None,
                       binary=False):
    """Set each event's duration from the diagonal chain through its onset.

    With ``binary`` the chain follows ``source == 1`` (a refined B tensor),
    otherwise ``source >= a_m``.
    """
    source = np.asarray(source, dtype=np.float64)
    K = source.shape[0]
    pitch_map = list(range(K)) if pitch_map is None else list(pitch_map)
    index = {int(p): k for k, p in enumerate(pitch_map)}
    test = (lambda v: v == 1.0) if binary else (lambda v: v >= a_m)
    out = []
    for ev in events:
        k = index[int(ev.pitch)]
        n = int(round(ev.onset / hop_seconds))
        ell = chain_length(source, k, n, test)
        out.append(replace(ev, duration=ell * hop_seconds))
    return out


def decode_hmm(A, a_m, mc, hop_seconds, pitch_map=None, L_M=None):
    """Decode notes along the optimal Markov state path of each key.

    Onsets are frames where the path sits in the first state and the
    first-template activation passes the detection predicate; the duration
    follows the diagonal while the path's window covers it and the
    activation stays at or above ``a_m``.
    """
    A = np.asarray(A, dtype=np.float64)
    K, L, N = A.shape
    pitch_map = list(range(K)) if pitch_map is None else pitch_map
    L_M = mc.min_length if L_M is None else L_M
    states, _ = prox.markov_dp(prox.markov_cost_matrix(np.maximum(A, 0.0), mc), mc)
    frames, lengths = [], []
    for k, n in _onset_frames(A, a_m, L_M):
        if states[k, n] != 0:
            continue
        ell = 0
        while ell < L and n + ell < N:
            s = states[k, n + ell]
            if not (s <= ell <= s + mc.overlap and A[k, ell, n + ell] >= a_m):
                break
            ell += 1
        frames.append((k, n))
        lengths.append(ell)
    return _events(frames, A, pitch_map, hop_seconds, lengths)


@dataclass
class TranscriptionResult:
    events: list
    A: np.ndarray
    report: object
    B: np.ndarray = None
    G: np.ndarray = None
    refine_report: object = None


def transcribe_spectrogram(V, P, a_m, cfg):
    """Activity estimation and decoding for a precomputed spectrogram."""
    if not a_m > 0:
        raise ValueError("a_m must be positive")
    hop_seconds = V.hop_seconds if hasattr(V, "hop_seconds") else cfg.frontend.hop_seconds
    name = cfg.objective_name
    objective = cfg.objective(name, P.L, a_m if name == "h_f" else None)
    mc = objective.markov
    rep = two_stage_solve(V, P, objective, cfg.solve)
    A = rep.A
    if cfg.decode_mode == "hmm":
        events = decode_hmm(A, a_m, mc, hop_seconds, P.pitch_map, cfg.L_M)
    else:
        events = detect_onsets(A, a_m, cfg.L_M, hop_seconds, P.pitch_map)
        events = estimate_durations(A, events, a_m, hop_seconds, P.pitch_map)
    result = TranscriptionResult(events, A, rep)
    if cfg.use_refiner:
        B0, G0 = init_bg(A, a_m)
        B, G, rrep = refine(V, P, B0, G0, a_m, mc, cfg.refine)
        result.events = estimate_durations(B, events, a_m, hop_seconds,
                                           P.pitch_map, binary=True)
        result.B, result.G, result.refine_report = B, G, rrep
    return result


def transcribe(recording, P, a_m, cfg):
    """Audio (or spectrogram) in, sorted note events out."""
    return transcribe_spectrogram(_spectrogram(recording, cfg), P, a_m, cfg).events


def write_csv(path, events):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for e in sorted(events, key=lambda e: (e.onset, e.pitch)):
            w.writerow(["%.6f" % e.onset, e.pitch, "%.6f" % e.duration,
                        "%.6f" % e.intensity])


def read_csv(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    if set(CSV_HEADER) - set(reader.fieldnames or ()):
        raise ValueError("%s: expected columns %s" % (path, ",".join(CSV_HEADER)))
    return [NoteEvent(int(r["pitch_midi"]), float(r["onset_sec"]),
                      float(r["duration_sec"]), float(r.get("intensity") or 0.0))
            for r in rows]
