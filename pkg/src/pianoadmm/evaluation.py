"""Note-level scoring against ground truth, and MIDI input/output."""

import io
import json
from dataclasses import asdict, dataclass, field

import mido
import numpy as np
from scipy.optimize import linear_sum_assignment

from .transcriber import NoteEvent

SUSTAIN = 64
DURATION_FRACTION = 0.2
# absorbs float noise in second-valued comparisons; tolerances are inclusive
TIME_EPS = 1e-9


class MidiError(ValueError):
    pass


@dataclass
class EvalReport:
    TP: int
    FP: int
    FN: int
    precision: float
    recall: float
    f_measure: float
    tolerance: float
    duration_mode: bool = False
    warnings: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    def table(self):
        rows = [("TP", "%d" % self.TP), ("FP", "%d" % self.FP), ("FN", "%d" % self.FN),
                ("precision", "%.6f" % self.precision),
                ("recall", "%.6f" % self.recall),
                ("f_measure", "%.6f" % self.f_measure),
                ("tolerance_s", "%.3f" % self.tolerance),
                ("duration_mode", str(self.duration_mode))]
        width = max(len(k) for k, _ in rows)
        return "\n".join("%-*s  %s" % (width, k, v) for k, v in rows)


# -- MIDI ------------------------------------------------------------------------

def parse_midi(data, warnings=None):
    """Ground-truth notes from Standard MIDI File bytes.

    Notes sounding while the sustain pedal is down at their note-off are
    extended to the first pedal release after the note-off. A re-struck
    pitch ends the sounding note of that pitch first. Notes still open at
    the end of the file are closed there and reported in ``warnings``.
    """
    try:
        mid = mido.MidiFile(file=io.BytesIO(data))
    except (OSError, EOFError, ValueError, KeyError, IndexError) as exc:
        raise MidiError("malformed MIDI data: %s" % exc) from exc
    if warnings is None:
        warnings = []
    t = 0.0
    active = {}     # (channel, pitch) -> (onset, velocity)
    held = {}       # (channel, pitch) -> (onset, velocity), released under pedal
    pedal = {}
    notes = []

    def close(key, onset, end):
        notes.append(NoteEvent(key[1], onset, max(end - onset, 0.0), 0.0))

    # iterating a MidiFile merges tracks and converts ticks with the tempo map
    for msg in mid:
        t += msg.time
        if msg.type == "note_on" and msg.velocity > 0:
            key = (msg.channel, msg.note)
            if key in active:
                close(key, active.pop(key)[0], t)
            if key in held:
                close(key, held.pop(key)[0], t)
            active[key] = (t, msg.velocity)
        elif msg.type in ("note_off", "note_on"):
            key = (msg.channel, msg.note)
            if key not in active:
                continue
            onset, vel = active.pop(key)
            if pedal.get(msg.channel, False):
                held[key] = (onset, vel)
            else:
                close(key, onset, t)
        elif msg.type == "control_change" and msg.control == SUSTAIN:
            down = msg.value >= 64
            was = pedal.get(msg.channel, False)
            pedal[msg.channel] = down
            if was and not down:
                for key in [k for k in held if k[0] == msg.channel]:
                    close(key, held.pop(key)[0], t)
    for key, (onset, _) in list(active.items()) + list(held.items()):
        if key in active:
            warnings.append("dangling note-on for pitch %d at %.3f s" % (key[1], onset))
        close(key, onset, t)
    return sorted(notes, key=lambda e: (e.onset, e.pitch))


def read_midi(path, warnings=None):
    with open(path, "rb") as fh:
        return parse_midi(fh.read(), warnings)


def midi_bytes(events, ticks_per_beat=480, bpm=120.0, velocity=64):
    """Format-0 SMF with a fixed tempo and constant velocity."""
    mid = mido.MidiFile(type=0, ticks_per_beat=ticks_per_beat)
    track = mido.MidiTrack()
    mid.tracks.append(track)
    tempo = mido.bpm2tempo(bpm)
    track.append(mido.MetaMessage("set_tempo", tempo=tempo, time=0))
    timeline = []
    for e in events:
        on = int(round(mido.second2tick(e.onset, ticks_per_beat, tempo)))
        off = int(round(mido.second2tick(e.onset + e.duration, ticks_per_beat, tempo)))
        timeline.append((on, 1, e.pitch))
        timeline.append((max(off, on), 0, e.pitch))
    last = 0
    # note-offs sort before note-ons at the same tick
    for tick, is_on, pitch in sorted(timeline):
        kind = "note_on" if is_on else "note_off"
        track.append(mido.Message(kind, note=int(pitch), velocity=velocity if is_on else 0,
                                  time=tick - last))
        last = tick
    track.append(mido.MetaMessage("end_of_track", time=0))
    buf = io.BytesIO()
    mid.save(file=buf)
    return buf.getvalue()


def write_midi(path, events, **kw):
    with open(path, "wb") as fh:
        fh.write(midi_bytes(events, **kw))


# -- matching ----------------------------------------------------------------------

def _compatible(p, g, tolerance, duration):
    if p.pitch != g.pitch or abs(p.onset - g.onset) > tolerance + TIME_EPS:
        return False
    if duration:
        return abs(p.duration - g.duration) <= DURATION_FRACTION * g.duration + TIME_EPS
    return True


def _order(events):
    return sorted(events, key=lambda e: (e.onset, e.pitch, e.duration))


def _greedy(pred, gt, tolerance, duration):
    pred, gt = _order(pred), _order(gt)
    used = [False] * len(gt)
    tp = 0
    for p in pred:
        best, best_d = None, None
        for j, g in enumerate(gt):
            if used[j] or not _compatible(p, g, tolerance, duration):
                continue
            d = abs(p.onset - g.onset)
            if best is None or d < best_d:
                best, best_d = j, d
        if best is not None:
            used[best] = True
            tp += 1
    return tp


def _optimal(pred, gt, tolerance, duration):
    if not pred or not gt:
        return 0
    ok = np.array([[_compatible(p, g, tolerance, duration) for g in gt] for p in pred])
    rows, cols = linear_sum_assignment(ok, maximize=True)
    return int(ok[rows, cols].sum())


def _counts(pred, gt, tolerance, duration, optimal):
    tp = (_optimal if optimal else _greedy)(pred, gt, tolerance, duration)
    return tp, len(pred) - tp, len(gt) - tp


def match_onsets(pred, gt, tolerance_sec, optimal=False):
    """``(TP, FP, FN)`` with one-to-one, same-pitch, onset-within-tolerance matches.

    The default greedy matcher visits predictions in onset order and takes
    the nearest unmatched ground-truth note; ``optimal`` maximizes the
    number of matches instead.
    """
    return _counts(pred, gt, tolerance_sec, False, optimal)


def match_with_duration(pred, gt, tolerance_sec, optimal=False):
    """As :func:`match_onsets`, also requiring durations within 20 percent."""
    return _counts(pred, gt, tolerance_sec, True, optimal)


def prf(tp, fp, fn):
    if tp + fp == 0 and tp + fn == 0:
        return 1.0, 1.0, 1.0
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def score(pred, gt, tolerance_sec, duration_mode=False, optimal=False):
    match = match_with_duration if duration_mode else match_onsets
    tp, fp, fn = match(pred, gt, tolerance_sec, optimal)
    p, r, f = prf(tp, fp, fn)
    return EvalReport(tp, fp, fn, p, r, f, tolerance_sec, duration_mode)
