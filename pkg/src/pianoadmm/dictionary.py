"""Pattern dictionary from single-note recordings."""

import json
import os
import re

import numpy as np

from .frontend import FrontendConfig, logfreq_spectrogram, read_wav
from .tensors import PatternDictionary, load_tensor, save_tensor

SILENCE_RATIO = 1e-6


class DictionaryError(ValueError):
    pass


def trim_leading_silence(V, ratio=SILENCE_RATIO):
    """Drop leading columns whose energy is below ``ratio`` times the peak."""
    energy = V.sum(axis=0)
    peak = energy.max(initial=0.0)
    if peak <= 0:
        return V
    first = int(np.argmax(energy >= ratio * peak))
    return V[:, first:]


def build_dictionary(note_clips, cfg, L, pitches=None):
    """Stack the first ``L`` spectrogram frames of each note into ``P``.

    ``note_clips`` is a list of ``(midi_pitch, AudioClip)``. Templates keep
    their natural energy decay; nothing is normalized. When ``pitches`` is
    given, every listed pitch must have a clip.
    """
    seen = {}
    for pitch, clip in note_clips:
        pitch = int(pitch)
        if pitch in seen:
            raise DictionaryError("duplicate pitch %d" % pitch)
        seen[pitch] = clip
    if pitches is not None:
        for p in pitches:
            if int(p) not in seen:
                raise DictionaryError("missing pitch %d" % int(p))
        seen = {int(p): seen[int(p)] for p in pitches}
    if not seen:
        raise DictionaryError("no note recordings given")
    order = sorted(seen)
    slices = []
    freq_map = None
    for pitch in order:
        spec = logfreq_spectrogram(seen[pitch], cfg)
        V = trim_leading_silence(spec.data)
        if V.shape[1] < L:
            raise DictionaryError("clip too short for pitch %d: %d frames, need %d"
                                  % (pitch, V.shape[1], L))
        slices.append(V[:, :L])
        freq_map = spec.freq_map
    P = np.stack(slices, axis=2)
    return PatternDictionary(P, order, cfg.sample_rate, cfg.hop, cfg.window,
                             freq_map)


_PITCH_FILE = re.compile(r"^(\d{1,3})\.wav$", re.IGNORECASE)


def load_note_directory(path):
    """Read ``<pitch>.wav`` files from a directory as ``(pitch, clip)`` pairs."""
    out = []
    for name in sorted(os.listdir(path)):
        m = _PITCH_FILE.match(name)
        if m:
            out.append((int(m.group(1)), read_wav(os.path.join(path, name))))
    return out


def save_dictionary(path, P, cfg=None, extra=None):
    path = os.fspath(path)
    save_tensor(path, P.data, "P")
    meta = {"pitch_map": P.pitch_map, "sample_rate": P.sample_rate,
            "hop": P.hop, "window": P.window,
            "freq_map": None if P.freq_map is None else list(map(float, P.freq_map))}
    if cfg is not None:
        meta["frontend"] = cfg.to_dict()
    if extra:
        meta.update(extra)
    with open(path + ".json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def load_dictionary(path):
    path = os.fspath(path)
    data, header = load_tensor(path)
    if header.get("role") != "P":
        raise DictionaryError("%s is not a pattern dictionary" % path)
    with open(path + ".json") as fh:
        meta = json.load(fh)
    P = PatternDictionary(data, meta["pitch_map"], meta.get("sample_rate", 22050),
                          meta.get("hop", 256), meta.get("window", 1024),
                          meta.get("freq_map"))
    cfg = FrontendConfig(**meta["frontend"]) if "frontend" in meta else None
    return P, cfg
