"""Synthetic ground truth: dictionaries, activity tensors, spectrograms, audio.

Templates mimic a struck string: a broadband attack frame followed by
harmonic frames whose partials decay exponentially.
"""

from dataclasses import dataclass

import numpy as np

from .frontend import AudioClip
from .prox import MarkovConfig, in_markov_set
from .tensors import PatternDictionary, Spectrogram, synthesize

N_PARTIALS = 8
BINS_PER_OCTAVE = 12
ATTACK_LEVEL = 2.0
DECAY_RANGE = (0.03, 0.12)
BASE_PITCH = 60
SPREAD = (0.3, 1.0, 0.3)


@dataclass(frozen=True)
class NoteSpec:
    """One synthetic note: key index, onset frame, length in frames, gain."""

    key: int
    onset: int
    length: int
    gain: float


def gen_dictionary(K, L, M, seed=0, decay_range=DECAY_RANGE):
    """Seeded ``(M, L, K)`` dictionary with distinct fundamentals per key.

    Partials decay from the onset frame, so the first harmonic frame is
    already one step into the decay.
    """
    if min(K, L, M) < 1:
        raise ValueError("K, L, M must be >= 1")
    rng = np.random.default_rng(seed)
    span = max(K, M // 2)
    if span > M:
        raise ValueError("M too small for %d distinct keys" % K)
    f0 = np.sort(rng.choice(np.arange(span), size=K, replace=False))
    P = np.zeros((M, L, K))
    ell = np.arange(1, L)
    for k in range(K):
        decay = rng.uniform(*decay_range, size=N_PARTIALS)
        decay *= 1.0 + 0.25 * np.arange(N_PARTIALS)
        for h in range(1, N_PARTIALS + 1):
            pos = int(f0[k] + round(BINS_PER_OCTAVE * np.log2(h)))
            env = np.exp(-decay[h - 1] * ell) / h
            for off, w in zip((-1, 0, 1), SPREAD):
                if 0 <= pos + off < M:
                    P[pos + off, 1:, k] += w * env
        peak = P[:, 1, k].max() if L > 1 else 1.0
        P[:, 0, k] = ATTACK_LEVEL * peak
    pitches = [BASE_PITCH + int(f) for f in f0]
    return PatternDictionary(P, pitches)


def gen_activity(K, L, N, events, mc=None):
    """Activity tensor with one gain-valued diagonal per note."""
    A = np.zeros((K, L, N))
    busy = {}
    for ev in sorted(events, key=lambda e: (e.key, e.onset)):
        if not 0 <= ev.key < K:
            raise ValueError("key %d out of range" % ev.key)
        lo = mc.min_length if mc is not None else 1
        if not lo <= ev.length <= L:
            raise ValueError("note length %d outside [%d, %d]" % (ev.length, lo, L))
        if not 0 <= ev.onset < N:
            raise ValueError("onset %d outside [0, %d)" % (ev.onset, N))
        if ev.onset < busy.get(ev.key, 0):
            raise ValueError("overlapping notes on key %d" % ev.key)
        busy[ev.key] = ev.onset + ev.length
        for j in range(ev.length):
            if ev.onset + j < N:
                A[ev.key, j, ev.onset + j] = ev.gain
    if mc is not None and not in_markov_set(A, mc):
        raise ValueError("events do not form a valid state sequence")
    return A


def noise_for_snr(clean, snr_db):
    """Noise level giving the requested SNR for ``|gaussian|`` noise."""
    clean = np.asarray(clean)
    return float(np.linalg.norm(clean) / np.sqrt(clean.size) * 10 ** (-snr_db / 20.0))


def gen_spectrogram(P, A, noise_level=0.0, seed=0, sample_rate=22050, hop=256,
                    window=1024):
    if noise_level < 0:
        raise ValueError("noise_level must be >= 0")
    V = synthesize(P, A)
    if noise_level > 0:
        rng = np.random.default_rng(seed)
        V = V + noise_level * np.abs(rng.standard_normal(V.shape))
    V = np.maximum(V, 0.0)
    M = V.shape[0]
    return Spectrogram(V, sample_rate, hop, window, np.arange(1, M + 1, dtype=float))


def random_events(K, N, n_events, mc, seed=0, gain_range=(0.6, 1.4),
                  length_range=None):
    """Seeded non-overlapping notes spread over ``N`` frames."""
    rng = np.random.default_rng(seed)
    lo, hi = length_range or (mc.min_length, mc.L)
    events = []
    busy = [0] * K
    attempts = 0
    while len(events) < n_events and attempts < 10000:
        attempts += 1
        k = int(rng.integers(K))
        length = int(rng.integers(lo, hi + 1))
        onset = int(rng.integers(1, max(2, N - length)))
        if any(e.key == k and not (onset >= e.onset + e.length
                                   or onset + length <= e.onset) for e in events):
            continue
        if any(e.onset == onset and e.key == k for e in events):
            continue
        events.append(NoteSpec(k, onset, length, float(rng.uniform(*gain_range))))
    if len(events) < n_events:
        raise ValueError("could not place %d notes" % n_events)
    return sorted(events, key=lambda e: (e.onset, e.key))


@dataclass
class SyntheticPiece:
    P: PatternDictionary
    A: np.ndarray
    V: Spectrogram
    events: list
    mc: MarkovConfig


def gen_piece(K=5, L=16, M=60, N=128, n_events=8, noise_level=0.0, snr_db=None,
              seed=0, min_length=3, overlap=1, dict_seed=None,
              length_range=None):
    """A complete synthetic transcription problem."""
    mc = MarkovConfig(min_length, overlap, L)
    P = gen_dictionary(K, L, M, seed if dict_seed is None else dict_seed)
    events = random_events(K, N, n_events, mc, seed=seed + 1000,
                           length_range=length_range)
    A = gen_activity(K, L, N, events, mc)
    if snr_db is not None:
        noise_level = noise_for_snr(synthesize(P, A), snr_db)
    V = gen_spectrogram(P, A, noise_level, seed + 2000)
    return SyntheticPiece(P, A, V, events, mc)


def events_to_notes(events, pitch_map, hop_seconds):
    from .transcriber import NoteEvent
    return sorted((NoteEvent(pitch_map[e.key], e.onset * hop_seconds,
                             e.length * hop_seconds, e.gain) for e in events),
                  key=lambda e: (e.onset, e.pitch))


def render_note(pitch, seconds, sample_rate=22050, amplitude=0.3, seed=0,
                lead_seconds=0.0):
    """Additive piano-like tone: click attack plus decaying harmonics.

    ``lead_seconds`` of silence precede the attack, as in a real recording,
    so the frames that only partly overlap the attack are kept.
    """
    rng = np.random.default_rng(seed + pitch)
    n = int(seconds * sample_rate)
    t = np.arange(n) / float(sample_rate)
    f0 = 440.0 * 2 ** ((pitch - 69) / 12.0)
    x = np.zeros(n)
    for h in range(1, N_PARTIALS + 1):
        f = f0 * h
        if f >= sample_rate / 2:
            break
        x += np.sin(2 * np.pi * f * t) * np.exp(-t * (1.5 + 0.8 * h)) / h
    click = rng.standard_normal(min(n, 64)) * np.exp(-np.arange(min(n, 64)) / 8.0)
    x[:len(click)] += 0.5 * click
    x *= amplitude / max(np.abs(x).max(), 1e-12)
    lead = np.zeros(int(round(lead_seconds * sample_rate)))
    return AudioClip(np.concatenate([lead, x]), sample_rate)
