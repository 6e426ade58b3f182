import numpy as np
import pytest
from hypothesis import given, strategies as st

from pianoadmm.prox import MarkovConfig, in_markov_set
from pianoadmm.synth import (NoteSpec, events_to_notes, gen_activity,
                             gen_dictionary, gen_piece, gen_spectrogram,
                             noise_for_snr, random_events, render_note)
from pianoadmm.tensors import synthesize


@given(st.integers(1, 6), st.integers(2, 12), st.integers(0, 10**6))
def test_template_energy_decays(K, L, seed):
    P = gen_dictionary(K, L, 48, seed).data
    energy = np.linalg.norm(P, axis=0)          # (L, K)
    assert np.all(np.diff(energy[1:], axis=0) <= 1e-12)


@given(st.integers(0, 10**6))
def test_distinct_keys_have_distinct_second_templates(seed):
    P = gen_dictionary(2, 6, 60, seed).data
    a, b = P[:, 1, 0], P[:, 1, 1]
    assert a @ b / (np.linalg.norm(a) * np.linalg.norm(b)) < 0.9


def test_dictionary_is_seeded():
    a, b = gen_dictionary(5, 6, 40, 7), gen_dictionary(5, 6, 40, 7)
    assert np.array_equal(a.data, b.data) and a.pitch_map == b.pitch_map
    assert not np.array_equal(a.data, gen_dictionary(5, 6, 40, 8).data)
    assert len(set(a.pitch_map)) == 5
    with pytest.raises(ValueError):
        gen_dictionary(0, 4, 40)


def test_gen_activity_places_diagonals():
    mc = MarkovConfig(2, 1, 4)
    A = gen_activity(2, 4, 10, [NoteSpec(0, 1, 3, 0.5), NoteSpec(1, 6, 4, 2.0)], mc)
    assert A[0, 0, 1] == A[0, 1, 2] == A[0, 2, 3] == 0.5
    assert A[1, 3, 9] == 2.0
    assert np.count_nonzero(A) == 7
    assert in_markov_set(A, mc)


@pytest.mark.parametrize("ev", [NoteSpec(2, 0, 3, 1.0), NoteSpec(0, 0, 1, 1.0),
                                NoteSpec(0, 0, 5, 1.0), NoteSpec(0, 10, 2, 1.0)])
def test_gen_activity_rejects_bad_events(ev):
    with pytest.raises(ValueError):
        gen_activity(2, 4, 10, [ev], MarkovConfig(2, 1, 4))


def test_gen_activity_rejects_overlap():
    with pytest.raises(ValueError):
        gen_activity(1, 4, 10, [NoteSpec(0, 0, 4, 1.0), NoteSpec(0, 2, 3, 1.0)])


@pytest.mark.parametrize("seed", range(20))
def test_noise_is_bounded(seed):
    piece = gen_piece(K=3, L=6, M=40, N=48, n_events=4, seed=seed)
    clean = synthesize(piece.P, piece.A)
    V = gen_spectrogram(piece.P, piece.A, 0.05, seed).data
    assert np.all(V >= clean) and np.all(V >= 0)
    assert np.all(V - clean <= 0.05 * 6.5)     # |N(0,1)| beyond 6.5 sigma: p < 1e-10


def test_snr_level():
    clean = np.ones((10, 10))
    assert noise_for_snr(clean, 20.0) == pytest.approx(0.1)


def test_piece_is_reproducible_and_valid():
    a, b = gen_piece(seed=4, snr_db=30), gen_piece(seed=4, snr_db=30)
    assert np.array_equal(a.V.data, b.V.data) and a.events == b.events
    assert in_markov_set(a.A, a.mc)
    assert a.V.data.shape == (60, 128)


@given(st.integers(0, 10**6))
def test_random_events_are_disjoint(seed):
    mc = MarkovConfig(2, 1, 6)
    evs = random_events(3, 60, 6, mc, seed)
    for k in range(3):
        own = sorted((e.onset, e.onset + e.length) for e in evs if e.key == k)
        assert all(a[1] <= b[0] for a, b in zip(own, own[1:]))
    assert all(mc.min_length <= e.length <= mc.L for e in evs)


def test_events_to_notes():
    notes = events_to_notes([NoteSpec(1, 4, 2, 0.7)], [60, 64], 0.01)
    assert notes[0].pitch == 64
    assert notes[0].onset == pytest.approx(0.04) and notes[0].duration == pytest.approx(0.02)


def test_render_note():
    clip = render_note(69, 0.5, lead_seconds=0.1)
    assert clip.sample_rate == 22050
    assert len(clip.samples) == int(0.5 * 22050) + int(0.1 * 22050)
    assert np.all(clip.samples[:2205] == 0)
    assert np.abs(clip.samples).max() == pytest.approx(0.3)
    spec = np.abs(np.fft.rfft(clip.samples[2205 + 1024:2205 + 5120]))
    peak = np.fft.rfftfreq(4096, 1 / 22050)[np.argmax(spec)]
    assert abs(peak - 440.0) < 10
