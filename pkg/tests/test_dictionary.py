import numpy as np
import pytest

from pianoadmm.dictionary import (DictionaryError, build_dictionary, load_dictionary,
                                  load_note_directory, save_dictionary,
                                  trim_leading_silence)
from pianoadmm.frontend import AudioClip, FrontendConfig, logfreq_spectrogram, write_wav
from pianoadmm.synth import render_note

CFG = FrontendConfig()


def test_single_key_is_spectrogram_prefix():
    clip = render_note(60, 1.0)
    P = build_dictionary([(60, clip)], CFG, 20)
    V = logfreq_spectrogram(clip, CFG).data
    np.testing.assert_array_equal(P.data[:, :, 0], V[:, :20])
    assert P.pitch_map == [60] and P.data.shape == (V.shape[0], 20, 1)


def test_leading_silence_is_trimmed():
    clip = render_note(64, 0.8)
    padded = AudioClip(np.concatenate([np.zeros(256 * 7), clip.samples]), clip.sample_rate)
    P = build_dictionary([(64, padded)], CFG, 10)
    energy = P.data[:, :, 0].sum(axis=0)
    assert energy[0] > 0
    V = np.zeros((3, 5))
    V[:, 2:] = 1.0
    assert trim_leading_silence(V).shape[1] == 3


def test_clip_too_short():
    clip = AudioClip(np.ones(1024 + 9 * 256) * 0.1, 22050)
    with pytest.raises(DictionaryError, match="clip too short"):
        build_dictionary([(60, clip)], CFG, 20)


def test_duplicate_and_missing_pitch():
    clip = render_note(60, 0.5)
    with pytest.raises(DictionaryError, match="duplicate"):
        build_dictionary([(60, clip), (60, clip)], CFG, 5)
    with pytest.raises(DictionaryError, match="missing pitch 62"):
        build_dictionary([(60, clip)], CFG, 5, pitches=[60, 62])


def test_bank_energy_decays_after_attack():
    clips = [(p, render_note(p, 1.5)) for p in (48, 55, 60, 67, 72)]
    P = build_dictionary(clips, CFG, 60)
    assert P.K == 5 and P.pitch_map == [48, 55, 60, 67, 72]
    assert np.all(P.data >= 0)
    energy = P.data.sum(axis=0)          # (L, K)
    assert np.all(np.diff(energy[4:], axis=0) <= 1e-12)


def test_rebuild_is_bit_identical():
    clips = [(p, render_note(p, 0.6)) for p in (60, 61)]
    a = build_dictionary(clips, CFG, 12).data
    b = build_dictionary(clips, CFG, 12).data
    assert a.tobytes() == b.tobytes()


def test_directory_and_container(tmp_path):
    for p in (60, 64):
        write_wav(tmp_path / ("%03d.wav" % p), render_note(p, 0.5))
    (tmp_path / "notes.txt").write_text("ignored")
    clips = load_note_directory(tmp_path)
    assert [p for p, _ in clips] == [60, 64]
    P = build_dictionary(clips, CFG, 8)
    save_dictionary(tmp_path / "dict.P", P, CFG)
    Q, cfg = load_dictionary(str(tmp_path / "dict.P"))
    np.testing.assert_array_equal(Q.data, P.data)
    assert Q.pitch_map == P.pitch_map and cfg == CFG
