"""WAV decoding and the log-frequency magnitude spectrogram."""

import struct
from dataclasses import asdict, dataclass

import numpy as np

from .tensors import Spectrogram


class WavError(ValueError):
    pass


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    def __len__(self):
        return len(self.samples)


@dataclass
class FrontendConfig:
    sample_rate: int = 22050
    window: int = 1024
    hop: int = 256
    bins_per_octave: int = 36
    f_min: float = 27.5
    f_max: float = 11025.0
    # zero-padding factor for the DFT; finer bins keep narrow log bands populated
    oversample: int = 4

    def __post_init__(self):
        if not (0 < self.f_min < self.f_max <= self.sample_rate / 2.0):
            raise ValueError("need 0 < f_min < f_max <= sample_rate / 2")
        if not (self.window >= self.hop >= 1):
            raise ValueError("need window >= hop >= 1")
        if self.bins_per_octave < 1 or self.oversample < 1:
            raise ValueError("bins_per_octave and oversample must be >= 1")

    @property
    def overlap(self):
        return -(-self.window // self.hop)

    @property
    def hop_seconds(self):
        return self.hop / float(self.sample_rate)

    def frames_for_seconds(self, seconds):
        return max(1, int(round(seconds / self.hop_seconds)))

    def to_dict(self):
        return asdict(self)


def decode_wav(data):
    """Decode a RIFF/WAVE byte string (PCM16 or float32, mono or stereo)."""
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavError("malformed header")
    pos = 12
    fmt = None
    payload = None
    while pos + 8 <= len(data):
        cid = data[pos:pos + 4]
        size = struct.unpack("<I", data[pos + 4:pos + 8])[0]
        body = data[pos + 8:pos + 8 + size]
        if cid == b"fmt ":
            if len(body) < 16:
                raise WavError("malformed header")
            fmt = struct.unpack("<HHIIHH", body[:16])
        elif cid == b"data":
            if len(body) < size:
                raise WavError("truncated data chunk")
            payload = body
            break
        pos += 8 + size + (size & 1)
    if fmt is None:
        raise WavError("malformed header")
    if payload is None:
        raise WavError("truncated data chunk")
    tag, channels, rate, _, block_align, bits = fmt
    if channels not in (1, 2):
        raise WavError("unsupported codec: %d channels" % channels)
    if tag == 1 and bits == 16:
        dtype, scale = "<i2", 1.0 / 32768.0
    elif tag == 3 and bits == 32:
        dtype, scale = "<f4", 1.0
    else:
        raise WavError("unsupported codec: format %d, %d bits" % (tag, bits))
    frame_bytes = channels * bits // 8
    if len(payload) % frame_bytes:
        raise WavError("truncated data chunk")
    x = np.frombuffer(payload, dtype=dtype).astype(np.float64) * scale
    x = x.reshape(-1, channels).mean(axis=1)
    return AudioClip(np.clip(x, -1.0, 1.0), rate)


def read_wav(path):
    with open(path, "rb") as fh:
        return decode_wav(fh.read())


def encode_wav(clip):
    """16-bit PCM mono WAV bytes for ``clip``."""
    pcm = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    body = pcm.tobytes()
    fmt = struct.pack("<HHIIHH", 1, 1, int(clip.sample_rate),
                      int(clip.sample_rate) * 2, 2, 16)
    return (b"RIFF" + struct.pack("<I", 36 + len(body)) + b"WAVE"
            + b"fmt " + struct.pack("<I", 16) + fmt
            + b"data" + struct.pack("<I", len(body)) + body)


def write_wav(path, clip):
    with open(path, "wb") as fh:
        fh.write(encode_wav(clip))


def log_frequencies(cfg):
    n = int(np.floor(cfg.bins_per_octave * np.log2(cfg.f_max / cfg.f_min) + 1e-9))
    return cfg.f_min * 2.0 ** (np.arange(n + 1) / cfg.bins_per_octave)


def filterbank(cfg):
    """Triangular unit-peak filters on the log centers, ``(M, n_fft//2 + 1)``.

    Each triangle reaches the neighbouring centers, but never narrower than
    one DFT bin so that every filter sees at least one bin.
    """
    centers = log_frequencies(cfg)
    n_fft = cfg.window * cfg.oversample
    df = cfg.sample_rate / float(n_fft)
    freqs = np.arange(n_fft // 2 + 1) * df
    ratio = 2.0 ** (1.0 / cfg.bins_per_octave)
    lower = np.concatenate([[centers[0] / ratio], centers[:-1]])
    upper = np.concatenate([centers[1:], [centers[-1] * ratio]])
    left = np.maximum(centers - lower, df)
    right = np.maximum(upper - centers, df)
    d = freqs[None, :] - centers[:, None]
    rise = 1.0 + d / left[:, None]
    fall = 1.0 - d / right[:, None]
    fb = np.where(d < 0, rise, fall)
    return centers, np.clip(fb, 0.0, None)


def logfreq_spectrogram(clip, cfg):
    """Hann-windowed STFT magnitudes mapped onto log-spaced bins."""
    if clip.sample_rate != cfg.sample_rate:
        raise ValueError("sample-rate mismatch: clip %d Hz, config %d Hz"
                         % (clip.sample_rate, cfg.sample_rate))
    x = clip.samples
    if len(x) < cfg.window:
        raise ValueError("clip shorter than one window")
    n_frames = (len(x) - cfg.window) // cfg.hop + 1
    idx = np.arange(cfg.window)[None, :] + cfg.hop * np.arange(n_frames)[:, None]
    frames = x[idx] * np.hanning(cfg.window + 2)[1:-1][None, :]
    mag = np.abs(np.fft.rfft(frames, n=cfg.window * cfg.oversample, axis=1))
    centers, fb = filterbank(cfg)
    V = fb @ mag.T
    return Spectrogram(np.maximum(V, 0.0), cfg.sample_rate, cfg.hop,
                       cfg.window, centers)
