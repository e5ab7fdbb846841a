"""Spectrogram features and the synthetic desk-scale dataset.

Real audio: 16-bit PCM WAV -> 22.05 kHz -> per-channel STFT power ->
A-weighting -> mel filterbank -> log. Output is ``[2, T, F]``; mono input is
duplicated to two channels.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import get_window, resample_poly

from .errors import ValidationError, WavParseError
from .tensor import DTYPE

LOG_FLOOR = 1e-10
STD_FLOOR = 1e-5


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = 22050
    window: int = 2048
    hop: int = 512
    n_mels: int = 256
    snippet_seconds: float = 10.0
    channels: int = 2
    fmin: float = 0.0
    fmax: float | None = None

    def validate(self) -> list[str]:
        errs = []
        if self.sample_rate < 1:
            errs.append(f"features.sample_rate must be positive, got {self.sample_rate}")
        if self.hop < 1 or self.window < 1 or self.hop > self.window:
            errs.append(f"features.hop ({self.hop}) must be in 1..window ({self.window})")
        if self.n_mels < 1:
            errs.append(f"features.n_mels must be >= 1, got {self.n_mels}")
        if self.channels != 2:
            errs.append(f"features.channels must be 2, got {self.channels}")
        if self.snippet_seconds <= 0:
            errs.append(f"features.snippet_seconds must be positive, got {self.snippet_seconds}")
        return errs

    def num_frames(self, num_samples: int) -> int:
        return (num_samples - self.window) // self.hop + 1

    @property
    def snippet_samples(self) -> int:
        return int(round(self.snippet_seconds * self.sample_rate))


# -- WAV ---------------------------------------------------------------------

def parse_wav(blob: bytes) -> tuple[np.ndarray, int]:
    """Decode a RIFF/WAVE PCM16 byte string into ``([n, channels] int16, rate)``."""
    if len(blob) < 12:
        raise WavParseError("file too short for a RIFF header", len(blob))
    if blob[0:4] != b"RIFF":
        raise WavParseError(f"expected 'RIFF' magic, found {blob[0:4]!r}", 0)
    if blob[8:12] != b"WAVE":
        raise WavParseError(f"expected 'WAVE' form type, found {blob[8:12]!r}", 8)
    pos = 12
    fmt = None
    data = None
    data_off = 0
    while pos + 8 <= len(blob):
        cid = blob[pos:pos + 4]
        (size,) = struct.unpack_from("<I", blob, pos + 4)
        body = pos + 8
        if body + size > len(blob):
            if cid == b"data":
                size = len(blob) - body  # tolerate truncated final data chunk
            else:
                raise WavParseError(f"chunk {cid!r} of {size} bytes overruns the file", pos + 4)
        if cid == b"fmt ":
            if size < 16:
                raise WavParseError(f"fmt chunk too small ({size} bytes)", pos + 4)
            fmt = struct.unpack_from("<HHIIHH", blob, body)
            fmt_off = body
        elif cid == b"data":
            data = blob[body:body + size]
            data_off = body
        pos = body + size + (size & 1)
    if fmt is None:
        raise WavParseError("missing 'fmt ' chunk", pos)
    if data is None:
        raise WavParseError("missing 'data' chunk", pos)
    audio_format, channels, rate, _, block_align, bits = fmt
    if audio_format not in (1, 0xFFFE):
        raise WavParseError(f"unsupported audio format {audio_format} (PCM only)", fmt_off)
    if bits != 16:
        raise WavParseError(f"unsupported sample width {bits} bits (16-bit PCM only)", fmt_off + 14)
    if channels < 1 or block_align != 2 * channels:
        raise WavParseError(f"inconsistent channels={channels} block_align={block_align}", fmt_off + 2)
    if rate < 1:
        raise WavParseError(f"invalid sample rate {rate}", fmt_off + 4)
    n = len(data) // block_align
    pcm = np.frombuffer(data[: n * block_align], dtype="<i2").reshape(n, channels)
    if n == 0:
        raise WavParseError("data chunk holds no samples", data_off)
    return pcm, rate


def read_wav(path) -> tuple[np.ndarray, int]:
    return parse_wav(Path(path).read_bytes())


def encode_wav(pcm: np.ndarray, rate: int) -> bytes:
    """Encode ``[n]`` or ``[n, channels]`` int16 samples as a PCM16 WAV byte string."""
    pcm = np.asarray(pcm)
    if pcm.ndim == 1:
        pcm = pcm[:, None]
    pcm = pcm.astype("<i2")
    ch = pcm.shape[1]
    data = pcm.tobytes()
    header = struct.pack("<4sI4s4sIHHIIHH4sI", b"RIFF", 36 + len(data), b"WAVE", b"fmt ", 16, 1, ch, rate,
                         rate * 2 * ch, 2 * ch, 16, b"data", len(data))
    return header + data


# -- spectral pipeline --------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_centers(n_mels: int, sample_rate: int, fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Centre frequency (Hz) of each triangular mel filter."""
    fmax = sample_rate / 2 if fmax is None else fmax
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))[1:-1]


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int, fmin: float = 0.0,
                   fmax: float | None = None) -> np.ndarray:
    """``[n_mels, n_fft//2 + 1]`` triangular filters with unit peak, HTK mel scale."""
    fmax = sample_rate / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    lower = (freqs[None, :] - edges[:-2, None]) / (edges[1:-1, None] - edges[:-2, None])
    upper = (edges[2:, None] - freqs[None, :]) / (edges[2:, None] - edges[1:-1, None])
    return np.maximum(0.0, np.minimum(lower, upper))


def a_weighting_gain(freqs) -> np.ndarray:
    """IEC 61672 A-weighting as a linear power gain (0 dB at 1 kHz)."""
    f2 = np.asarray(freqs, dtype=np.float64) ** 2
    num = (12194.0 ** 2) * f2 ** 2
    den = (f2 + 20.6 ** 2) * np.sqrt((f2 + 107.7 ** 2) * (f2 + 737.9 ** 2)) * (f2 + 12194.0 ** 2)
    with np.errstate(divide="ignore"):
        ra = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
        db = np.where(ra > 0, 20.0 * np.log10(np.where(ra > 0, ra, 1.0)) + 2.0, -np.inf)
    return np.where(np.isfinite(db), 10.0 ** (db / 10.0), 0.0)


def frame_signal(x: np.ndarray, window: int, hop: int) -> np.ndarray:
    if x.size < window:
        raise ValidationError(f"audio has {x.size} samples, fewer than one window of {window}")
    n = (x.size - window) // hop + 1
    return np.lib.stride_tricks.sliding_window_view(x, window)[: (n - 1) * hop + 1 : hop]


def stft_power(x: np.ndarray, window: int, hop: int) -> np.ndarray:
    """One-sided power spectrogram ``[T, window//2 + 1]`` of a 1-D signal (Hann window, no centring)."""
    frames = frame_signal(np.asarray(x, dtype=np.float64), window, hop)
    spec = np.fft.rfft(frames * get_window("hann", window), axis=-1)
    return spec.real ** 2 + spec.imag ** 2


def _to_float_stereo(pcm: np.ndarray) -> np.ndarray:
    pcm = np.asarray(pcm)
    if pcm.ndim == 1:
        pcm = pcm[:, None]
    if pcm.ndim != 2 or pcm.shape[0] == 0:
        raise ValidationError(f"empty or malformed PCM buffer of shape {pcm.shape}")
    if pcm.shape[1] == 1:
        pcm = np.repeat(pcm, 2, axis=1)
    elif pcm.shape[1] != 2:
        raise ValidationError(f"expected mono or stereo audio, got {pcm.shape[1]} channels")
    if pcm.dtype == np.int16:
        return pcm.astype(np.float64) / 32768.0
    return pcm.astype(np.float64)


def resample(x: np.ndarray, rate: int, target: int) -> np.ndarray:
    if rate == target:
        return x
    g = math.gcd(rate, target)
    return resample_poly(x, target // g, rate // g, axis=0)


def wav_to_logmel(pcm: np.ndarray, sample_rate: int, config: FeatureConfig = FeatureConfig(),
                  fit_snippet: bool = False) -> np.ndarray:
    """Log-mel spectrogram ``[2, T, n_mels]`` of ``[n]`` or ``[n, ch]`` PCM samples.

    ``pcm`` may be int16 (scaled by 1/32768) or float. With ``fit_snippet``
    the resampled audio is cropped or zero-padded to the configured snippet
    length so every file yields the same T.
    """
    audio = _to_float_stereo(pcm)
    audio = resample(audio, sample_rate, config.sample_rate)
    if fit_snippet:
        n = config.snippet_samples
        audio = audio[:n] if audio.shape[0] >= n else np.pad(audio, ((0, n - audio.shape[0]), (0, 0)))
    fb = mel_filterbank(config.n_mels, config.window, config.sample_rate, config.fmin, config.fmax)
    weight = a_weighting_gain(np.fft.rfftfreq(config.window, 1.0 / config.sample_rate))
    fb = fb * weight[None, :]
    out = []
    for ch in range(2):
        power = stft_power(audio[:, ch], config.window, config.hop)
        out.append(np.log(np.maximum(power @ fb.T, LOG_FLOOR)))
    return np.stack(out).astype(DTYPE)


def wav_file_to_logmel(path, config: FeatureConfig = FeatureConfig(), fit_snippet: bool = True) -> np.ndarray:
    pcm, rate = read_wav(path)
    return wav_to_logmel(pcm, rate, config, fit_snippet=fit_snippet)


# -- normalization -------------------------------------------------------------

@dataclass(frozen=True)
class DatasetStats:
    """Per-(channel, frequency-bin) mean and std, shaped ``[C, 1, F]``."""

    mean: np.ndarray
    std: np.ndarray


def compute_stats(train: np.ndarray) -> DatasetStats:
    """Statistics of a training array ``[N, C, T, F]`` over samples and time."""
    x = np.asarray(train, dtype=np.float64)
    mean = x.mean(axis=(0, 2))[:, None, :]
    std = np.maximum(x.std(axis=(0, 2)), STD_FLOOR)[:, None, :]
    return DatasetStats(mean.astype(DTYPE), std.astype(DTYPE))


def normalize(x: np.ndarray, stats: DatasetStats) -> np.ndarray:
    return ((x - stats.mean) / stats.std).astype(DTYPE)


def normalize_splits(train: np.ndarray, *others: np.ndarray):
    """Normalize ``train`` and every other split with statistics of ``train`` only."""
    stats = compute_stats(train)
    return stats, normalize(train, stats), *[normalize(o, stats) for o in others]


# -- datasets ------------------------------------------------------------------

@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    train_ids: np.ndarray
    test_ids: np.ndarray
    num_classes: int


def _class_layout(num_classes: int, bins: int, frames: int, cue_extent: float):
    margin = max(2.0, cue_extent)
    centers = np.linspace(margin, bins - 1 - margin, num_classes) if num_classes > 1 else np.array([bins / 2])
    # distinct temporal modulation rates (cycles per snippet)
    rates = 2.0 + 1.5 * np.arange(num_classes)
    rates = np.minimum(rates, frames / 4)
    return centers, rates


def _render(rng, label, centers, rates, frames, bins, difficulty, cue_extent, position_jitter):
    t = np.arange(frames)[:, None]
    f = np.arange(bins)[None, :]
    margin = max(2.0, cue_extent)
    noise = 0.3 + 1.2 * difficulty
    x = noise * rng.standard_normal((frames, bins))
    # jitter 0: the class's own band; jitter 1: anywhere in the spectrum
    lo = (1 - position_jitter) * centers[label] + position_jitter * margin
    hi = (1 - position_jitter) * centers[label] + position_jitter * (bins - 1 - margin)
    center = rng.uniform(lo, hi)
    mod = 0.5 + 0.5 * np.sin(2 * np.pi * rates[label] * t / frames + rng.uniform(0, 2 * np.pi))
    x += 2.0 * np.exp(-0.5 * ((f - center) / (cue_extent / 2)) ** 2) * mod
    # class-independent distractor bands
    for _ in range(int(round(4 * difficulty))):
        dc = rng.uniform(0, bins - 1)
        rate = rng.uniform(rates.min(), rates.max())
        dmod = 0.5 + 0.5 * np.sin(2 * np.pi * rate * t / frames + rng.uniform(0, 2 * np.pi))
        x += 1.5 * difficulty * np.exp(-0.5 * ((f - dc) / (cue_extent / 2)) ** 2) * dmod
    right = rng.uniform(0.8, 1.2) * x + 0.2 * noise * rng.standard_normal((frames, bins))
    return np.stack([x, right])


def synth_dataset(num_classes: int, n_per_class: int, seed: int = 0, difficulty: float = 0.5,
                  frames: int = 64, bins: int = 64, test_per_class: int | None = None,
                  cue_extent: float = 4.0, position_jitter: float = 0.0) -> Dataset:
    """Class-balanced synthetic spectrograms ``[N, 2, frames, bins]``.

    Each class is a frequency band (width ``cue_extent`` bins) with a
    class-specific amplitude-modulation rate. ``position_jitter`` in [0, 1]
    spreads the band's position from the class's own slot (0) to the whole
    spectrum (1), where only the modulation pattern identifies the class.
    ``difficulty`` in [0, 1] scales background noise and the number of
    class-independent distractor bands. Deterministic in ``seed``.
    """
    if num_classes < 2 or n_per_class < 1:
        raise ValidationError(f"need num_classes >= 2 and n_per_class >= 1, got {num_classes}, {n_per_class}")
    if not 0.0 <= difficulty <= 1.0:
        raise ValidationError(f"difficulty must lie in [0, 1], got {difficulty}")
    if not 0.0 <= position_jitter <= 1.0:
        raise ValidationError(f"position_jitter must lie in [0, 1], got {position_jitter}")
    test_per_class = n_per_class if test_per_class is None else test_per_class
    centers, rates = _class_layout(num_classes, bins, frames, cue_extent)
    per_class = n_per_class + test_per_class
    labels = np.repeat(np.arange(num_classes), per_class)
    rng = np.random.default_rng(seed)
    sample_seeds = rng.integers(0, 2 ** 63 - 1, size=labels.size)
    x = np.stack([_render(np.random.default_rng(s), lab, centers, rates, frames, bins, difficulty, cue_extent,
                          position_jitter)
                  for s, lab in zip(sample_seeds, labels)]).astype(DTYPE)
    ids = np.arange(labels.size)
    within = ids % per_class
    train = within < n_per_class
    order_rng = np.random.default_rng(seed + 1)
    tr = order_rng.permutation(np.flatnonzero(train))
    te = np.flatnonzero(~train)
    return Dataset(x[tr], labels[tr], x[te], labels[te], ids[tr], ids[te], num_classes)


@dataclass(frozen=True)
class ManifestEntry:
    path: Path
    label: str
    split: str


def read_manifest(path) -> list[ManifestEntry]:
    """Parse a ``path,label,split`` CSV; relative paths resolve against the manifest's directory."""
    path = Path(path)
    entries = []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"path", "label", "split"} - set(reader.fieldnames or [])
        if missing:
            raise ValidationError(f"manifest {path} lacks columns {sorted(missing)}")
        for row in reader:
            p = Path(row["path"])
            entries.append(ManifestEntry(p if p.is_absolute() else path.parent / p, row["label"], row["split"]))
    if not entries:
        raise ValidationError(f"manifest {path} lists no files")
    return entries


def manifest_dataset(manifest, config: FeatureConfig = FeatureConfig()) -> Dataset:
    """Extract features for every manifest entry; splits other than ``train`` are test data."""
    entries = read_manifest(manifest)
    classes = sorted({e.label for e in entries})
    index = {c: i for i, c in enumerate(classes)}
    feats = np.stack([wav_file_to_logmel(e.path, config) for e in entries])
    labels = np.array([index[e.label] for e in entries])
    is_train = np.array([e.split == "train" for e in entries])
    ids = np.arange(len(entries))
    return Dataset(feats[is_train], labels[is_train], feats[~is_train], labels[~is_train], ids[is_train],
                   ids[~is_train], len(classes))
