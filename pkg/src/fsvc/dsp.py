"""Signal analysis front end.

Framing, MFCC + deltas, autocorrelation F0 tracking, Bark-band cepstra in
the 20-dim LPCNet layout, and log-F0 normalization. Everything here is a
pure function of its inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Tuple

import numpy as np
from scipy.signal import get_window

from .errors import DegenerateError, InputError, ShapeError

SAMPLE_RATE = 16000
ENERGY_FLOOR = 1e-10

N_MELS = 26
N_CEPS = 13
DELTA_WIDTH = 2

F0_MIN_HZ = 50.0
F0_MAX_HZ = 500.0
F0_WINDOW_MS = 40.0
VOICING_THRESHOLD = 0.3
RMS_FLOOR = 1e-4
UNVOICED_FILL_HZ = 100.0
# A later autocorrelation peak must beat the first qualifying one by this
# factor to be chosen; keeps sub-octave lags from winning on ties.
OCTAVE_GUARD = 0.9

N_BARK = 18
# LPCNet band layout: triangle centres in units of 200 Hz, 0..8 kHz.
BARK_CENTERS_HZ = 200.0 * np.array(
    [0, 1, 2, 3, 4, 5, 6, 7, 8, 10, 12, 14, 16, 20, 24, 28, 34, 40], dtype=float
)
N_FEATURES = 20
PERIOD_REF_LOG2 = 5.0  # log2(32 samples) = 500 Hz
PERIOD_SPAN_LOG2 = 4.0


@dataclass(frozen=True)
class AudioSignal:
    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ShapeError(f"audio must be mono 1-D, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise InputError("audio contains non-finite samples")
        object.__setattr__(self, "samples", samples)
        if int(self.sample_rate_hz) <= 0:
            raise InputError(f"sample rate must be positive, got {self.sample_rate_hz}")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate_hz


@dataclass(frozen=True)
class FrameGrid:
    window_ms: float = 25.0
    hop_ms: float = 10.0
    n_frames: int = 0
    sample_rate_hz: int = SAMPLE_RATE

    @property
    def window_samples(self) -> int:
        return int(round(self.window_ms * self.sample_rate_hz / 1000.0))

    @property
    def hop_samples(self) -> int:
        return int(round(self.hop_ms * self.sample_rate_hz / 1000.0))

    @property
    def n_fft(self) -> int:
        return next_pow2(self.window_samples)

    def with_frames(self, n_frames: int) -> "FrameGrid":
        return replace(self, n_frames=int(n_frames))

    def same_layout(self, other: "FrameGrid") -> bool:
        return (
            self.window_samples == other.window_samples
            and self.hop_samples == other.hop_samples
            and self.n_frames == other.n_frames
            and self.sample_rate_hz == other.sample_rate_hz
        )


@dataclass(frozen=True)
class MfccSequence:
    frames: np.ndarray  # T x 39
    grid: FrameGrid


@dataclass(frozen=True)
class ProsodyTrack:
    """Per-frame pitch description.

    ``log_f0`` holds natural-log Hz, or z-scores once ``normalized`` is set.
    ``stats`` is the ``(mean, std)`` pair used for that z-scoring.
    """

    log_f0: np.ndarray
    voicing: np.ndarray
    pitch_corr: np.ndarray
    stats: Optional[Tuple[float, float]] = None
    normalized: bool = False

    def __post_init__(self):
        n = len(self.log_f0)
        if len(self.voicing) != n or len(self.pitch_corr) != n:
            raise ShapeError("prosody fields differ in length")

    def __len__(self):
        return len(self.log_f0)

    def as_matrix(self) -> np.ndarray:
        """T x 3 matrix ``[log_f0, voicing, pitch_corr]`` for file storage."""
        return np.column_stack([self.log_f0, self.voicing, self.pitch_corr]).astype(np.float64)

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "ProsodyTrack":
        m = np.asarray(m, dtype=np.float64)
        if m.ndim != 2 or m.shape[1] != 3:
            raise ShapeError(f"prosody matrix must be T x 3, got {m.shape}")
        return cls(m[:, 0].copy(), (m[:, 1] > 0.5).astype(np.float64), m[:, 2].copy())


@dataclass(frozen=True)
class LpcnetFeatureSequence:
    frames: np.ndarray  # T x 20
    grid: FrameGrid = field(default_factory=FrameGrid)

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.float64)
        if f.ndim != 2 or f.shape[1] != N_FEATURES:
            raise ShapeError(f"feature frames must be T x {N_FEATURES}, got {f.shape}")
        object.__setattr__(self, "frames", f)

    def __len__(self):
        return self.frames.shape[0]


def next_pow2(n: int) -> int:
    return 1 << max(0, int(n - 1).bit_length())


def _check_rate(signal: AudioSignal):
    if signal.sample_rate_hz != SAMPLE_RATE:
        raise InputError(
            f"unsupported sample rate {signal.sample_rate_hz} Hz (pipeline requires {SAMPLE_RATE})"
        )


def frame_count(n_samples: int, window: int, hop: int) -> int:
    if n_samples <= window:
        return 1
    return 1 + (n_samples - window) // hop


def frame_signal(signal: AudioSignal, window_ms: float = 25.0, hop_ms: float = 10.0):
    """Cut ``signal`` into Hann-windowed frames.

    Returns ``(grid, frames)`` with ``frames`` of shape ``(n_frames, window)``.
    A signal shorter than one window is zero-padded to a single frame.
    """
    if len(signal) == 0:
        raise InputError("cannot frame an empty signal")
    _check_rate(signal)
    if not (window_ms >= hop_ms > 0):
        raise InputError(f"need window_ms >= hop_ms > 0, got {window_ms}/{hop_ms}")
    grid = FrameGrid(window_ms, hop_ms, 0, signal.sample_rate_hz)
    win, hop = grid.window_samples, grid.hop_samples
    if hop < 1:
        raise InputError("hop is shorter than one sample")
    x = signal.samples
    if len(x) < win:
        x = np.pad(x, (0, win - len(x)))
    n = frame_count(len(x), win, hop)
    idx = np.arange(win)[None, :] + hop * np.arange(n)[:, None]
    frames = x[idx] * hann(win)[None, :]
    return grid.with_frames(n), frames


def hann(n: int) -> np.ndarray:
    return get_window("hann", n, fftbins=True)


def power_spectrum(frames: np.ndarray, n_fft: int) -> np.ndarray:
    spec = np.fft.rfft(frames, n=n_fft, axis=-1)
    return spec.real ** 2 + spec.imag ** 2


def dct_matrix(n: int, n_keep: Optional[int] = None) -> np.ndarray:
    """Orthonormal DCT-II matrix, rows are basis vectors (``c = M @ x``)."""
    n_keep = n if n_keep is None else n_keep
    k = np.arange(n_keep)[:, None]
    i = np.arange(n)[None, :]
    m = np.cos(np.pi * k * (2 * i + 1) / (2 * n)) * math.sqrt(2.0 / n)
    m[0] /= math.sqrt(2.0)
    return m


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=float) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=float) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Triangular HTK-mel filters on rfft bins, shape ``(n_mels, n_fft//2+1)``."""
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))
    fb = np.zeros((n_mels, freqs.size))
    for m in range(n_mels):
        lo, c, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (freqs - lo) / (c - lo)
        down = (hi - freqs) / (hi - c)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb


def deltas(x: np.ndarray, width: int = DELTA_WIDTH) -> np.ndarray:
    """Regression deltas over +-``width`` frames with edge replication."""
    T = x.shape[0]
    padded = np.pad(x, ((width, width), (0, 0)), mode="edge")
    num = np.zeros_like(x, dtype=np.float64)
    for n in range(1, width + 1):
        num += n * (padded[width + n : width + n + T] - padded[width - n : width - n + T])
    return num / (2.0 * sum(n * n for n in range(1, width + 1)))


def log_mel_energies(frames: np.ndarray, grid: FrameGrid) -> np.ndarray:
    fb = mel_filterbank(N_MELS, grid.n_fft, grid.sample_rate_hz)
    energies = power_spectrum(frames, grid.n_fft) @ fb.T
    return np.log(np.maximum(energies, ENERGY_FLOOR))


def compute_mfcc(frames: np.ndarray, grid: FrameGrid) -> MfccSequence:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape != (grid.n_frames, grid.window_samples):
        raise ShapeError(
            f"frames {frames.shape} do not match grid ({grid.n_frames}, {grid.window_samples})"
        )
    static = log_mel_energies(frames, grid) @ dct_matrix(N_MELS, N_CEPS).T
    d1 = deltas(static)
    d2 = deltas(d1)
    return MfccSequence(np.hstack([static, d1, d2]), grid)


def _nacf_curve(seg: np.ndarray, lags: np.ndarray) -> np.ndarray:
    """Normalized autocorrelation of ``seg`` at each lag (overlapping parts only)."""
    W = seg.shape[0]
    # cumulative energies give both partial-window energies per lag
    csum = np.concatenate([[0.0], np.cumsum(seg * seg)])
    full = np.correlate(seg, seg, mode="full")[W - 1 :]
    denom = np.sqrt(csum[W - lags] * (csum[W] - csum[lags]))
    out = np.zeros(lags.shape[0])
    ok = denom > 0.0
    out[ok] = full[lags[ok]] / denom[ok]
    return out


def _pick_lag(curve: np.ndarray, lags: np.ndarray) -> Tuple[int, float]:
    """First interior local maximum within ``OCTAVE_GUARD`` of the best one."""
    inner = curve[1:-1]
    is_peak = (inner >= curve[:-2]) & (inner >= curve[2:])
    peaks = np.nonzero(is_peak)[0] + 1
    if peaks.size == 0:
        return 0, 0.0
    best = curve[peaks].max()
    if best <= 0.0:
        return 0, 0.0
    first = peaks[np.argmax(curve[peaks] >= OCTAVE_GUARD * best)]
    return int(lags[first]), float(curve[first])


def estimate_f0(signal: AudioSignal, grid: FrameGrid) -> ProsodyTrack:
    _check_rate(signal)
    sr = signal.sample_rate_hz
    lag_min = int(math.ceil(sr / F0_MAX_HZ))
    lag_max = int(math.floor(sr / F0_MIN_HZ))
    # one extra lag on each side so band-edge peaks can be recognised
    lags = np.arange(lag_min - 1, lag_max + 2)
    half = int(round(F0_WINDOW_MS * sr / 1000.0)) // 2
    x = np.pad(signal.samples, (half, half + grid.window_samples))

    T = grid.n_frames
    f0 = np.zeros(T)
    corr = np.zeros(T)
    voiced = np.zeros(T)
    for t in range(T):
        centre = t * grid.hop_samples + grid.window_samples // 2
        seg = x[centre : centre + 2 * half]  # centred after the left pad of ``half``
        rms = math.sqrt(float(np.mean(seg * seg)))
        if rms < RMS_FLOOR:
            continue
        lag, c = _pick_lag(_nacf_curve(seg, lags), lags)
        if lag == 0:
            continue
        corr[t] = min(max(c, 0.0), 1.0)
        f0[t] = sr / lag
        voiced[t] = 1.0 if corr[t] >= VOICING_THRESHOLD else 0.0

    return ProsodyTrack(interpolate_unvoiced(f0, voiced), voiced, corr)


def interpolate_unvoiced(f0_hz: np.ndarray, voicing: np.ndarray) -> np.ndarray:
    """Natural-log F0 with unvoiced spans filled by linear interpolation."""
    idx = np.nonzero(voicing > 0.5)[0]
    if idx.size == 0:
        return np.full(f0_hz.shape[0], math.log(UNVOICED_FILL_HZ))
    logs = np.log(f0_hz[idx])
    # np.interp holds the end values flat, which is the nearest-voiced rule
    return np.interp(np.arange(f0_hz.shape[0]), idx, logs)


def bark_filterbank(n_fft: int, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Triangles peaking at ``BARK_CENTERS_HZ``, each row normalised to unit sum."""
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    c = BARK_CENTERS_HZ
    fb = np.zeros((N_BARK, freqs.size))
    for b in range(N_BARK):
        w = np.zeros_like(freqs)
        if b > 0:
            m = (freqs >= c[b - 1]) & (freqs <= c[b])
            w[m] = (freqs[m] - c[b - 1]) / (c[b] - c[b - 1])
        if b < N_BARK - 1:
            m = (freqs >= c[b]) & (freqs <= c[b + 1])
            w[m] = np.maximum(w[m], (c[b + 1] - freqs[m]) / (c[b + 1] - c[b]))
        else:
            w[freqs >= c[b]] = 1.0
        fb[b] = w / w.sum()
    return fb


def bark_band_energies(frames: np.ndarray, grid: FrameGrid) -> np.ndarray:
    """Per-band mean power spectral density (units of signal variance per bin)."""
    psd = power_spectrum(frames, grid.n_fft) / np.sum(hann(grid.window_samples) ** 2)
    return psd @ bark_filterbank(grid.n_fft, grid.sample_rate_hz).T


def encode_period(log_f0: np.ndarray, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    period = sample_rate / np.exp(log_f0)
    return (np.log2(period) - PERIOD_REF_LOG2) / PERIOD_SPAN_LOG2


def decode_period(code: np.ndarray) -> np.ndarray:
    return 2.0 ** (np.asarray(code) * PERIOD_SPAN_LOG2 + PERIOD_REF_LOG2)


def compute_bark_features(
    frames: np.ndarray, grid: FrameGrid, prosody: ProsodyTrack
) -> LpcnetFeatureSequence:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[0] != grid.n_frames or len(prosody) != grid.n_frames:
        raise ShapeError(
            f"grid mismatch: {frames.shape[0]} frames, {len(prosody)} prosody rows, "
            f"grid says {grid.n_frames}"
        )
    if prosody.normalized:
        raise InputError("Bark features need the raw (un-normalised) log-F0 track")
    log_bands = np.log(np.maximum(bark_band_energies(frames, grid), ENERGY_FLOOR))
    ceps = log_bands @ dct_matrix(N_BARK).T
    out = np.empty((grid.n_frames, N_FEATURES))
    out[:, :N_BARK] = ceps
    out[:, 18] = encode_period(prosody.log_f0, grid.sample_rate_hz)
    out[:, 19] = np.clip(prosody.pitch_corr, 0.0, 1.0)
    return LpcnetFeatureSequence(out, grid)


def normalize_log_f0(
    track: ProsodyTrack, stats: Optional[Tuple[float, float]] = None
) -> ProsodyTrack:
    """Z-score the log-F0 track.

    Without ``stats`` the mean and population std come from voiced frames
    only; either way every frame (interpolated ones included) is shifted and
    scaled.
    """
    if track.normalized:
        raise InputError("track is already normalised")
    if stats is None:
        stats = log_f0_stats(track)
    mean, std = float(stats[0]), float(stats[1])
    if not std >= 1e-8:
        raise DegenerateError(f"log-F0 std {std:g} is degenerate")
    return replace(
        track,
        log_f0=(track.log_f0 - mean) / std,
        stats=(mean, std),
        normalized=True,
    )


def log_f0_stats(track: ProsodyTrack) -> Tuple[float, float]:
    v = track.log_f0[track.voicing > 0.5]
    if v.size < 2:
        raise DegenerateError(f"need at least 2 voiced frames for log-F0 stats, got {v.size}")
    std = float(np.std(v))
    if std < 1e-8:
        raise DegenerateError("voiced log-F0 has zero variance")
    return float(np.mean(v)), std


def denormalize_log_f0(track: ProsodyTrack) -> ProsodyTrack:
    if not track.normalized or track.stats is None:
        raise InputError("track is not normalised")
    mean, std = track.stats
    return replace(track, log_f0=track.log_f0 * std + mean, normalized=False)


def analyze(signal: AudioSignal, window_ms: float = 25.0, hop_ms: float = 10.0):
    """Run the whole front end: ``(grid, mfcc, prosody, lpcnet_features)``."""
    grid, frames = frame_signal(signal, window_ms, hop_ms)
    mfcc = compute_mfcc(frames, grid)
    prosody = estimate_f0(signal, grid)
    feats = compute_bark_features(frames, grid, prosody)
    return grid, mfcc, prosody, feats


def average_features(feats: LpcnetFeatureSequence) -> np.ndarray:
    """One 20-dim frame summarising a whole sequence.

    Band energies are averaged in the power domain (averaging cepstra would
    average log energies, which biases narrow bands downward).
    """
    f = feats.frames
    m = dct_matrix(N_BARK)
    bands = np.exp(f[:, :N_BARK] @ m).mean(axis=0)
    out = f.mean(axis=0)
    out[:N_BARK] = m @ np.log(np.maximum(bands, ENERGY_FLOOR))
    return out
