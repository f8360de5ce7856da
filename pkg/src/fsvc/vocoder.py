"""LPC source-filter vocoder for 20-dim LPCNet-layout features.

Cepstra are turned back into a smooth power spectrum, then into an order-16
all-pole filter via Levinson-Durbin. The filter is driven by a mix of a
pitch-synchronous pulse train and seeded white noise, weighted by the
frame's pitch correlation.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import dsp
from .dsp import AudioSignal, FrameGrid, LpcnetFeatureSequence
from .errors import InputError, UnstableFilterError

log = logging.getLogger(__name__)

LPC_ORDER = 16
SPECTRUM_BINS = 256
MIN_PERIOD = 32
MAX_PERIOD = 320


@dataclass(frozen=True)
class LpcFrame:
    lpc: np.ndarray  # a[1..p], predictor convention x[n] ~ sum a_i x[n-i]
    reflection: np.ndarray
    gain: float
    period_samples: int  # 0 when unvoiced
    pitch_corr: float


def levinson_durbin(r) -> Tuple[np.ndarray, np.ndarray, float]:
    """Solve the Yule-Walker equations for autocorrelation ``r[0..p]``.

    Returns ``(a, k, err)`` where ``a`` are predictor coefficients, ``k`` the
    reflection coefficients and ``err`` the final prediction error power.
    """
    r = np.asarray(r, dtype=np.float64)
    if r.ndim != 1 or r.size < 1:
        raise InputError("autocorrelation must be a non-empty 1-D sequence")
    if not np.all(np.isfinite(r)):
        raise InputError("autocorrelation is not finite")
    if r[0] <= 0.0:
        raise InputError(f"r[0] must be positive, got {r[0]:g}")
    p = r.size - 1
    a = np.zeros(p)
    k = np.zeros(p)
    err = r[0]
    for i in range(p):
        acc = r[i + 1] - np.dot(a[:i], r[i:0:-1])
        ki = acc / err
        k[i] = ki
        prev = a[:i].copy()
        a[:i] = prev - ki * prev[::-1]
        a[i] = ki
        err = err * (1.0 - ki * ki)
        if not err > 0.0:
            raise UnstableFilterError(
                f"autocorrelation is not positive definite (error {err:g} at order {i + 1})"
            )
    return a, k, float(err)


def reflection_to_lpc(k: np.ndarray) -> np.ndarray:
    """Step-up recursion; ``k`` may carry leading batch dimensions."""
    k = np.asarray(k, dtype=np.float64)
    a = np.zeros_like(k)
    for i in range(k.shape[-1]):
        prev = a[..., :i].copy()
        a[..., :i] = prev - k[..., i : i + 1] * prev[..., ::-1]
        a[..., i] = k[..., i]
    return a


def _spectrum_grid(sample_rate: int) -> np.ndarray:
    # 256 bins over [0, fs/2) plus the Nyquist bin needed by the 512-point irfft
    return np.arange(SPECTRUM_BINS + 1) * (sample_rate / 2.0) / SPECTRUM_BINS


def cepstra_to_power_spectrum(ceps, sample_rate: int = dsp.SAMPLE_RATE) -> np.ndarray:
    log_bands = dsp.dct_matrix(dsp.N_BARK).T @ np.asarray(ceps, dtype=np.float64)
    freqs = _spectrum_grid(sample_rate)
    # piecewise-linear in log energy; np.interp holds the end bands flat
    return np.exp(np.interp(freqs, dsp.BARK_CENTERS_HZ, log_bands))


def decode_pitch(code: float, corr: float) -> Tuple[int, float]:
    corr = float(min(max(corr, 0.0), 1.0))
    if corr < dsp.VOICING_THRESHOLD:
        return 0, corr
    period = int(round(float(dsp.decode_period(code))))
    return min(max(period, MIN_PERIOD), MAX_PERIOD), corr


def cepstra_to_lpc(frame, sample_rate: int = dsp.SAMPLE_RATE, order: int = LPC_ORDER) -> LpcFrame:
    frame = np.asarray(frame, dtype=np.float64)
    if frame.shape != (dsp.N_FEATURES,):
        raise InputError(f"feature frame must have {dsp.N_FEATURES} values, got {frame.shape}")
    if not np.all(np.isfinite(frame)):
        raise InputError("feature frame is not finite")
    power = cepstra_to_power_spectrum(frame[: dsp.N_BARK], sample_rate)
    r = np.fft.irfft(power, n=2 * SPECTRUM_BINS)[: order + 1]
    a, k, err = levinson_durbin(r)
    if np.any(np.abs(k) >= 1.0):
        raise UnstableFilterError("reflection coefficient outside the unit interval")
    period, corr = decode_pitch(frame[18], frame[19])
    return LpcFrame(a, k, math.sqrt(err), period, corr)


def _excitation(frames, hop: int, rng: np.random.Generator) -> np.ndarray:
    n = len(frames) * hop
    noise = rng.standard_normal(n)
    exc = np.empty(n)
    since_pulse = 0
    for i, fr in enumerate(frames):
        seg = slice(i * hop, (i + 1) * hop)
        pulses = np.zeros(hop)
        if fr.period_samples > 0:
            # pulse phase runs on across frames so period changes stay smooth
            for j in range(hop):
                since_pulse += 1
                if since_pulse >= fr.period_samples:
                    pulses[j] = math.sqrt(fr.period_samples)
                    since_pulse = 0
        else:
            since_pulse = 0
        c = fr.pitch_corr if fr.period_samples > 0 else 0.0
        exc[seg] = fr.gain * (c * pulses + (1.0 - c) * noise[seg])
    return exc


def lpc_synthesize(
    features: LpcnetFeatureSequence,
    grid: Optional[FrameGrid] = None,
    seed: int = 0,
) -> Tuple[AudioSignal, int]:
    """Render features to audio.

    Returns the signal and the number of frames that failed to give a stable
    filter (each such frame reuses the previous stable one).
    """
    grid = features.grid if grid is None else grid
    hop = grid.hop_samples
    T = len(features)
    order = LPC_ORDER
    silent = LpcFrame(np.zeros(order), np.zeros(order), 0.0, 0, 0.0)
    frames = []
    unstable = 0
    prev = silent
    for t in range(T):
        try:
            fr = cepstra_to_lpc(features.frames[t], grid.sample_rate_hz, order)
        except (UnstableFilterError, InputError) as exc:
            unstable += 1
            log.warning("frame %d: %s; reusing previous stable frame", t, exc)
            fr = prev
        frames.append(fr)
        prev = fr
    if unstable:
        log.warning("%d of %d frames were unstable", unstable, T)

    rng = np.random.default_rng(seed)
    exc = _excitation(frames, hop, rng)

    # reflection coefficients are interpolated sample by sample; any blend of
    # |k| < 1 values is itself stable, unlike blending direct-form taps
    ramp = (np.arange(1, hop + 1) / hop)[:, None]
    out = np.zeros(T * hop)
    hist = np.zeros(order)  # y[n-1], y[n-2], ...
    prev_k = frames[0].reflection if T else None
    for t in range(T):
        cur_k = frames[t].reflection
        a_block = reflection_to_lpc(prev_k + ramp * (cur_k - prev_k))
        base = t * hop
        for j in range(hop):
            y = exc[base + j] + a_block[j] @ hist
            hist[1:] = hist[:-1]
            hist[0] = y
            out[base + j] = y
        prev_k = cur_k
    return AudioSignal(out, grid.sample_rate_hz), unstable
