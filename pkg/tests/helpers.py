"""Signal generators and independent oracles used across the test suite.

Oracles here deliberately avoid the package's own code paths: DCT by its
defining double sum, autocorrelation by explicit loops, Yule-Walker by a
dense solve, gradients by central differences.
"""

import math

import numpy as np
from scipy.signal import lfilter

from fsvc.dsp import AudioSignal, LpcnetFeatureSequence, ProsodyTrack
from fsvc.ppg import PpgSequence

SR = 16000

# vowel-ish all-pole filters (two resonances each)
FORMANTS = [(700, 1200), (300, 2300), (500, 900), (400, 2000), (600, 1700)]


def resonator(freqs, radius=0.95):
    a = np.array([1.0])
    for f in freqs:
        th = 2 * np.pi * f / SR
        a = np.convolve(a, [1.0, -2 * radius * np.cos(th), radius * radius])
    return a


def harmonic_tone(f0_hz, n, amp=1.0):
    """Band-limited sawtooth-like harmonic series with a per-sample F0 track."""
    f0 = np.broadcast_to(np.asarray(f0_hz, dtype=float), (n,))
    phase = 2 * np.pi * np.cumsum(f0) / SR
    x = np.zeros(n)
    for h in range(1, 40):
        mask = h * f0 < SR / 2 - 200
        x += np.where(mask, np.sin(h * phase) / h, 0.0)
    return amp * x


def vowel_signal(f0=200.0, seconds=1.0, formants=(700, 1200), peak=0.5):
    n = int(seconds * SR)
    x = lfilter([1.0], resonator(formants), harmonic_tone(f0, n))
    return AudioSignal(peak * x / np.abs(x).max())


def speechlike(seed=0, seconds=1.0, f0_mean=180.0, silence_frac=0.15, peak=0.6):
    """Phone-like segments with a gliding, vibrato F0 and a silent tail."""
    rng = np.random.default_rng(seed)
    n = int(seconds * SR)
    t = np.arange(n) / SR
    f0 = f0_mean * (1 + 0.08 * np.sin(2 * np.pi * 3.0 * t + rng.uniform(0, 6)) + 0.05 * t)
    src = harmonic_tone(f0, n)
    out = np.zeros(n)
    seg = int(0.1 * SR)
    for s in range(0, n, seg):
        fm = FORMANTS[rng.integers(len(FORMANTS))]
        chunk = src[s : s + seg]
        if rng.random() < 0.2:
            chunk = rng.standard_normal(chunk.shape) * 0.3  # fricative-like
        out[s : s + seg] = lfilter([1.0], resonator(fm), chunk)
    out = peak * out / np.abs(out).max()
    out[int(n * (1 - silence_frac)) :] = 0.0
    return AudioSignal(out)


def samples_for_frames(T, window=400, hop=160):
    return window + (T - 1) * hop


# --- oracles -----------------------------------------------------------------


def dct2_direct(x):
    """Orthonormal DCT-II by its defining sum."""
    N = len(x)
    out = np.zeros(N)
    for k in range(N):
        s = sum(x[n] * math.cos(math.pi * k * (2 * n + 1) / (2 * N)) for n in range(N))
        out[k] = s * (math.sqrt(1.0 / N) if k == 0 else math.sqrt(2.0 / N))
    return out


def nacf_direct(seg, lag):
    a, b = seg[: len(seg) - lag], seg[lag:]
    den = math.sqrt(float(np.dot(a, a)) * float(np.dot(b, b)))
    return 0.0 if den == 0 else float(np.dot(a, b)) / den


def nacf_peak_oracle(signal, grid, lag_min=32, lag_max=320, half=320):
    """Max normalised autocorrelation over the F0 band for each frame."""
    x = np.pad(signal.samples, (half, half + grid.window_samples))
    peaks = []
    for t in range(grid.n_frames):
        c = t * grid.hop_samples + grid.window_samples // 2
        seg = x[c : c + 2 * half]
        peaks.append(max(nacf_direct(seg, L) for L in range(lag_min, lag_max + 1)))
    return np.array(peaks)


def yule_walker_dense(r):
    p = len(r) - 1
    R = np.array([[r[abs(i - j)] for j in range(p)] for i in range(p)])
    return np.linalg.solve(R, r[1:])


def numeric_grad(f, arr, h=1e-5):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr`` (in place)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        fp = f()
        arr[i] = old - h
        fm = f()
        arr[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(analytic, numeric, floor=1e-12):
    """Norm-wise relative error; ``floor`` keeps identically-zero gradients
    (where the difference is pure round-off) from dividing by ~0."""
    a = np.asarray(analytic, dtype=float).ravel()
    n = np.asarray(numeric, dtype=float).ravel()
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), floor))


def gradient_report(loss, params, grads, h=1e-5):
    """Relative error per tensor. The floor is 1e-6 of the global gradient
    norm, so tensors with an exactly-zero true gradient (attention key
    biases) are judged on round-off size rather than on 0/0."""
    total = math.sqrt(sum(float(np.sum(grads[k] ** 2)) for k in grads))
    floor = max(1e-6 * total, 1e-12)
    return {k: rel_error(grads[k], numeric_grad(loss, params[k], h), floor) for k in grads}


# --- synthetic training data --------------------------------------------------


def synthetic_utterance(T=50, K=64, seed=0):
    """Piecewise phone posteriors, smooth normalised log-F0, and targets that
    depend on both (so the network has to use each input)."""
    rng = np.random.default_rng(seed)
    pool = np.arange(3, max(T - 3, 3))
    cuts = np.sort(rng.choice(pool, min(7, len(pool)), replace=False))
    lab = np.zeros(T, dtype=int)
    for b in cuts:
        lab[b:] += 1
    cls = rng.choice(K, 8, replace=False)[lab]
    probs = np.full((T, K), 0.02 / K)
    probs[np.arange(T), cls] += 0.98
    ppg = PpgSequence.from_probs(probs)
    t = np.arange(T)
    lf0 = np.log(150 + 30 * np.sin(2 * np.pi * t / 40))
    v = (np.sin(2 * np.pi * t / 17) > -0.6).astype(float)
    pros = ProsodyTrack((lf0 - lf0.mean()) / lf0.std(), v, 0.8 * v, (lf0.mean(), lf0.std()), True)
    W = rng.standard_normal((K, 20))
    feat = probs @ W * 0.5 + np.outer(pros.log_f0, rng.standard_normal(20)) * 0.3
    feat = feat + 0.1 * np.sin(np.outer(t, rng.uniform(0.1, 0.5, 20)))
    return ppg, pros, LpcnetFeatureSequence(feat)


def random_inputs(T, K, seed=0):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((T, K)) * 2
    probs = np.exp(logits - logits.max(1, keepdims=True))
    probs /= probs.sum(1, keepdims=True)
    lf0 = rng.standard_normal(T)
    v = (rng.random(T) > 0.3).astype(float)
    return PpgSequence.from_probs(probs), ProsodyTrack(lf0, v, 0.7 * v, (5.0, 0.2), True)
