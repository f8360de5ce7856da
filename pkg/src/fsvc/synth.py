"""Non-autoregressive PPG + log-F0 to LPCNet-feature synthesizer.

Layout: PPG linear -> layer norm -> ReLU -> +position encoding -> encoder
blocks -> concat [log-F0, voicing] -> bridge linear -> +position encoding ->
decoder blocks -> feature linear. Every block is post-norm: self-attention
with residual + layer norm, then a two-layer kernel-3 convolution with
residual + layer norm. Input and output lengths always match.
"""

from __future__ import annotations

import copy
import logging
import statistics
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import nn
from .dsp import FrameGrid, LpcnetFeatureSequence, ProsodyTrack, N_FEATURES
from .errors import InputError, ShapeError
from .ppg import PpgSequence

log = logging.getLogger(__name__)

Params = Dict[str, np.ndarray]
# fixed output de-standardisation, never updated by the optimiser
BUFFERS = ("feat.scale", "feat.shift")


@dataclass(frozen=True)
class SynthesizerConfig:
    n_blocks: int = 2
    model_dim: int = 64
    n_heads: int = 2
    conv_kernel: int = 3
    conv_hidden: Optional[int] = None  # defaults to 4 * model_dim
    ppg_classes: int = 64
    prosody_dim: int = 2
    out_dim: int = N_FEATURES
    seed: int = 0

    @classmethod
    def full(cls, **overrides) -> "SynthesizerConfig":
        """The full-size network: 6 blocks, width 512, 4 heads."""
        base = dict(n_blocks=6, model_dim=512, n_heads=4)
        base.update(overrides)
        return cls(**base)

    @property
    def hidden(self) -> int:
        return self.conv_hidden if self.conv_hidden is not None else 4 * self.model_dim

    def validate(self) -> "SynthesizerConfig":
        ints = asdict(self)
        for name in ("n_blocks", "model_dim", "n_heads", "conv_kernel", "ppg_classes", "prosody_dim"):
            if int(ints[name]) < 1:
                raise InputError(f"{name} must be positive, got {ints[name]}")
        if self.model_dim % self.n_heads:
            raise InputError(f"model_dim {self.model_dim} is not divisible by n_heads {self.n_heads}")
        if self.model_dim % 2:
            raise InputError(f"model_dim must be even for position encodings, got {self.model_dim}")
        if self.conv_kernel % 2 == 0:
            raise InputError(f"conv_kernel must be odd, got {self.conv_kernel}")
        if self.out_dim != N_FEATURES:
            raise InputError(f"out_dim must be {N_FEATURES}, got {self.out_dim}")
        if self.prosody_dim != 2:
            raise InputError("prosody_dim must be 2 ([log-F0, voicing])")
        if self.hidden < 1:
            raise InputError("conv_hidden must be positive")
        return self


@dataclass
class SynthesizerParams:
    config: SynthesizerConfig
    tensors: Params
    meta: Dict[str, str] = field(default_factory=dict)

    def copy(self) -> "SynthesizerParams":
        return SynthesizerParams(
            self.config, {k: v.copy() for k, v in self.tensors.items()}, dict(self.meta)
        )

    def trainable(self) -> List[str]:
        return [k for k in self.tensors if k not in BUFFERS]

    def n_parameters(self) -> int:
        return int(sum(self.tensors[k].size for k in self.trainable()))

    def astype(self, dtype) -> "SynthesizerParams":
        return SynthesizerParams(
            self.config, {k: v.astype(dtype) for k, v in self.tensors.items()}, dict(self.meta)
        )


def _block_names(prefix: str) -> List[str]:
    names = [f"{prefix}.attn.{k}" for k in nn.ATTN_KEYS]
    names += [f"{prefix}.ln1.g", f"{prefix}.ln1.b"]
    names += [f"{prefix}.conv1.w", f"{prefix}.conv1.b", f"{prefix}.conv2.w", f"{prefix}.conv2.b"]
    names += [f"{prefix}.ln2.g", f"{prefix}.ln2.b"]
    return names


def build_synthesizer(config: SynthesizerConfig) -> SynthesizerParams:
    cfg = config.validate()
    rng = np.random.default_rng(cfg.seed)
    D, H, K, k = cfg.model_dim, cfg.hidden, cfg.ppg_classes, cfg.conv_kernel
    t: Params = {}

    def dense(name, fan_in, fan_out):
        t[f"{name}.w"] = nn.glorot_uniform(rng, (fan_in, fan_out), fan_in, fan_out)
        t[f"{name}.b"] = np.zeros(fan_out)

    def norm(name, width):
        t[f"{name}.g"] = np.ones(width)
        t[f"{name}.b"] = np.zeros(width)

    def block(prefix):
        for proj in ("q", "k", "v", "o"):
            t[f"{prefix}.attn.w{proj}"] = nn.glorot_uniform(rng, (D, D), D, D)
            t[f"{prefix}.attn.b{proj}"] = np.zeros(D)
        norm(f"{prefix}.ln1", D)
        t[f"{prefix}.conv1.w"] = nn.glorot_uniform(rng, (k, D, H), k * D, k * H)
        t[f"{prefix}.conv1.b"] = np.zeros(H)
        t[f"{prefix}.conv2.w"] = nn.glorot_uniform(rng, (k, H, D), k * H, k * D)
        t[f"{prefix}.conv2.b"] = np.zeros(D)
        norm(f"{prefix}.ln2", D)

    dense("ppg", K, D)
    norm("ppg.ln", D)
    for i in range(cfg.n_blocks):
        block(f"enc.{i}")
    dense("bridge", D + cfg.prosody_dim, D)
    for i in range(cfg.n_blocks):
        block(f"dec.{i}")
    dense("feat", D, cfg.out_dim)
    t["feat.scale"] = np.ones(cfg.out_dim)
    t["feat.shift"] = np.zeros(cfg.out_dim)
    return SynthesizerParams(cfg, t, {"seed": str(cfg.seed)})


def prosody_inputs(prosody: ProsodyTrack) -> np.ndarray:
    """T x 2 matrix ``[normalised log-F0, voicing]`` fed to the bridge."""
    return np.column_stack([prosody.log_f0, prosody.voicing]).astype(np.float64)


# --- forward / backward -----------------------------------------------------


def _sub(t: Params, prefix: str) -> Params:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in t.items() if k.startswith(prefix + ".")}


def _block_forward(h, t: Params, prefix: str, n_heads: int, want_cache: bool):
    attn_p = _sub(t, prefix + ".attn")
    a, c_attn = nn.multi_head_self_attention(h, attn_p, n_heads)
    h1, c_ln1 = nn.layer_norm(h + a, t[prefix + ".ln1.g"], t[prefix + ".ln1.b"])
    z1, c_conv1 = nn.conv1d(h1, t[prefix + ".conv1.w"], t[prefix + ".conv1.b"])
    r1 = nn.relu(z1)
    z2, c_conv2 = nn.conv1d(r1, t[prefix + ".conv2.w"], t[prefix + ".conv2.b"])
    h2, c_ln2 = nn.layer_norm(h1 + z2, t[prefix + ".ln2.g"], t[prefix + ".ln2.b"])
    cache = (attn_p, c_attn, c_ln1, c_conv1, z1, c_conv2, c_ln2) if want_cache else None
    return h2, cache


def _block_backward(dh2, cache, prefix: str, grads: Params):
    attn_p, c_attn, c_ln1, c_conv1, z1, c_conv2, c_ln2 = cache
    ds, grads[prefix + ".ln2.g"], grads[prefix + ".ln2.b"] = nn.layer_norm_backward(dh2, c_ln2)
    dr1, grads[prefix + ".conv2.w"], grads[prefix + ".conv2.b"] = nn.conv1d_backward(ds, c_conv2)
    dz1 = nn.relu_backward(dr1, z1)
    dh1, grads[prefix + ".conv1.w"], grads[prefix + ".conv1.b"] = nn.conv1d_backward(dz1, c_conv1)
    dh1 = dh1 + ds
    dsum, grads[prefix + ".ln1.g"], grads[prefix + ".ln1.b"] = nn.layer_norm_backward(dh1, c_ln1)
    dh_attn, g_attn = nn.multi_head_self_attention_backward(dsum, c_attn, attn_p)
    for k, v in g_attn.items():
        grads[f"{prefix}.attn.{k}"] = v
    return dsum + dh_attn


def _encode(t: Params, cfg: SynthesizerConfig, x_ppg, want_cache: bool):
    T = x_ppg.shape[0]
    e = nn.linear(x_ppg, t["ppg.w"], t["ppg.b"])
    n, c_ln = nn.layer_norm(e, t["ppg.ln.g"], t["ppg.ln.b"])
    h = nn.relu(n) + nn.position_encoding(T, cfg.model_dim, x_ppg.dtype)
    caches = [(e, c_ln, n)]
    for i in range(cfg.n_blocks):
        h, c = _block_forward(h, t, f"enc.{i}", cfg.n_heads, want_cache)
        caches.append(c)
    return h, caches


def _bridge(t: Params, cfg: SynthesizerConfig, h_enc, x_pros):
    T = h_enc.shape[0]
    cat = np.concatenate([h_enc, x_pros.astype(h_enc.dtype)], axis=1)
    z = nn.linear(cat, t["bridge.w"], t["bridge.b"])
    return z + nn.position_encoding(T, cfg.model_dim, h_enc.dtype), cat


def _decode(t: Params, cfg: SynthesizerConfig, z, want_cache: bool):
    h = z
    caches = []
    for i in range(cfg.n_blocks):
        h, c = _block_forward(h, t, f"dec.{i}", cfg.n_heads, want_cache)
        caches.append(c)
    out = nn.linear(h, t["feat.w"], t["feat.b"])
    return out * t["feat.scale"] + t["feat.shift"], (h, caches)


def forward_arrays(t: Params, cfg: SynthesizerConfig, x_ppg, x_pros, want_cache: bool = False):
    """Array-level forward: ``(T, K)`` log-PPG + ``(T, 2)`` prosody -> ``(T, 20)``."""
    h_enc, enc_caches = _encode(t, cfg, x_ppg, want_cache)
    z, cat = _bridge(t, cfg, h_enc, x_pros)
    y, (h_dec, dec_caches) = _decode(t, cfg, z, want_cache)
    cache = (x_ppg, enc_caches, cat, h_dec, dec_caches) if want_cache else None
    return y, cache


def backward_arrays(t: Params, cfg: SynthesizerConfig, dy, cache) -> Params:
    """Gradients of a scalar loss w.r.t. every trainable tensor, given ``dL/dy``."""
    x_ppg, enc_caches, cat, h_dec, dec_caches = cache
    g: Params = {}
    dout = dy * t["feat.scale"]
    dh, g["feat.w"], g["feat.b"] = nn.linear_backward(dout, h_dec, t["feat.w"])
    for i in reversed(range(cfg.n_blocks)):
        dh = _block_backward(dh, dec_caches[i], f"dec.{i}", g)
    dcat, g["bridge.w"], g["bridge.b"] = nn.linear_backward(dh, cat, t["bridge.w"])
    dh = dcat[:, : cfg.model_dim]
    for i in reversed(range(cfg.n_blocks)):
        dh = _block_backward(dh, enc_caches[i + 1], f"enc.{i}", g)
    e, c_ln, n = enc_caches[0]
    dn = nn.relu_backward(dh, n)
    de, g["ppg.ln.g"], g["ppg.ln.b"] = nn.layer_norm_backward(dn, c_ln)
    _, g["ppg.w"], g["ppg.b"] = nn.linear_backward(de, x_ppg, t["ppg.w"])
    return g


def _check_inputs(params: SynthesizerParams, ppg: PpgSequence, prosody: ProsodyTrack):
    if len(ppg) != len(prosody):
        raise ShapeError(f"PPG has {len(ppg)} frames but prosody has {len(prosody)}")
    if len(ppg) < 1:
        raise ShapeError("empty input sequence")
    if ppg.n_classes != params.config.ppg_classes:
        raise ShapeError(
            f"PPG has {ppg.n_classes} classes, synthesizer expects {params.config.ppg_classes}"
        )


def synth_forward(
    params: SynthesizerParams, ppg: PpgSequence, prosody: ProsodyTrack
) -> LpcnetFeatureSequence:
    _check_inputs(params, ppg, prosody)
    if not prosody.normalized:
        log.warning("prosody track is not normalised; feeding raw log-F0")
    y, _ = forward_arrays(params.tensors, params.config, ppg.log_post, prosody_inputs(prosody))
    grid = ppg.grid if ppg.grid is not None else FrameGrid()
    return LpcnetFeatureSequence(y, grid.with_frames(y.shape[0]))


# --- training ---------------------------------------------------------------


def mse_loss(y, target) -> Tuple[float, np.ndarray]:
    diff = y - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


Example = Tuple[PpgSequence, ProsodyTrack, LpcnetFeatureSequence]


def fit_output_scaling(params: SynthesizerParams, dataset: Sequence[Example]) -> None:
    """Set the fixed output shift/scale to the per-dimension target statistics."""
    allf = np.concatenate([f.frames for _, _, f in dataset], axis=0)
    params.tensors["feat.shift"] = allf.mean(axis=0)
    params.tensors["feat.scale"] = np.maximum(allf.std(axis=0), 1e-3)


def train_synthesizer(
    params: SynthesizerParams,
    dataset: Sequence[Example],
    epochs: int,
    batch_size: int = 32,
    lr: float = 1e-3,
    seed: int = 0,
    init_from: Optional[SynthesizerParams] = None,
    on_epoch: Optional[Callable[[int, float], None]] = None,
) -> SynthesizerParams:
    """Minimise frame-level MSE with Adam; returns a new parameter set.

    Each mini-batch holds up to ``batch_size`` utterances; the loss is the
    mean over every frame and dimension in the batch. With ``init_from`` the
    weights start from that checkpoint (adaptation / fine-tuning).
    """
    if not dataset:
        raise InputError("training set is empty")
    for i, (ppg, pros, feat) in enumerate(dataset):
        if not (len(ppg) == len(pros) == len(feat)) or len(ppg) == 0:
            raise ShapeError(
                f"example {i}: lengths ppg={len(ppg)} prosody={len(pros)} features={len(feat)}"
            )
    start = init_from if init_from is not None else params
    if init_from is not None and init_from.config != params.config:
        log.info("init_from config differs from target config; using checkpoint config")
    out = start.copy()
    t, cfg = out.tensors, out.config
    if epochs <= 0:
        return out

    arrays = [
        (p.log_post.astype(np.float64), prosody_inputs(pr), f.frames.astype(np.float64))
        for p, pr, f in dataset
    ]
    opt = nn.Adam(lr=lr)
    rng = np.random.default_rng(seed)
    history = []
    trainable = out.trainable()
    for epoch in range(epochs):
        order = rng.permutation(len(arrays))
        total, count = 0.0, 0
        for s in range(0, len(order), batch_size):
            batch = [arrays[j] for j in order[s : s + batch_size]]
            n_vals = sum(a[2].size for a in batch)
            grads = {k: np.zeros_like(t[k]) for k in trainable}
            batch_loss = 0.0
            # fixed accumulation order keeps training bit-reproducible
            for x_ppg, x_pros, target in batch:
                y, cache = forward_arrays(t, cfg, x_ppg, x_pros, want_cache=True)
                diff = y - target
                batch_loss += float(np.sum(diff * diff))
                g = backward_arrays(t, cfg, 2.0 * diff / n_vals, cache)
                for k in trainable:
                    grads[k] += g[k]
            opt.step(t, grads)
            total += batch_loss
            count += n_vals
        epoch_loss = total / count
        history.append(epoch_loss)
        if on_epoch is not None:
            on_epoch(epoch, epoch_loss)
    out.meta["epochs"] = str(int(out.meta.get("epochs", "0")) + epochs)
    out.meta["final_loss"] = repr(history[-1])
    out.meta["loss_history"] = ",".join(repr(v) for v in history)
    return out


def evaluate_mse(params: SynthesizerParams, dataset: Sequence[Example]) -> float:
    total, count = 0.0, 0
    for ppg, pros, feat in dataset:
        y, _ = forward_arrays(params.tensors, params.config, ppg.log_post, prosody_inputs(pros))
        d = y - feat.frames
        total += float(np.sum(d * d))
        count += d.size
    return total / count


# --- rate control -----------------------------------------------------------

RATE_MIN, RATE_MAX = 0.5, 2.0


def resample_for_rate(
    ppg: PpgSequence, prosody: ProsodyTrack, rate: float
) -> Tuple[PpgSequence, ProsodyTrack]:
    """Stretch or squeeze the inputs in time; ``rate > 1`` means faster speech."""
    if not (RATE_MIN <= rate <= RATE_MAX):
        raise InputError(f"rate {rate} outside [{RATE_MIN}, {RATE_MAX}]")
    T = len(ppg)
    if T != len(prosody):
        raise ShapeError(f"PPG has {T} frames but prosody has {len(prosody)}")
    if T < 2:
        raise InputError("rate control needs at least 2 frames")
    T_out = int(round(T / rate))
    if T_out == T:
        # sampling positions land on the input frames; skip the exp/log round trip
        return copy.deepcopy(ppg), copy.deepcopy(prosody)
    # endpoints map onto endpoints, so rate 1.0 samples exactly at the input frames
    pos = np.linspace(0.0, T - 1, T_out) if T_out > 1 else np.zeros(1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, T - 1)
    w = (pos - lo)[:, None]

    probs = np.exp(ppg.log_post)
    mixed = (1.0 - w) * probs[lo] + w * probs[hi]
    mixed /= mixed.sum(axis=1, keepdims=True)
    new_ppg = PpgSequence.from_probs(mixed, ppg.grid.with_frames(T_out) if ppg.grid else None)

    def lerp(v):
        return (1.0 - w[:, 0]) * v[lo] + w[:, 0] * v[hi]

    nearest = np.clip(np.round(pos).astype(int), 0, T - 1)
    new_pros = ProsodyTrack(
        lerp(prosody.log_f0),
        prosody.voicing[nearest].copy(),
        lerp(prosody.pitch_corr),
        prosody.stats,
        prosody.normalized,
    )
    return new_ppg, new_pros


# --- latency benchmark ------------------------------------------------------

MODES = ("parallel", "ar_emulation")


def _random_inputs(cfg: SynthesizerConfig, T: int, seed: int, dtype):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((T, cfg.ppg_classes))
    x_ppg = nn.log_softmax(logits).astype(dtype)
    x_pros = np.column_stack([rng.standard_normal(T), rng.random(T) > 0.3]).astype(dtype)
    return x_ppg, x_pros


def generate(t: Params, cfg: SynthesizerConfig, x_ppg, x_pros, mode: str) -> np.ndarray:
    """Produce all output frames, either in one pass or prefix by prefix."""
    if mode == "parallel":
        return forward_arrays(t, cfg, x_ppg, x_pros)[0]
    if mode != "ar_emulation":
        raise InputError(f"unknown mode {mode!r}; expected one of {MODES}")
    h_enc, _ = _encode(t, cfg, x_ppg, False)
    z, _ = _bridge(t, cfg, h_enc, x_pros)
    T = z.shape[0]
    out = np.empty((T, cfg.out_dim), dtype=z.dtype)
    for i in range(T):
        # frame i costs a decoder pass over the whole prefix, as a frame-by-frame
        # autoregressive decoder would
        y, _ = _decode(t, cfg, z[: i + 1], False)
        out[i] = y[-1]
    return out


@dataclass
class BenchResult:
    mode: str
    T: int
    times_ms: List[float]
    output_shape: Tuple[int, int]

    @property
    def median_ms(self) -> float:
        return float(statistics.median(self.times_ms))

    @property
    def p90_ms(self) -> float:
        return float(np.percentile(self.times_ms, 90))


def benchmark_inference(
    params: SynthesizerParams,
    T: int,
    mode: str,
    repeats: int = 5,
    seed: int = 0,
    dtype=np.float32,
) -> BenchResult:
    if T < 16:
        raise InputError(f"benchmark needs T >= 16, got {T}")
    if mode not in MODES:
        raise InputError(f"unknown mode {mode!r}; expected one of {MODES}")
    cfg = params.config
    t = {k: v.astype(dtype) for k, v in params.tensors.items()}
    x_ppg, x_pros = _random_inputs(cfg, T, seed, dtype)
    generate(t, cfg, x_ppg[:16], x_pros[:16], mode)  # warm-up
    times = []
    shape = (0, 0)
    for _ in range(max(1, repeats)):
        t0 = time.perf_counter()
        y = generate(t, cfg, x_ppg, x_pros, mode)
        times.append((time.perf_counter() - t0) * 1000.0)
        shape = y.shape
    return BenchResult(mode, T, times, shape)


def speedup(ar: BenchResult, par: BenchResult) -> float:
    return ar.median_ms / par.median_ms
