"""Phonetic posteriorgram extraction.

A per-frame feed-forward classifier (39 -> H -> H -> K, tanh) over
standardised MFCC frames, trained with cross-entropy and Adam. Output rows
are log posteriors floored at ``PROB_FLOOR``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np

from . import nn
from .dsp import FrameGrid, MfccSequence
from .errors import InputError, ShapeError

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-8
LOG_FLOOR = math.log(PROB_FLOOR)
N_MFCC = 39
LAYERS = ("l1", "l2", "out")


@dataclass(frozen=True)
class PpgSequence:
    log_post: np.ndarray  # T x K
    grid: Optional[FrameGrid] = None

    def __post_init__(self):
        lp = np.asarray(self.log_post, dtype=np.float64)
        if lp.ndim != 2 or lp.shape[1] < 1:
            raise ShapeError(f"PPG must be T x K, got {lp.shape}")
        object.__setattr__(self, "log_post", lp)

    @property
    def n_classes(self) -> int:
        return self.log_post.shape[1]

    def __len__(self):
        return self.log_post.shape[0]

    @classmethod
    def from_probs(cls, probs: np.ndarray, grid: Optional[FrameGrid] = None) -> "PpgSequence":
        """Floor, renormalise and take logs of a row-stochastic matrix."""
        p = np.maximum(np.asarray(probs, dtype=np.float64), PROB_FLOOR)
        p /= p.sum(axis=1, keepdims=True)
        # renormalising nudges floored entries a hair under the floor
        return cls(np.minimum(np.maximum(np.log(p), LOG_FLOOR), 0.0), grid)


@dataclass
class PpgExtractorParams:
    tensors: Dict[str, np.ndarray]
    n_classes: int
    meta: Dict[str, str] = field(default_factory=dict)

    @property
    def hidden(self) -> int:
        return self.tensors["l1.w"].shape[1]

    def copy(self) -> "PpgExtractorParams":
        return PpgExtractorParams(
            {k: v.copy() for k, v in self.tensors.items()}, self.n_classes, dict(self.meta)
        )

    def trainable(self):
        return [f"{l}.{p}" for l in LAYERS for p in ("w", "b")]


def init_ppg_extractor(n_classes: int = 64, hidden: int = 128, seed: int = 0) -> PpgExtractorParams:
    if n_classes < 1 or hidden < 1:
        raise InputError("n_classes and hidden must be positive")
    rng = np.random.default_rng(seed)
    t = {}
    for name, (i, o) in zip(LAYERS, [(N_MFCC, hidden), (hidden, hidden), (hidden, n_classes)]):
        t[f"{name}.w"] = nn.glorot_uniform(rng, (i, o), i, o)
        t[f"{name}.b"] = np.zeros(o)
    # input standardisation; identity until fitted on training data
    t["norm.mean"] = np.zeros(N_MFCC)
    t["norm.std"] = np.ones(N_MFCC)
    return PpgExtractorParams(t, n_classes, {"seed": str(seed), "epochs": "0"})


def _forward(t, x, want_cache=False):
    xn = (x - t["norm.mean"]) / t["norm.std"]
    z1 = nn.linear(xn, t["l1.w"], t["l1.b"])
    h1 = np.tanh(z1)
    z2 = nn.linear(h1, t["l2.w"], t["l2.b"])
    h2 = np.tanh(z2)
    logits = nn.linear(h2, t["out.w"], t["out.b"])
    return logits, ((xn, h1, h2) if want_cache else None)


def _backward(t, dlogits, cache):
    xn, h1, h2 = cache
    g = {}
    dh2, g["out.w"], g["out.b"] = nn.linear_backward(dlogits, h2, t["out.w"])
    dz2 = dh2 * (1.0 - h2 * h2)
    dh1, g["l2.w"], g["l2.b"] = nn.linear_backward(dz2, h1, t["l2.w"])
    dz1 = dh1 * (1.0 - h1 * h1)
    _, g["l1.w"], g["l1.b"] = nn.linear_backward(dz1, xn, t["l1.w"])
    return g


def loss_and_grads(params: PpgExtractorParams, x: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the rows of ``x`` and its parameter gradients."""
    logits, cache = _forward(params.tensors, x, want_cache=True)
    loss, dlogits = nn.cross_entropy(logits, labels)
    return loss, _backward(params.tensors, dlogits, cache)


def _stack(frames, labels):
    if len(frames) != len(labels):
        raise ShapeError(f"{len(frames)} feature sequences but {len(labels)} label sequences")
    xs, ys = [], []
    for i, (f, lab) in enumerate(zip(frames, labels)):
        m = f.frames if isinstance(f, MfccSequence) else np.asarray(f, dtype=np.float64)
        lab = np.asarray(lab)
        if m.ndim != 2 or m.shape[1] != N_MFCC:
            raise ShapeError(f"sequence {i}: expected T x {N_MFCC} MFCC frames, got {m.shape}")
        if lab.shape != (m.shape[0],):
            raise ShapeError(f"sequence {i}: {m.shape[0]} frames but {lab.shape} labels")
        xs.append(m)
        ys.append(lab)
    if not xs or sum(len(y) for y in ys) == 0:
        raise InputError("training set is empty")
    return np.concatenate(xs).astype(np.float64), np.concatenate(ys).astype(np.int64)


def train_ppg_extractor(
    frames: Sequence,
    labels: Sequence,
    n_classes: int = 64,
    hidden: int = 128,
    epochs: int = 50,
    batch_size: int = 256,
    lr: float = 1e-3,
    seed: int = 0,
) -> PpgExtractorParams:
    x, y = _stack(frames, labels)
    if y.min() < 0 or y.max() >= n_classes:
        raise InputError(f"class ids must lie in [0, {n_classes}), got [{y.min()}, {y.max()}]")
    missing = np.setdiff1d(np.arange(n_classes), y)
    if missing.size:
        raise InputError(f"{missing.size} classes have no training frames (first: {missing[0]})")

    params = init_ppg_extractor(n_classes, hidden, seed)
    t = params.tensors
    t["norm.mean"] = x.mean(axis=0)
    t["norm.std"] = np.maximum(x.std(axis=0), 1e-6)
    if epochs <= 0:
        return params

    opt = nn.Adam(lr=lr)
    rng = np.random.default_rng(seed)
    history = []
    n = x.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        for s in range(0, n, batch_size):
            idx = order[s : s + batch_size]
            _, g = loss_and_grads(params, x[idx], y[idx])
            opt.step(t, g)
        history.append(loss_and_grads(params, x, y)[0])
    params.meta.update(
        epochs=str(epochs),
        initial_loss=repr(history[0]),
        final_loss=repr(history[-1]),
        loss_history=",".join(repr(v) for v in history),
    )
    return params


def extract_ppg(params: PpgExtractorParams, mfcc) -> PpgSequence:
    m = mfcc.frames if isinstance(mfcc, MfccSequence) else np.asarray(mfcc, dtype=np.float64)
    if m.ndim != 2 or m.shape[1] != N_MFCC:
        raise ShapeError(f"expected T x {N_MFCC} MFCC frames, got {m.shape}")
    logits, _ = _forward(params.tensors, m)
    grid = mfcc.grid if isinstance(mfcc, MfccSequence) else None
    return PpgSequence.from_probs(nn.softmax(logits), grid)


def predict_classes(params: PpgExtractorParams, mfcc) -> np.ndarray:
    return np.argmax(extract_ppg(params, mfcc).log_post, axis=1)


def pseudo_labels(frames: Sequence[MfccSequence], n_classes: int, seed: int = 0):
    """Cluster MFCC frames into ``n_classes`` acoustic units (k-means).

    Stand-in for forced-alignment senone labels when none are supplied.
    Empty clusters are dropped, so the returned class count may be smaller.
    """
    from scipy.cluster.vq import kmeans2

    x = np.concatenate([f.frames for f in frames]).astype(np.float64)
    if x.shape[0] < n_classes:
        raise InputError(f"{x.shape[0]} frames cannot seed {n_classes} clusters")
    xn = (x - x.mean(axis=0)) / np.maximum(x.std(axis=0), 1e-6)
    _, lab = kmeans2(xn, n_classes, minit="++", seed=seed)
    used, lab = np.unique(lab, return_inverse=True)
    if used.size < n_classes:
        log.warning("k-means left %d of %d clusters empty", n_classes - used.size, n_classes)
    out, start = [], 0
    for f in frames:
        out.append(lab[start : start + len(f.frames)])
        start += len(f.frames)
    return out, int(used.size)
