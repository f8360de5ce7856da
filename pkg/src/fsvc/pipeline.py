"""Train/convert workflow tying the front end, PPG extractor, synthesizer and
vocoder together. Each ``cmd_*`` function backs one CLI sub-command.
"""

from __future__ import annotations

import csv
import io
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import dsp, formats, synth
from .dsp import AudioSignal, FrameGrid, LpcnetFeatureSequence, ProsodyTrack
from .errors import DegenerateError, FormatError, InputError
from .formats import PipelineConfig
from .ppg import (
    PpgExtractorParams,
    extract_ppg,
    init_ppg_extractor,
    pseudo_labels,
    train_ppg_extractor,
)
from .vocoder import lpc_synthesize

log = logging.getLogger(__name__)

PROFILE_KEYS = ("speaker_id", "logf0_mean", "logf0_std", "checkpoint", "extractor", "n_utterances", "seed")


@dataclass
class SpeakerProfile:
    speaker_id: str
    logf0_mean: float
    logf0_std: float
    checkpoint: Path
    extractor: Path
    n_utterances: int = 0
    seed: int = 0

    def save(self, path) -> None:
        path = Path(path)
        base = path.parent.resolve()
        items = {
            "speaker_id": self.speaker_id,
            "logf0_mean": repr(self.logf0_mean),
            "logf0_std": repr(self.logf0_std),
            "checkpoint": os.path.relpath(Path(self.checkpoint).resolve(), base),
            "extractor": os.path.relpath(Path(self.extractor).resolve(), base),
            "n_utterances": self.n_utterances,
            "seed": self.seed,
        }
        path.write_text(formats.format_kv(items), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SpeakerProfile":
        path = Path(path)
        if not path.is_file():
            raise InputError(f"profile {path} does not exist")
        raw = formats.parse_kv(path.read_text(encoding="utf-8"), str(path))
        unknown = set(raw) - set(PROFILE_KEYS)
        missing = set(PROFILE_KEYS) - set(raw)
        if unknown or missing:
            raise FormatError(f"{path}: unknown keys {sorted(unknown)}, missing keys {sorted(missing)}")
        try:
            prof = cls(
                raw["speaker_id"],
                float(raw["logf0_mean"]),
                float(raw["logf0_std"]),
                path.parent / raw["checkpoint"],
                path.parent / raw["extractor"],
                int(raw["n_utterances"]),
                int(raw["seed"]),
            )
        except ValueError as exc:
            raise FormatError(f"{path}: {exc}") from exc
        if not prof.logf0_std > 1e-8:
            raise FormatError(f"{path}: logf0_std {prof.logf0_std} is degenerate")
        for p in (prof.checkpoint, prof.extractor):
            if not p.is_file():
                raise InputError(f"{path}: referenced file {p} does not exist")
        return prof

    @property
    def stats(self):
        return self.logf0_mean, self.logf0_std


def _load_config(config) -> PipelineConfig:
    if config is None:
        return PipelineConfig()
    if isinstance(config, PipelineConfig):
        return config.validate()
    return PipelineConfig.load(config)


def _wav_files(corpus_dir) -> List[Path]:
    d = Path(corpus_dir)
    if not d.is_dir():
        raise InputError(f"corpus directory {d} does not exist")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() == ".wav")
    if not files:
        raise InputError(f"corpus directory {d} contains no .wav files")
    return files


@dataclass
class Analysis:
    grid: FrameGrid
    mfcc: dsp.MfccSequence
    prosody: ProsodyTrack
    features: LpcnetFeatureSequence


def analyze_signal(signal: AudioSignal, cfg: PipelineConfig) -> Analysis:
    return Analysis(*dsp.analyze(signal, cfg.window_ms, cfg.hop_ms))


def cmd_extract(
    wav_in,
    mfcc_out=None,
    ppg_out=None,
    prosody_out=None,
    feat_out=None,
    ppg_model=None,
    config=None,
) -> Analysis:
    cfg = _load_config(config)
    if ppg_out is not None and ppg_model is None:
        raise InputError("PPG output requested but no extractor model given")
    a = analyze_signal(formats.read_wav(wav_in), cfg)
    if mfcc_out is not None:
        formats.save_features(mfcc_out, a.mfcc.frames, a.grid)
    if prosody_out is not None:
        formats.save_features(prosody_out, a.prosody.as_matrix(), a.grid)
    if feat_out is not None:
        formats.save_features(feat_out, a.features.frames, a.grid)
    if ppg_out is not None:
        extractor = formats.load_ppg_extractor(ppg_model)
        formats.save_ppg_file(extract_ppg(extractor, a.mfcc), ppg_out)
    return a


def _read_labels(path: Path, n_frames: int) -> np.ndarray:
    try:
        lab = np.array([int(tok) for tok in path.read_text().split()], dtype=np.int64)
    except ValueError as exc:
        raise FormatError(f"{path}: labels must be integers") from exc
    if lab.shape[0] != n_frames:
        raise FormatError(f"{path}: {lab.shape[0]} labels for {n_frames} frames")
    return lab


def cmd_train_ppg(corpus_dir, model_out, config=None) -> PpgExtractorParams:
    """Train the extractor on a wav corpus.

    Frame labels come from ``<stem>.lab`` files (one integer per frame) when
    every wav has one; otherwise k-means pseudo-labels over MFCC frames are used.
    """
    cfg = _load_config(config)
    files = _wav_files(corpus_dir)
    mfccs = [analyze_signal(formats.read_wav(f), cfg).mfcc for f in files]
    lab_files = [f.with_suffix(".lab") for f in files]
    if all(p.is_file() for p in lab_files):
        labels = [_read_labels(p, len(m.frames)) for p, m in zip(lab_files, mfccs)]
        k = cfg.ppg_classes
    else:
        log.info("no complete set of .lab files; clustering MFCC frames into %d classes", cfg.ppg_classes)
        labels, k = pseudo_labels(mfccs, cfg.ppg_classes, cfg.seed)
    params = train_ppg_extractor(
        mfccs, labels, n_classes=k, hidden=cfg.ppg_hidden, epochs=cfg.ppg_epochs,
        batch_size=cfg.ppg_batch, lr=cfg.ppg_lr, seed=cfg.seed,
    )
    formats.save_ppg_extractor(params, model_out)
    return params


def build_corpus(files: Sequence[Path], extractor: PpgExtractorParams, cfg: PipelineConfig):
    """Extract ``(ppg, raw prosody, features)`` per file, skipping unusable ones."""
    out = []
    for f in files:
        a = analyze_signal(formats.read_wav(f), cfg)
        try:
            dsp.log_f0_stats(a.prosody)
        except DegenerateError as exc:
            log.warning("skipping %s: %s", f, exc)
            continue
        out.append((extract_ppg(extractor, a.mfcc), a.prosody, a.features))
    return out


def corpus_log_f0_stats(tracks: Sequence[ProsodyTrack]):
    merged = ProsodyTrack(
        np.concatenate([t.log_f0 for t in tracks]),
        np.concatenate([t.voicing for t in tracks]),
        np.concatenate([t.pitch_corr for t in tracks]),
    )
    return dsp.log_f0_stats(merged)


def cmd_train_synth(
    corpus_dir,
    profile_out,
    ppg_model,
    config=None,
    init_from=None,
    speaker_id: Optional[str] = None,
    epochs: Optional[int] = None,
) -> SpeakerProfile:
    cfg = _load_config(config)
    extractor = formats.load_ppg_extractor(ppg_model)
    corpus = build_corpus(_wav_files(corpus_dir), extractor, cfg)
    if not corpus:
        raise DegenerateError("no usable utterances in the corpus (all lacked voiced frames)")
    stats = corpus_log_f0_stats([p for _, p, _ in corpus])
    dataset = [(ppg, dsp.normalize_log_f0(pros, stats), feat) for ppg, pros, feat in corpus]

    if init_from is not None:
        start = formats.load_synthesizer(init_from)
        if start.config.ppg_classes != extractor.n_classes:
            raise InputError(
                f"checkpoint expects {start.config.ppg_classes} PPG classes, extractor gives "
                f"{extractor.n_classes}"
            )
    else:
        start = synth.build_synthesizer(cfg.synth_config(extractor.n_classes))
        synth.fit_output_scaling(start, dataset)
    n_epochs = cfg.synth_epochs if epochs is None else epochs
    trained = synth.train_synthesizer(
        start, dataset, n_epochs, batch_size=cfg.batch_size, lr=cfg.synth_lr, seed=cfg.seed,
    )
    profile_out = Path(profile_out)
    ckpt = profile_out.with_suffix(".fvcm")
    formats.save_synthesizer(trained, ckpt)
    prof = SpeakerProfile(
        speaker_id or profile_out.stem, stats[0], stats[1], ckpt, Path(ppg_model), len(dataset), cfg.seed
    )
    prof.save(profile_out)
    return prof


def convert_features(
    signal: AudioSignal,
    profile: SpeakerProfile,
    rate: float = 1.0,
    config=None,
    synthesizer=None,
    extractor=None,
) -> LpcnetFeatureSequence:
    """Source audio to target-speaker LPCNet features (no vocoding)."""
    cfg = _load_config(config)
    params = synthesizer if synthesizer is not None else formats.load_synthesizer(profile.checkpoint)
    ext = extractor if extractor is not None else formats.load_ppg_extractor(profile.extractor)
    a = analyze_signal(signal, cfg)
    ppg = extract_ppg(ext, a.mfcc)
    # source contour z-scored by its own statistics; the synthesizer was
    # trained on target z-scores, so this transfers shape, not register
    prosody = dsp.normalize_log_f0(a.prosody)
    if rate != 1.0:
        ppg, prosody = synth.resample_for_rate(ppg, prosody, rate)
    return synth.synth_forward(params, ppg, prosody)


def cmd_convert(source_wav, profile, wav_out, rate: float = 1.0, config=None, seed: int = 0) -> AudioSignal:
    prof = profile if isinstance(profile, SpeakerProfile) else SpeakerProfile.load(profile)
    feats = convert_features(formats.read_wav(source_wav), prof, rate, config)
    out, _ = lpc_synthesize(feats, seed=seed)
    formats.write_wav(out, wav_out)
    return out


def cmd_vocode(feat_in, wav_out, seed: int = 0) -> AudioSignal:
    m, grid = formats.load_features(feat_in, dsp.N_FEATURES)
    out, _ = lpc_synthesize(LpcnetFeatureSequence(m, grid), seed=seed)
    formats.write_wav(out, wav_out)
    return out


BENCH_COLUMNS = ("mode", "T", "median_ms", "p90_ms", "speedup")


def cmd_bench(profile=None, T_list: Sequence[int] = (64,), repeats: int = 5, csv_out=None, params=None) -> str:
    """Time parallel generation against prefix-by-prefix emulation; returns CSV text."""
    if params is None:
        if profile is None:
            raise InputError("bench needs a profile or synthesizer parameters")
        prof = profile if isinstance(profile, SpeakerProfile) else SpeakerProfile.load(profile)
        params = formats.load_synthesizer(prof.checkpoint)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BENCH_COLUMNS)
    for T in T_list:
        par = synth.benchmark_inference(params, int(T), "parallel", repeats)
        ar = synth.benchmark_inference(params, int(T), "ar_emulation", repeats)
        ratio = synth.speedup(ar, par)
        for r in (par, ar):
            w.writerow([r.mode, r.T, f"{r.median_ms:.4f}", f"{r.p90_ms:.4f}", f"{ratio:.3f}"])
    text = buf.getvalue()
    if csv_out is not None:
        Path(csv_out).write_text(text, encoding="utf-8")
    return text


def fresh_profile(directory, extractor: Optional[PpgExtractorParams] = None, config=None,
                  speaker_id: str = "untrained") -> SpeakerProfile:
    """Write an untrained synthesizer + extractor and a profile pointing at them."""
    cfg = _load_config(config)
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    ext = extractor if extractor is not None else init_ppg_extractor(cfg.ppg_classes, cfg.ppg_hidden, cfg.seed)
    ext_path = d / f"{speaker_id}.extractor.fvcm"
    formats.save_ppg_extractor(ext, ext_path)
    params = synth.build_synthesizer(cfg.synth_config(ext.n_classes))
    ckpt = d / f"{speaker_id}.fvcm"
    formats.save_synthesizer(params, ckpt)
    prof = SpeakerProfile(speaker_id, float(np.log(150.0)), 0.2, ckpt, ext_path, 0, cfg.seed)
    prof.save(d / f"{speaker_id}.profile")
    return prof
