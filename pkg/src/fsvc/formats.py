"""On-disk formats: 16-bit PCM WAV, FVCF feature matrices, FVCM model files,
and flat ``key = value`` text documents (pipeline config, speaker profiles).

FVCF layout (little-endian)::

    b"FVCF" | u16 version | u32 rows | u32 cols | f64 window_ms | f64 hop_ms
    | f32 payload[rows * cols] (row-major) | u32 crc32(all preceding bytes)

FVCM layout::

    b"FVCM" | u16 version | u32 n_tensors
    | n_tensors * (u16 name_len | name | u32 rank | u32 dims[rank] | f32 payload)
    | u32 n_meta | n_meta * (u16 key_len | key | u32 value_len | value)
    | u32 crc32(all preceding bytes)
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass, fields
from typing import Dict, Optional, Tuple

import numpy as np

from .dsp import SAMPLE_RATE, AudioSignal, FrameGrid
from .errors import FormatError, InputError

FEATURE_MAGIC = b"FVCF"
MODEL_MAGIC = b"FVCM"
FORMAT_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sHIIdd")
_CRC = struct.Struct("<I")


# --- WAV ---------------------------------------------------------------------


def write_wav(signal: AudioSignal, path) -> None:
    x = np.asarray(signal.samples, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise InputError("cannot write non-finite samples")
    # same 1/32768 scale as the reader, so in-range samples round trip within half an LSB
    pcm = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
    data = pcm.tobytes()
    rate = int(signal.sample_rate_hz)
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(data), b"WAVE",
        b"fmt ", 16, 1, 1, rate, rate * 2, 2, 16,
        b"data", len(data),
    )
    with open(path, "wb") as f:
        f.write(header + data)


def _parse_wav(buf: bytes, name: str) -> AudioSignal:
    if len(buf) < 12:
        raise FormatError(f"{name}: file too short for a RIFF header ({len(buf)} bytes)")
    riff, riff_size, wave = struct.unpack_from("<4sI4s", buf, 0)
    if riff != b"RIFF" or wave != b"WAVE":
        raise FormatError(f"{name}: not a RIFF/WAVE file")
    if riff_size != len(buf) - 8:
        raise FormatError(f"{name}: RIFF size field {riff_size} != {len(buf) - 8} bytes present")
    fmt = None
    data = None
    pos = 12
    while pos < len(buf):
        if pos + 8 > len(buf):
            raise FormatError(f"{name}: truncated chunk header at byte {pos}")
        cid, csize = struct.unpack_from("<4sI", buf, pos)
        body = pos + 8
        if body + csize > len(buf):
            raise FormatError(
                f"{name}: chunk {cid!r} claims {csize} bytes, only {len(buf) - body} remain"
            )
        if cid == b"fmt ":
            if csize < 16:
                raise FormatError(f"{name}: fmt chunk is {csize} bytes, need 16")
            fmt = struct.unpack_from("<HHIIHH", buf, body)
        elif cid == b"data":
            data = buf[body : body + csize]
        pos = body + csize + (csize & 1)
    if fmt is None:
        raise FormatError(f"{name}: missing fmt chunk")
    if data is None:
        raise FormatError(f"{name}: missing data chunk")
    audio_format, channels, rate, byte_rate, block_align, bits = fmt
    if audio_format != 1:
        raise FormatError(f"{name}: audio_format={audio_format}, only PCM (1) is supported")
    if channels != 1:
        raise FormatError(f"{name}: channels={channels}, only mono is supported")
    if bits != 16:
        raise FormatError(f"{name}: bits_per_sample={bits}, only 16-bit is supported")
    if rate != SAMPLE_RATE:
        raise FormatError(f"{name}: sample_rate={rate} Hz, only {SAMPLE_RATE} Hz is supported")
    if block_align != 2 or byte_rate != rate * 2:
        raise FormatError(
            f"{name}: inconsistent block_align={block_align} / byte_rate={byte_rate}"
        )
    if len(data) == 0:
        raise FormatError(f"{name}: data chunk is empty")
    if len(data) % 2:
        raise FormatError(f"{name}: data chunk has odd length {len(data)}")
    pcm = np.frombuffer(data, dtype="<i2").astype(np.float64)
    return AudioSignal(pcm / 32768.0, rate)


def read_wav(path) -> AudioSignal:
    with open(path, "rb") as f:
        buf = f.read()
    return _parse_wav(buf, os.fspath(path))


# --- shared binary helpers ---------------------------------------------------


def _seal(body: bytes) -> bytes:
    return body + _CRC.pack(zlib.crc32(body) & 0xFFFFFFFF)


def _check_crc(buf: bytes, name: str) -> bytes:
    body, (stored,) = buf[:-4], _CRC.unpack_from(buf, len(buf) - 4)
    actual = zlib.crc32(body) & 0xFFFFFFFF
    if stored != actual:
        raise FormatError(f"{name}: checksum mismatch (stored {stored:08x}, computed {actual:08x})")
    return body


class _Reader:
    def __init__(self, buf: bytes, name: str):
        self.buf = buf
        self.pos = 0
        self.name = name

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(
                f"{self.name}: truncated {what}: expected {n} bytes at offset {self.pos}, "
                f"{len(self.buf) - self.pos} available"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        s = struct.Struct("<" + fmt)
        return s.unpack(self.take(s.size, what))


# --- FVCF feature files ------------------------------------------------------


def encode_features(matrix: np.ndarray, grid: Optional[FrameGrid] = None) -> bytes:
    m = np.asarray(matrix)
    if m.ndim != 2:
        raise InputError(f"feature matrix must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InputError("feature matrix contains non-finite values")
    grid = grid or FrameGrid()
    header = _FEATURE_HEADER.pack(
        FEATURE_MAGIC, FORMAT_VERSION, m.shape[0], m.shape[1], float(grid.window_ms), float(grid.hop_ms)
    )
    return _seal(header + np.ascontiguousarray(m, dtype="<f4").tobytes())


def decode_features(buf: bytes, name: str = "<bytes>") -> Tuple[np.ndarray, FrameGrid]:
    hsize = _FEATURE_HEADER.size
    if len(buf) < hsize + 4:
        raise FormatError(f"{name}: expected at least {hsize + 4} bytes, got {len(buf)}")
    magic, version, rows, cols, window_ms, hop_ms = _FEATURE_HEADER.unpack_from(buf, 0)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{name}: bad magic {magic!r}, expected {FEATURE_MAGIC!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{name}: unsupported version {version}")
    expected = hsize + 4 * rows * cols + 4
    if len(buf) != expected:
        raise FormatError(
            f"{name}: header says {rows} x {cols}, expected {expected} bytes, got {len(buf)}"
        )
    _check_crc(buf, name)
    if not (np.isfinite(window_ms) and np.isfinite(hop_ms) and window_ms >= hop_ms > 0):
        raise FormatError(f"{name}: invalid frame grid window_ms={window_ms} hop_ms={hop_ms}")
    m = np.frombuffer(buf, dtype="<f4", count=rows * cols, offset=hsize).reshape(rows, cols)
    if not np.all(np.isfinite(m)):
        raise FormatError(f"{name}: payload contains non-finite values")
    return m.astype(np.float64), FrameGrid(window_ms, hop_ms, rows)


def save_features(path, matrix: np.ndarray, grid: Optional[FrameGrid] = None) -> None:
    with open(path, "wb") as f:
        f.write(encode_features(matrix, grid))


def load_features(path, expected_cols: Optional[int] = None) -> Tuple[np.ndarray, FrameGrid]:
    with open(path, "rb") as f:
        buf = f.read()
    m, grid = decode_features(buf, os.fspath(path))
    if expected_cols is not None and m.shape[1] != expected_cols:
        raise FormatError(f"{os.fspath(path)}: has {m.shape[1]} columns, expected {expected_cols}")
    return m, grid


def save_ppg_file(ppg, path) -> None:
    save_features(path, ppg.log_post, ppg.grid)


def load_ppg_file(path, n_classes: Optional[int] = None):
    from .ppg import PpgSequence

    m, grid = load_features(path, n_classes)
    if np.any(m > 0.0):
        raise FormatError(f"{os.fspath(path)}: log-posteriors must be <= 0")
    return PpgSequence(m, grid)


# --- FVCM model files --------------------------------------------------------


def encode_model(tensors: Dict[str, np.ndarray], meta: Dict[str, str]) -> bytes:
    parts = [MODEL_MAGIC, struct.pack("<HI", FORMAT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        a = np.asarray(arr)
        if not np.all(np.isfinite(a)):
            raise InputError(f"tensor {name!r} contains non-finite values")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
        parts.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    parts.append(struct.pack("<I", len(meta)))
    for k, v in meta.items():
        kb, vb = str(k).encode("utf-8"), str(v).encode("utf-8")
        parts.append(struct.pack("<H", len(kb)) + kb + struct.pack("<I", len(vb)) + vb)
    return _seal(b"".join(parts))


def decode_model(buf: bytes, name: str = "<bytes>") -> Tuple[Dict[str, np.ndarray], Dict[str, str]]:
    if len(buf) < 14:
        raise FormatError(f"{name}: expected at least 14 bytes, got {len(buf)}")
    if buf[:4] != MODEL_MAGIC:
        raise FormatError(f"{name}: bad magic {buf[:4]!r}, expected {MODEL_MAGIC!r}")
    body = _check_crc(buf, name)
    r = _Reader(body, name)
    r.take(4, "magic")
    version, n_tensors = r.unpack("HI", "header")
    if version != FORMAT_VERSION:
        raise FormatError(f"{name}: unsupported version {version}")
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        (nlen,) = r.unpack("H", "tensor name length")
        tname = _utf8(r.take(nlen, "tensor name"), name)
        (rank,) = r.unpack("I", f"rank of {tname!r}")
        if rank > 8:
            raise FormatError(f"{name}: tensor {tname!r} has implausible rank {rank}")
        dims = r.unpack(f"{rank}I", f"dims of {tname!r}")
        count = int(np.prod(dims, dtype=np.int64))
        raw = r.take(4 * count, f"payload of {tname!r}")
        arr = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float64)
        if not np.all(np.isfinite(arr)):
            raise FormatError(f"{name}: tensor {tname!r} contains non-finite values")
        if tname in tensors:
            raise FormatError(f"{name}: duplicate tensor {tname!r}")
        tensors[tname] = arr
    (n_meta,) = r.unpack("I", "metadata count")
    meta: Dict[str, str] = {}
    for _ in range(n_meta):
        (klen,) = r.unpack("H", "metadata key length")
        key = _utf8(r.take(klen, "metadata key"), name)
        (vlen,) = r.unpack("I", f"length of metadata {key!r}")
        meta[key] = _utf8(r.take(vlen, f"metadata {key!r}"), name)
    if r.pos != len(body):
        raise FormatError(f"{name}: {len(body) - r.pos} unexpected trailing bytes")
    return tensors, meta


def _utf8(b: bytes, name: str) -> str:
    try:
        return b.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{name}: invalid UTF-8 string in model file") from exc


def save_model(path, tensors: Dict[str, np.ndarray], meta: Dict[str, str]) -> None:
    with open(path, "wb") as f:
        f.write(encode_model(tensors, meta))


def load_model(path) -> Tuple[Dict[str, np.ndarray], Dict[str, str]]:
    with open(path, "rb") as f:
        buf = f.read()
    return decode_model(buf, os.fspath(path))


def save_synthesizer(params, path) -> None:
    meta = {f"config.{f.name}": repr(getattr(params.config, f.name)) for f in fields(params.config)}
    meta.update(params.meta)
    meta["kind"] = "synthesizer"
    save_model(path, params.tensors, meta)


def load_synthesizer(path):
    import ast

    from .synth import SynthesizerConfig, SynthesizerParams, build_synthesizer

    tensors, meta = load_model(path)
    if meta.get("kind") != "synthesizer":
        raise FormatError(f"{os.fspath(path)}: not a synthesizer checkpoint (kind={meta.get('kind')!r})")
    kwargs = {}
    for f in fields(SynthesizerConfig):
        key = f"config.{f.name}"
        if key not in meta:
            raise FormatError(f"{os.fspath(path)}: missing metadata {key!r}")
        try:
            kwargs[f.name] = ast.literal_eval(meta[key])
        except (ValueError, SyntaxError) as exc:
            raise FormatError(f"{os.fspath(path)}: bad value for {key!r}") from exc
    try:
        config = SynthesizerConfig(**kwargs).validate()
    except InputError as exc:
        raise FormatError(f"{os.fspath(path)}: invalid config: {exc}") from exc
    template = build_synthesizer(config).tensors
    _match_layout(path, template, tensors)
    rest = {k: v for k, v in meta.items() if not k.startswith("config.") and k != "kind"}
    return SynthesizerParams(config, tensors, rest)


def save_ppg_extractor(params, path) -> None:
    meta = dict(params.meta)
    meta["kind"] = "ppg_extractor"
    meta["n_classes"] = str(params.n_classes)
    save_model(path, params.tensors, meta)


def load_ppg_extractor(path):
    from .ppg import PpgExtractorParams, init_ppg_extractor

    tensors, meta = load_model(path)
    if meta.get("kind") != "ppg_extractor":
        raise FormatError(f"{os.fspath(path)}: not a PPG extractor (kind={meta.get('kind')!r})")
    try:
        k = int(meta["n_classes"])
        hidden = tensors["l1.w"].shape[1]
    except (KeyError, ValueError, IndexError) as exc:
        raise FormatError(f"{os.fspath(path)}: incomplete extractor model") from exc
    _match_layout(path, init_ppg_extractor(k, hidden).tensors, tensors)
    rest = {a: b for a, b in meta.items() if a not in ("kind", "n_classes")}
    return PpgExtractorParams(tensors, k, rest)


def _match_layout(path, template, tensors):
    if set(template) != set(tensors):
        missing = sorted(set(template) - set(tensors))
        extra = sorted(set(tensors) - set(template))
        raise FormatError(f"{os.fspath(path)}: tensor set mismatch (missing {missing}, extra {extra})")
    for k, v in template.items():
        if tensors[k].shape != v.shape:
            raise FormatError(
                f"{os.fspath(path)}: tensor {k!r} has shape {tensors[k].shape}, expected {v.shape}"
            )


# --- key = value documents ---------------------------------------------------


def parse_kv(text: str, name: str = "<text>") -> Dict[str, str]:
    out: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{name}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise FormatError(f"{name}:{lineno}: empty key")
        if key in out:
            raise FormatError(f"{name}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def format_kv(items: Dict[str, object]) -> str:
    return "".join(f"{k} = {v}\n" for k, v in items.items())


@dataclass(frozen=True)
class PipelineConfig:
    window_ms: float = 25.0
    hop_ms: float = 10.0
    ppg_classes: int = 64
    ppg_hidden: int = 128
    ppg_epochs: int = 30
    ppg_batch: int = 256
    ppg_lr: float = 1e-3
    n_blocks: int = 2
    model_dim: int = 64
    n_heads: int = 2
    conv_kernel: int = 3
    synth_epochs: int = 200
    batch_size: int = 32
    synth_lr: float = 1e-3
    lpc_order: int = 16
    rate: float = 1.0
    seed: int = 0
    vocoder_seed: int = 0

    def validate(self) -> "PipelineConfig":
        from .synth import RATE_MAX, RATE_MIN

        if not (self.window_ms >= self.hop_ms > 0):
            raise InputError(f"need window_ms >= hop_ms > 0, got {self.window_ms}/{self.hop_ms}")
        for key in ("ppg_classes", "ppg_hidden", "ppg_batch", "n_blocks", "model_dim",
                    "n_heads", "conv_kernel", "batch_size"):
            if getattr(self, key) < 1:
                raise InputError(f"{key} must be positive, got {getattr(self, key)}")
        for key in ("ppg_epochs", "synth_epochs"):
            if getattr(self, key) < 0:
                raise InputError(f"{key} must be non-negative")
        for key in ("ppg_lr", "synth_lr"):
            if not getattr(self, key) > 0:
                raise InputError(f"{key} must be positive")
        if self.lpc_order != 16:
            raise InputError(f"lpc_order must be 16, got {self.lpc_order}")
        if not (RATE_MIN <= self.rate <= RATE_MAX):
            raise InputError(f"rate {self.rate} outside [{RATE_MIN}, {RATE_MAX}]")
        self.synth_config().validate()
        return self

    def synth_config(self, ppg_classes: Optional[int] = None):
        from .synth import SynthesizerConfig

        return SynthesizerConfig(
            n_blocks=self.n_blocks,
            model_dim=self.model_dim,
            n_heads=self.n_heads,
            conv_kernel=self.conv_kernel,
            ppg_classes=self.ppg_classes if ppg_classes is None else ppg_classes,
            seed=self.seed,
        )

    @classmethod
    def from_text(cls, text: str, name: str = "<config>") -> "PipelineConfig":
        raw = parse_kv(text, name)
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, value in raw.items():
            if key not in known:
                raise FormatError(f"{name}: unknown key {key!r}")
            typ = known[key].type
            try:
                kwargs[key] = int(value) if typ in (int, "int") else float(value)
            except ValueError as exc:
                raise FormatError(f"{name}: {key} = {value!r} is not a valid {typ}") from exc
        try:
            return cls(**kwargs).validate()
        except InputError as exc:
            raise FormatError(f"{name}: {exc}") from exc

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_text(f.read(), os.fspath(path))

    def to_text(self) -> str:
        return format_kv({f.name: getattr(self, f.name) for f in fields(self)})
