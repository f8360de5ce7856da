"""PPG-based voice conversion: non-autoregressive synthesizer + LPC vocoder."""

from .dsp import (
    AudioSignal,
    FrameGrid,
    LpcnetFeatureSequence,
    MfccSequence,
    ProsodyTrack,
    compute_bark_features,
    compute_mfcc,
    estimate_f0,
    frame_signal,
    normalize_log_f0,
)
from .errors import DegenerateError, FormatError, FsvcError, InputError, ShapeError
from .ppg import PpgExtractorParams, PpgSequence, extract_ppg, train_ppg_extractor
from .synth import (
    SynthesizerConfig,
    SynthesizerParams,
    benchmark_inference,
    build_synthesizer,
    resample_for_rate,
    synth_forward,
    train_synthesizer,
)
from .vocoder import cepstra_to_lpc, levinson_durbin, lpc_synthesize

__version__ = "0.1.0"
