"""Privacy-preserving occupancy estimation from non-speech audio.

The pipeline: multichannel clips are beamformed to one stream, sliced into
one-second log-mel spectrograms, speech-gated, embedded, L1-clipped and fed
to a small attention regressor that predicts per-second head-count.  A
Laplace mechanism over the clipped embeddings provides differential-privacy
guarantees with exact budget accounting, and an envelope-encryption store
protects recorded artifacts at rest.
"""

__version__ = "0.1.0"

from . import dsp, embed, evaluate, gate, io, model, pipeline, privacy, store, synth
from .dsp import (
    MonoClip,
    MultichannelClip,
    Spectrogram,
    SpectrogramConfig,
    beamform,
    gcc_phat_tdoa,
    log_mel_spectrogram,
)
from .embed import (
    ClipBound,
    EmbeddingSequence,
    FrozenEncoder,
    TrainableEncoder,
    append_probability,
    clip_embedding,
)
from .evaluate import (
    MetricsReport,
    OccupancySeries,
    aggregate,
    baseline_mean,
    compute_metrics,
    cross_validate,
    occupancy_from_events,
)
from .gate import InputWindow, LabeledChunk, assemble_scheme1, assemble_scheme2, speech_probability
from .model import TransformerConfig, adam_step, backward, forward, mse_loss, train
from .pipeline import PipelineConfig, build_windows, dp_sweep, evaluate_model, train_pipeline
from .privacy import NoiseSource, PrivacyLedger, PrivacyParams, laplace_sample, privatize, sensitivity_audit
from .store import SealedRecord, seal, unseal
from .synth import EntryExitEvent, Scenario, ScenarioConfig, generate_events, generate_scenario, render_audio

__all__ = [
    "__version__",
    "MonoClip", "MultichannelClip", "Spectrogram", "SpectrogramConfig",
    "beamform", "gcc_phat_tdoa", "log_mel_spectrogram",
    "ClipBound", "EmbeddingSequence", "FrozenEncoder", "TrainableEncoder",
    "append_probability", "clip_embedding",
    "MetricsReport", "OccupancySeries", "aggregate", "baseline_mean",
    "compute_metrics", "cross_validate", "occupancy_from_events",
    "InputWindow", "LabeledChunk", "assemble_scheme1", "assemble_scheme2", "speech_probability",
    "TransformerConfig", "adam_step", "backward", "forward", "mse_loss", "train",
    "PipelineConfig", "build_windows", "dp_sweep", "evaluate_model", "train_pipeline",
    "NoiseSource", "PrivacyLedger", "PrivacyParams", "laplace_sample", "privatize", "sensitivity_audit",
    "SealedRecord", "seal", "unseal",
    "EntryExitEvent", "Scenario", "ScenarioConfig", "generate_events", "generate_scenario", "render_audio",
]
