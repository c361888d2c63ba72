"""Streaming speech-token synthesis: byte-level text conditioning, a small
autoregressive decoder, and a multi-queue chunked playback engine."""

from llmvox.codec import AudioBuffer, Codec, CodecConfig
from llmvox.estimator import SpeechSynthesizer
from llmvox.model import ModelConfig, SpeechDecoder, generate
from llmvox.sources import Query, SourceTiming
from llmvox.streaming import StreamConfig, StreamingEngine, chunk_schedule, run_pipeline

__all__ = [
    "AudioBuffer",
    "Codec",
    "CodecConfig",
    "ModelConfig",
    "Query",
    "SourceTiming",
    "SpeechDecoder",
    "SpeechSynthesizer",
    "StreamConfig",
    "StreamingEngine",
    "chunk_schedule",
    "generate",
    "run_pipeline",
]

__version__ = "0.1.0"
