"""Lightweight zero-shot TTS with two-stage self-distillation, at desk scale."""

__version__ = "0.1.0"

from .config import DistillConfig, LossWeights, ModelConfig, RunConfig, TrainConfig, load_config, preset
from .data import (
    AttributeAnnotations,
    Corpus,
    CorpusError,
    MelSpectrogram,
    PhonemeSequence,
    SyntheticVoices,
    Utterance,
    load_corpus,
    make_synthetic_corpus,
    write_corpus,
)
from .model import ZeroShotTTS, collate
from .checkpoint import Checkpoint, CheckpointError, count_params, load_checkpoint, save_checkpoint
from .distill import (
    PairManifest,
    ParallelPair,
    generate_parallel_pairs,
    load_pairs,
    mix_batch,
    synthesize,
    train_student,
    train_teacher,
)

__all__ = [
    "AttributeAnnotations",
    "Checkpoint",
    "CheckpointError",
    "Corpus",
    "CorpusError",
    "DistillConfig",
    "LossWeights",
    "MelSpectrogram",
    "ModelConfig",
    "PairManifest",
    "ParallelPair",
    "PhonemeSequence",
    "RunConfig",
    "SyntheticVoices",
    "TrainConfig",
    "Utterance",
    "ZeroShotTTS",
    "collate",
    "count_params",
    "generate_parallel_pairs",
    "load_checkpoint",
    "load_config",
    "load_corpus",
    "make_synthetic_corpus",
    "mix_batch",
    "preset",
    "save_checkpoint",
    "synthesize",
    "train_student",
    "train_teacher",
    "write_corpus",
]
