"""Sequential conditional VAE for diverse caption generation, in numpy."""
__version__ = "0.1.0"

from .corpus import Dataset, SceneGrammar, VocabIndex, build_vocab, default_grammar, generate_synthetic, load_jsonl, split
from .estimator import SeqCVAE
from .model import ModelConfig, SeqCVAEModel, Variant
from .trainer import TrainConfig, pretrain_backward_lm, train

__all__ = [
    "__version__",
    "SeqCVAE",
    "SeqCVAEModel",
    "ModelConfig",
    "Variant",
    "TrainConfig",
    "train",
    "pretrain_backward_lm",
    "Dataset",
    "SceneGrammar",
    "VocabIndex",
    "build_vocab",
    "default_grammar",
    "generate_synthetic",
    "load_jsonl",
    "split",
]
