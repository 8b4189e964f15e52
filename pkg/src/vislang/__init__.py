"""Desk-scale vision-to-language tokenization stack.

Images are quantized against frozen language-token codebooks into global
and local token ids, which drive a pluggable completion backend through
deterministic prompt protocols for classification, captioning, question
answering, and token-map denoising.
"""

from .autodiff import Tensor, backward, forward_op
from .codebooks import (EmbeddingTable, ExpandedVocabulary, Vocabulary,
                        expand_vocabulary, filter_expanded, load_embeddings, save_embeddings)
from .model import ModelConfig, TokenMap, TokenizerModel, load_token_map, save_token_map
from .optim import Adam
from .quantize import Projector, project, quantize_global, quantize_local
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Tensor", "backward", "forward_op", "Adam",
    "Vocabulary", "ExpandedVocabulary", "EmbeddingTable",
    "expand_vocabulary", "filter_expanded", "load_embeddings", "save_embeddings",
    "Projector", "project", "quantize_local", "quantize_global",
    "ModelConfig", "TokenMap", "TokenizerModel", "load_token_map", "save_token_map",
    "TrainConfig", "train",
]
