"""Self-structuring autoencoder: greedy tree induction with channel-factored embeddings."""
from .model import (
    ModelConfig,
    ModelParams,
    Objective,
    compose,
    decompose,
    dembed,
    embed_leaf,
    new_model,
    non_embedding_param_count,
)

__all__ = [
    "ModelConfig",
    "ModelParams",
    "Objective",
    "compose",
    "decompose",
    "dembed",
    "embed_leaf",
    "new_model",
    "non_embedding_param_count",
]

__version__ = "0.1.0"
