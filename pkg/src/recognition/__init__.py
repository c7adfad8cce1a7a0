from .registry import ModelRegistry, build_extractor, register_aligner_hook, toy_registry_doc
from .surrogates import (
    ExternalAligner,
    FeatureCache,
    FeatureExtractor,
    IdentityAligner,
    SurrogateEnsemble,
    ToyLinearEmbedder,
    adversarial_loss,
    cosine_distance,
    cosine_similarity,
    obfuscation_loss,
    obfuscation_terms,
)

__all__ = [
    "ExternalAligner",
    "FeatureCache",
    "FeatureExtractor",
    "IdentityAligner",
    "ModelRegistry",
    "SurrogateEnsemble",
    "ToyLinearEmbedder",
    "adversarial_loss",
    "build_extractor",
    "cosine_distance",
    "cosine_similarity",
    "obfuscation_loss",
    "obfuscation_terms",
    "register_aligner_hook",
    "toy_registry_doc",
]
