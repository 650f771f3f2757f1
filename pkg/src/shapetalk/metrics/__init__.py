from .text import CorpusStats, bleu, cider, tuple_f1
from .image import frechet_distance, inception_score
from .encoders import (
    AttrClassifier,
    AugContrastiveEncoder,
    DualEncoder,
    EncoderTrainingError,
    SimilarityBackends,
    image_similarity,
    text_similarity,
    train_similarity_encoders,
)

__all__ = [
    "CorpusStats", "bleu", "cider", "tuple_f1",
    "frechet_distance", "inception_score",
    "DualEncoder", "AugContrastiveEncoder", "AttrClassifier",
    "SimilarityBackends", "EncoderTrainingError",
    "train_similarity_encoders", "image_similarity", "text_similarity",
]
