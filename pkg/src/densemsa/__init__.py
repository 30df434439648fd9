"""Multi-scale attention encoder-decoder for rendered math expression recognition."""

from .data import Vocabulary, load_vocab
from .encoder import AnnotationGrid, EncoderConfig
from .decoder import DecoderConfig
from .model import Model, ModelConfig

__version__ = "0.1.0"

__all__ = ["AnnotationGrid", "DecoderConfig", "EncoderConfig", "Model", "ModelConfig",
           "Vocabulary", "load_vocab"]
