"""Acoustic word embeddings for zero-resource languages.

Trains contrastive recurrent encoders on labelled word segments from one or
more training languages, applies them unchanged to unseen languages, and
evaluates with speaker-invariant same-different average precision and
query-by-example search. Includes an MFCC front end, binary archive/
checkpoint/index formats, and a synthetic language-family corpus generator
for desk-scale cross-lingual transfer experiments.
"""

__version__ = "0.1.0"

from .corpus import PositivePair, WordSegment
from .encoder import EncoderConfig, EncoderParams, encode, encode_batch, init_params
from .evaluate import LabelledEmbedding, samediff_ap
from .features import FeatureSequence, MfccConfig, Waveform, compute_mfcc
from .loss import contrastive_loss, cosine_sim
from .qbe import QbeQuery, SegmentIndex, WindowConfig, build_index, run_qbe
from .synth import SyntheticFamilySpec, generate_synthetic_corpus
from .train import TrainConfig, train_model

__all__ = [
    "EncoderConfig", "EncoderParams", "FeatureSequence", "LabelledEmbedding",
    "MfccConfig", "PositivePair", "QbeQuery", "SegmentIndex",
    "SyntheticFamilySpec", "TrainConfig", "Waveform", "WindowConfig",
    "WordSegment", "build_index", "compute_mfcc", "contrastive_loss",
    "cosine_sim", "encode", "encode_batch", "generate_synthetic_corpus",
    "init_params", "run_qbe", "samediff_ap", "train_model",
]
