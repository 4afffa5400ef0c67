"""Desk-scale attentional encoder-decoder translation toolkit.

Subpackages: tape (dense-tensor graphs with reverse-mode differentiation),
model (the conditional-GRU architecture), training (objectives, optimizers,
loop), metrics (smoothed sentence BLEU and interpolation), decoding (beam
search, ensembles, scoring), data (vocabularies, corpora, archives) and
cli (command-line surface and visualization emitters).
"""

from .model import ModelConfig, init_params
from .training import TrainingConfig

__all__ = ["ModelConfig", "TrainingConfig", "init_params"]
__version__ = "0.1.0"
