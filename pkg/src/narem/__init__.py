"""Toy laboratory for EM-trained non-autoregressive sequence generation.

Synthetic parallel corpora, from-scratch AR/NAR transformers on a small
reverse-mode autodiff core, constrained (no-adjacent-repeat) CRF decoding,
and the joint EM training loop with quality bounds.
"""

from narem.corpus import ParallelCorpus, Vocabulary, gen_exp1, gen_exp2
from narem.model import ModelConfig, TransformerModel
from narem.translators import ArTranslator, NarTranslator

__all__ = [
    "ParallelCorpus",
    "Vocabulary",
    "gen_exp1",
    "gen_exp2",
    "ModelConfig",
    "TransformerModel",
    "ArTranslator",
    "NarTranslator",
]

__version__ = "0.1.0"
