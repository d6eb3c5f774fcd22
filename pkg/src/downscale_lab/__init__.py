"""Desk-scale laboratory for reduced-vocabulary masked-language-model studies.

Subpackages cover the full pipeline: vocabulary-constrained corpus
filtering, byte-level BPE tokenizer training and selection, tiny
transformer encoders with analytic gradients, AdamW training loops,
exact FLOPs accounting, and compute-optimal scaling analysis.
"""

__version__ = "0.1.0"
