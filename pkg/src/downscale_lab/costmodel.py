"""Analytic parameter counting and per-sequence FLOPs accounting.

All functions are pure. FLOPs follow the multiply-accumulate = 2 FLOPs
convention; the backward pass is costed at twice the forward pass. The
feed-forward term is available in two modes: ``verbatim`` (no
sequence-length factor) and ``s_corrected`` (scaled by S, the default,
which reconciles with end-to-end training budgets).
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

from .config import ModelConfig

FFN_MODES = ("verbatim", "s_corrected")


def count_params(config: ModelConfig) -> int:
    """Total trainable parameters, embedding tables included.

    Decomposition: token and position embeddings with a layer norm, an
    embedding->hidden projection with a layer norm, per layer four
    attention projections plus the two FFN matrices and two layer norms,
    and an MLM head (hidden transform + layer norm + untied decoder).
    """
    e, h, i = config.embedding_size, config.hidden_size, config.intermediate_size
    v, p = config.vocab_size, config.num_positions
    n = v * e                       # token embeddings
    n += p * e                      # position embeddings
    n += 2 * e                      # embedding layer norm
    n += e * h + h + 2 * h          # projection + layer norm
    per_layer = 4 * (h * h + h)     # Q, K, V, O
    per_layer += h * i + i + i * h + h  # FFN in/out
    per_layer += 4 * h              # two layer norms
    n += config.num_layers * per_layer
    n += h * h + h + 2 * h          # MLM head transform + layer norm
    n += h * v + v                  # untied decoder
    return n


@dataclass(frozen=True)
class CostBreakdown:
    """Per-sequence FLOPs decomposition."""

    c_emb: float
    c_att: float      # one layer
    c_int: float      # one layer
    c_lmh: float
    c_forward: float
    c_backward: float
    c_seq: float
    mode: str

    def to_dict(self) -> dict:
        return asdict(self)


def flops_per_sequence(config: ModelConfig, mode: str = "s_corrected") -> CostBreakdown:
    """FLOPs for one training sequence of length ``config.max_seq_len``."""
    if mode not in FFN_MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {FFN_MODES}")
    s = config.max_seq_len
    v, e, h, i = (config.vocab_size, config.embedding_size,
                  config.hidden_size, config.intermediate_size)
    a, k = config.num_heads, config.key_size

    c_emb = 2 * s * (v * e + e * h)

    c_att = 2 * 3 * s * h * (k * a)   # key/query/value projections
    c_att += 2 * s * s * (k * a)      # query-key dot product
    c_att += 3 * s * s * a            # softmax
    c_att += 2 * s * s * (k * a)      # value reduction
    c_att += 2 * s * h * (k * a)      # output projection

    c_int = 2 * (h * i + i * h)
    if mode == "s_corrected":
        c_int *= s

    c_lmh = 2 * s * h * v

    c_forward = c_emb + c_lmh + config.num_layers * (c_att + c_int)
    c_backward = 2 * c_forward
    return CostBreakdown(
        c_emb=float(c_emb), c_att=float(c_att), c_int=float(c_int),
        c_lmh=float(c_lmh), c_forward=float(c_forward),
        c_backward=float(c_backward), c_seq=float(c_forward + c_backward),
        mode=mode,
    )


def total_flops(c_seq: float, updates: int, batch: int) -> float:
    """Total training cost: one sequence cost times sequences processed."""
    if updates < 0 or batch < 0:
        raise ValueError("updates and batch must be non-negative")
    return float(c_seq) * updates * batch
