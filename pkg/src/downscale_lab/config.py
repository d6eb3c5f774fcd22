"""Model hyperparameter configuration shared across modules."""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict, field


@dataclass(frozen=True)
class ModelConfig:
    """Encoder hyperparameters.

    ``key_size`` is derived (``hidden_size // num_heads``); the position
    table always holds ``num_positions`` slots regardless of the runtime
    sequence length ``max_seq_len``.
    """

    embedding_size: int
    hidden_size: int
    intermediate_size: int
    num_layers: int
    num_heads: int
    vocab_size: int = 19000
    max_seq_len: int = 128
    num_positions: int = 512
    dropout: float = 0.10

    def __post_init__(self):
        if self.hidden_size % self.num_heads != 0:
            raise ValueError(
                f"hidden_size {self.hidden_size} not divisible by "
                f"num_heads {self.num_heads}"
            )
        for name in ("embedding_size", "hidden_size", "intermediate_size",
                     "num_layers", "num_heads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.max_seq_len < 1 or self.num_positions < self.max_seq_len:
            raise ValueError("invalid sequence length settings")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def key_size(self) -> int:
        return self.hidden_size // self.num_heads

    @property
    def shape(self) -> tuple[int, int, int, int, int]:
        """(E, H, I, L, A) tuple, the conventional short form."""
        return (self.embedding_size, self.hidden_size, self.intermediate_size,
                self.num_layers, self.num_heads)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})

    @classmethod
    def from_shape(cls, shape, **kwargs) -> "ModelConfig":
        e, h, i, l, a = shape
        return cls(embedding_size=e, hidden_size=h, intermediate_size=i,
                   num_layers=l, num_heads=a, **kwargs)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json_file(cls, path) -> "ModelConfig":
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))
