"""Hyperparameter grid generation around an anchor configuration."""

from __future__ import annotations

import itertools
import random
from dataclasses import dataclass, field

from .config import ModelConfig

AXES = ("embedding_size", "hidden_size", "intermediate_size",
        "num_layers", "num_heads")

DEFAULT_AXES = {
    "embedding_size": [32, 64, 128],
    "hidden_size": [32, 64, 128],
    "intermediate_size": [128, 256, 512],
    "num_layers": [1, 2, 4],
    "num_heads": [1, 2, 4],
}

# power-of-two lattice bounded by 256/256/1024/8/8
LATTICE = {
    "embedding_size": [8, 16, 32, 64, 128, 256],
    "hidden_size": [8, 16, 32, 64, 128, 256],
    "intermediate_size": [8, 16, 32, 64, 128, 256, 512, 1024],
    "num_layers": [1, 2, 4, 8],
    "num_heads": [1, 2, 4, 8],
}


@dataclass(frozen=True)
class GridSpec:
    anchor: ModelConfig
    axes: dict[str, list[int]] = field(default_factory=lambda: dict(DEFAULT_AXES))
    mode: str = "unidirectional"     # or "random_sample"
    sample_count: int = 16
    seed: int = 0
    exclude: tuple[tuple[int, ...], ...] = ()

    def __post_init__(self):
        if self.mode not in ("unidirectional", "random_sample"):
            raise ValueError(f"unknown grid mode {self.mode!r}")
        for axis in self.axes:
            if axis not in AXES:
                raise ValueError(f"unknown axis {axis!r}")


def _variant(anchor: ModelConfig, axis: str, value: int) -> ModelConfig | None:
    d = anchor.to_dict()
    d[axis] = value
    if d["hidden_size"] % d["num_heads"] != 0:
        return None
    return ModelConfig.from_dict(d)


def generate_grid(spec: GridSpec) -> list[ModelConfig]:
    """Generate unique model configurations.

    Unidirectional mode varies one axis at a time away from the anchor
    (anchor included first). Random-sample mode draws seeded samples
    without replacement from the power-of-two lattice, excluding the
    anchor, any ``exclude`` shapes, and head counts that do not divide
    the hidden size.
    """
    if spec.mode == "unidirectional":
        out = [spec.anchor]
        seen = {spec.anchor.shape}
        for axis in AXES:
            for value in spec.axes.get(axis, []):
                cfg = _variant(spec.anchor, axis, value)
                if cfg is not None and cfg.shape not in seen:
                    seen.add(cfg.shape)
                    out.append(cfg)
        return out

    excluded = set(spec.exclude) | {spec.anchor.shape}
    base = spec.anchor.to_dict()
    lattice = []
    for combo in itertools.product(*(LATTICE[a] for a in AXES)):
        if combo in excluded:
            continue
        d = dict(base)
        d.update(zip(AXES, combo))
        if d["hidden_size"] % d["num_heads"] != 0:
            continue
        lattice.append(combo)
    if spec.sample_count > len(lattice):
        raise ValueError(f"sample_count {spec.sample_count} exceeds lattice "
                         f"size {len(lattice)}")
    chosen = random.Random(spec.seed).sample(lattice, spec.sample_count)
    out = []
    for combo in chosen:
        d = dict(base)
        d.update(zip(AXES, combo))
        out.append(ModelConfig.from_dict(d))
    return out
