import pytest

from downscale_lab import grid as gr
from downscale_lab.config import ModelConfig

ANCHOR = ModelConfig(embedding_size=256, hidden_size=256,
                     intermediate_size=1024, num_layers=8, num_heads=8)


def test_unidirectional_grid_is_anchor_plus_single_axis_variants():
    configs = gr.generate_grid(gr.GridSpec(anchor=ANCHOR))
    assert configs[0] == ANCHOR
    # 5 axes x 3 values, all distinct from the anchor -> 16 configs
    assert len(configs) == 16
    shapes = [c.shape for c in configs]
    assert len(set(shapes)) == 16
    for c in configs[1:]:
        diffs = sum(a != b for a, b in zip(c.shape, ANCHOR.shape))
        assert diffs == 1


def test_unidirectional_skips_invalid_head_counts():
    anchor = ModelConfig(embedding_size=32, hidden_size=32,
                         intermediate_size=128, num_layers=2, num_heads=2)
    spec = gr.GridSpec(anchor=anchor, axes={"num_heads": [3, 4]})
    configs = gr.generate_grid(spec)
    assert all(c.hidden_size % c.num_heads == 0 for c in configs)
    assert not any(c.num_heads == 3 for c in configs)


def test_random_sample_deterministic_and_within_lattice():
    spec = gr.GridSpec(anchor=ANCHOR, mode="random_sample",
                       sample_count=12, seed=4)
    c1 = gr.generate_grid(spec)
    c2 = gr.generate_grid(spec)
    assert [c.shape for c in c1] == [c.shape for c in c2]
    assert len({c.shape for c in c1}) == 12
    for c in c1:
        assert c.shape != ANCHOR.shape
        assert c.hidden_size % c.num_heads == 0
        for axis, vals in zip(gr.AXES, [gr.LATTICE[a] for a in gr.AXES]):
            assert getattr(c, axis) in vals


def test_random_sample_respects_exclude():
    spec = gr.GridSpec(anchor=ANCHOR, mode="random_sample", sample_count=200,
                       seed=0, exclude=((32, 32, 128, 2, 2),))
    configs = gr.generate_grid(spec)
    assert (32, 32, 128, 2, 2) not in {c.shape for c in configs}


def test_random_sample_zero_count():
    spec = gr.GridSpec(anchor=ANCHOR, mode="random_sample", sample_count=0)
    assert gr.generate_grid(spec) == []


def test_random_sample_exceeding_lattice_errors():
    spec = gr.GridSpec(anchor=ANCHOR, mode="random_sample",
                       sample_count=10 ** 6)
    with pytest.raises(ValueError):
        gr.generate_grid(spec)


def test_grid_spec_validation():
    with pytest.raises(ValueError):
        gr.GridSpec(anchor=ANCHOR, mode="exhaustive")
    with pytest.raises(ValueError):
        gr.GridSpec(anchor=ANCHOR, axes={"vocab_size": [1]})
