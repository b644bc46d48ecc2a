from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from glancevmr.data import Example, SynthConfig, generate_synthetic, reannotate, tokenize_and_embed


def make_examples(
    n: int = 12, seed: int = 0, d_feat: int = 10, d_word: int = 8, **synth_kw
) -> tuple[list[Example], SynthConfig]:
    """Small in-memory glance dataset for unit tests."""
    config = SynthConfig(
        n_videos=n,
        d_feat=d_feat,
        d_word=d_word,
        frames_min=synth_kw.pop("frames_min", 12),
        frames_max=synth_kw.pop("frames_max", 20),
        vocab_size=synth_kw.pop("vocab_size", 20),
        **synth_kw,
    )
    videos, anns, table = generate_synthetic(config, seed)
    glances = reannotate(anns, np.random.default_rng(seed + 1))
    examples = [
        Example(g, v, tokenize_and_embed(g.query, table))
        for g, v in zip(glances, videos)
    ]
    return examples, config


@pytest.fixture
def tiny_examples() -> list[Example]:
    examples, _ = make_examples()
    return examples
