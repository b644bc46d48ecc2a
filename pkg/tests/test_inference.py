from __future__ import annotations

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from glancevmr.data import QueryTokens, VideoFeatures
from glancevmr.inference import (
    Proposal,
    ProposalConfig,
    generate_proposals,
    indices_to_seconds,
    retrieve,
    score_proposal,
    select_anchor,
)
from glancevmr.model import ModelConfig, init_params
from glancevmr.validation import ValidationError

# fractions 2/6 and 4/6 of a 6-frame video give window lengths 2 and 4;
# a tiny stride fraction forces stride 1
SIX_FRAME_CONFIG = dict(window_fractions=(2 / 6, 4 / 6), stride_fraction=0.01)


class TestSelectAnchor:
    def test_argmax(self):
        assert select_anchor(np.array([0.1, 0.5, 0.4])) == 2

    def test_tie_breaks_to_smallest(self):
        assert select_anchor(np.array([0.5, 0.5])) == 1

    def test_singleton(self):
        assert select_anchor(torch.tensor([1.0])) == 1


class TestGenerateProposals:
    def test_anchored_enumeration(self):
        config = ProposalConfig(mode="qagi", **SIX_FRAME_CONFIG)
        proposals = generate_proposals(6, anchor=3, config=config)
        assert {(p.start_idx, p.end_idx) for p in proposals} == {
            (2, 3),
            (3, 4),
            (1, 4),
            (2, 5),
            (3, 6),
        }

    def test_sliding_enumeration(self):
        config = ProposalConfig(mode="sliding", **SIX_FRAME_CONFIG)
        proposals = generate_proposals(6, anchor=None, config=config)
        assert len(proposals) == 8
        lengths = {p.end_idx - p.start_idx + 1 for p in proposals}
        assert lengths == {2, 4}

    def test_full_video_window(self):
        config = ProposalConfig(window_fractions=(1.0,), mode="qagi")
        proposals = generate_proposals(9, anchor=1, config=config)
        assert proposals == [Proposal(1, 9)]

    def test_fallback_when_pruned_empty(self):
        # a tiny window far from the anchor leaves nothing: full video returned
        config = ProposalConfig(window_fractions=(0.05,), stride_fraction=5.0, mode="qagi")
        proposals = generate_proposals(40, anchor=20, config=config)
        assert all(p.contains(20) for p in proposals)
        assert proposals  # never empty

    @given(
        n=st.integers(1, 50),
        anchor_frac=st.floats(0.0, 1.0),
    )
    @settings(max_examples=60)
    def test_anchored_set_is_filtered_sliding_set(self, n, anchor_frac):
        anchor = 1 + int(anchor_frac * (n - 1))
        qagi = ProposalConfig(mode="qagi")
        sliding = ProposalConfig(mode="sliding")
        kept = {
            (p.start_idx, p.end_idx)
            for p in generate_proposals(n, anchor=anchor, config=qagi)
        }
        all_windows = {
            (p.start_idx, p.end_idx)
            for p in generate_proposals(n, anchor=None, config=sliding)
        }
        filtered = {(s, e) for s, e in all_windows if s <= anchor <= e}
        if filtered:
            assert kept == filtered
        else:
            assert kept == {(1, n)}
        for s, e in kept:
            assert s <= anchor <= e or not filtered

    def test_mode_anchor_agreement(self):
        with pytest.raises(ValidationError):
            generate_proposals(5, anchor=None, config=ProposalConfig(mode="qagi"))
        with pytest.raises(ValidationError):
            generate_proposals(5, anchor=2, config=ProposalConfig(mode="sliding"))


class TestScoreProposal:
    def test_single_frame(self):
        feats = torch.tensor([[1.0, 2.0], [3.0, -1.0]])
        sentence = torch.tensor([2.0, 0.5])
        assert score_proposal(feats, Proposal(1, 1), sentence) == pytest.approx(3.0)

    def test_orthogonal_is_zero(self):
        feats = torch.tensor([[1.0, 0.0], [0.5, 0.0]])
        sentence = torch.tensor([0.0, 2.0])
        assert score_proposal(feats, Proposal(1, 2), sentence) == 0.0

    def test_widening_never_decreases_pooled_coordinates(self):
        rng = np.random.default_rng(0)
        feats = torch.tensor(rng.standard_normal((8, 4)))
        narrow = feats[2:4].max(dim=0).values
        wide = feats[1:6].max(dim=0).values
        assert torch.all(wide >= narrow)


class TestIndicesToSeconds:
    def test_full_video_maps_to_duration(self):
        start, end = indices_to_seconds(Proposal(1, 10), duration=25.0, n_frames=10)
        assert start == 0.0
        assert end == 25.0

    def test_monotone(self):
        starts = [
            indices_to_seconds(Proposal(i, i), 10.0, 5)[0] for i in range(1, 6)
        ]
        assert starts == sorted(starts)


class TestRetrieve:
    def setup_method(self):
        self.config = ModelConfig(
            d_feat=6, d_word=5, d_model=16, heads=4, layers=1, max_positions=64
        )
        self.model = init_params(self.config, seed=0)
        rng = np.random.default_rng(1)
        self.video = VideoFeatures(
            "v", rng.standard_normal((14, 6)).astype(np.float32), 28.0
        )
        self.tokens = QueryTokens(
            tokens=["a", "b"],
            embeddings=rng.standard_normal((2, 5)).astype(np.float32),
        )

    def test_result_contains_anchor(self):
        result = retrieve(self.video, self.tokens, self.model, ProposalConfig(mode="qagi"))
        assert result.proposal.contains(result.anchor_idx)
        assert 0 <= result.start <= result.end <= self.video.duration

    def test_sliding_scores_superset(self):
        qagi = retrieve(self.video, self.tokens, self.model, ProposalConfig(mode="qagi"))
        sliding = retrieve(self.video, self.tokens, self.model, ProposalConfig(mode="sliding"))
        assert sliding.score >= qagi.score - 1e-9

    def test_deterministic(self):
        a = retrieve(self.video, self.tokens, self.model, ProposalConfig())
        b = retrieve(self.video, self.tokens, self.model, ProposalConfig())
        assert (a.start, a.end, a.score, a.anchor_idx) == (
            b.start,
            b.end,
            b.score,
            b.anchor_idx,
        )
