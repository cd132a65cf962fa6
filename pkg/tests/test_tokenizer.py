import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from models import AgentState, Trajectory
from tokenizer import (
    MotionSegment,
    TokenVocabulary,
    VocabularyError,
    avg_corner_distance,
    build_vocabulary,
    decode,
    encode,
    extract_segments,
    fit_vocabulary,
    segment_corners,
    tokenize_trajectory,
    vocabulary_digest,
)

from .conftest import DT, arc_segment, constant_motion

motions = st.builds(arc_segment, st.floats(min_value=0.0, max_value=12.0), st.floats(min_value=-0.5, max_value=0.5))


@given(motions, motions, motions)
def test_corner_distance_is_a_pseudometric(a, b, c):
    assert avg_corner_distance(a, a) == 0.0
    assert avg_corner_distance(a, b) == avg_corner_distance(b, a)
    assert avg_corner_distance(a, c) <= avg_corner_distance(a, b) + avg_corner_distance(b, c) + 1e-9


class TestVocabulary:
    def test_templates_are_separated_by_more_than_the_radius(self, vocab):
        assert len(vocab) > 10
        assert vocab.min_separation() > vocab.radius

    def test_covered_segments_quantize_within_radius(self, vocab, segments):
        for seg in segments:
            token = encode(seg, vocab)
            assert avg_corner_distance(seg, vocab.tokens[token].template) <= vocab.radius

    def test_size_cap_stops_construction(self, segments):
        assert len(build_vocabulary(segments, radius=0.01, max_size=5)) == 5

    def test_invalid_arguments(self, segments):
        with pytest.raises(VocabularyError):
            build_vocabulary([], radius=0.3, max_size=10)
        with pytest.raises(VocabularyError):
            build_vocabulary(segments, radius=0.0, max_size=10)

    def test_fit_vocabulary_respects_upper_bound(self, segments):
        logs = []
        fitted = fit_vocabulary(segments, target=30, tolerance=3, on_log=logs.append)
        assert len(fitted) <= 33
        assert abs(len(fitted) - 30) <= 3 or any(m.startswith("WARNING:") for m in logs)

    def test_save_load_keeps_digest(self, vocab, tmp_path):
        path = tmp_path / "vocab.json"
        vocab.save(path)
        assert vocabulary_digest(TokenVocabulary.load(path)) == vocabulary_digest(vocab)

    def test_load_errors(self, tmp_path):
        with pytest.raises(VocabularyError):
            TokenVocabulary.load(tmp_path / "missing.json")
        bad = tmp_path / "bad.json"
        bad.write_text("{not json", encoding="utf-8")
        with pytest.raises(VocabularyError):
            TokenVocabulary.load(bad)


def test_encode_matches_brute_force_argmin(vocab):
    rng = np.random.default_rng(11)
    speeds = rng.uniform(0.0, 14.0, 10_000)
    yaws = rng.uniform(-0.6, 0.6, 10_000)
    segs = [arc_segment(v, w) for v, w in zip(speeds, yaws)]
    corners = segment_corners(np.stack([s.array for s in segs]))
    bank = segment_corners(vocab.templates)
    expected = []
    for chunk in np.array_split(corners, 20):
        dist = np.mean(np.linalg.norm(chunk[:, None] - bank[None], axis=-1), axis=(2, 3))
        expected.extend(np.argmin(dist, axis=1).tolist())
    assert [encode(s, vocab) for s in segs] == expected


def test_encode_rejects_substep_mismatch(vocab):
    with pytest.raises(VocabularyError):
        encode(MotionSegment(((1.0, 0.0, 0.0),)), vocab)


def test_decode_speeds_are_chord_lengths(vocab):
    start = AgentState.make(3.0, -2.0, 0.7, 5.0, length=5.0, width=2.0)
    token = encode(arc_segment(8.0, 0.2), vocab)
    states = decode(token, start, vocab, DT)
    assert len(states) == vocab.substeps
    prev = start.pose
    for state in states:
        assert state.speed == pytest.approx(prev.distance_to(state.pose) / DT)
        assert (state.box.length, state.box.width) == (5.0, 2.0)
        prev = state.pose


def test_decode_rejects_unknown_token(vocab):
    with pytest.raises(VocabularyError):
        decode(len(vocab), AgentState.make(0.0, 0.0, 0.0, 0.0), vocab, DT)


def test_extract_segments_of_straight_motion():
    segs = extract_segments(constant_motion(5.0, 1.0, math.pi / 3, 10.0, 11))
    assert len(segs) == 2
    for seg in segs:
        assert seg.array[:, 0] == pytest.approx([1.0, 2.0, 3.0, 4.0, 5.0])
        assert seg.array[:, 1] == pytest.approx([0.0] * 5, abs=1e-9)


def test_closed_loop_tokenization_recovers_decoded_tokens(vocab):
    rng = np.random.default_rng(5)
    ids = [int(t) for t in rng.integers(0, len(vocab), 6)]
    states = [AgentState.make(0.0, 0.0, 0.4, 6.0)]
    for token in ids:
        states.extend(decode(token, states[-1], vocab, DT))
    assert tokenize_trajectory(Trajectory(tuple(states), DT), vocab) == ids
