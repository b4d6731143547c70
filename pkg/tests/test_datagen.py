import numpy as np
import pytest

from planb import datagen
from planb.datagen import GrammarError, GrammarSpec


def chain_grammar():
    """prep -> stir -> end, fully deterministic."""
    return GrammarSpec(
        actions=["prep", "stir"],
        start_dist=[1.0, 0.0],
        transitions=[[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        duration_range=[(4, 6), (4, 6)],
        max_video_len=40,
    ).validate()


def fork_grammar(p=0.5):
    """base, then left/right with probability p / 1-p, then end."""
    return GrammarSpec(
        actions=["base", "left", "right"],
        start_dist=[1.0, 0.0, 0.0],
        transitions=[
            [0.0, p, 1.0 - p, 0.0],
            [0.0, 0.0, 0.0, 1.0],
            [0.0, 0.0, 0.0, 1.0],
        ],
        duration_range=[(8, 12), (8, 12), (8, 12)],
        max_video_len=60,
    ).validate()


def test_grammar_validation_errors():
    with pytest.raises(GrammarError):
        GrammarSpec(["a"], [0.5], [[1.0, 0.0]], [(1, 2)], 10).validate()  # bad start
    with pytest.raises(GrammarError):
        GrammarSpec(["a"], [1.0], [[0.7, 0.1]], [(1, 2)], 10).validate()  # bad row sum
    with pytest.raises(GrammarError):
        GrammarSpec(["a"], [1.0], [[0.5, 0.5]], [(0, 2)], 10).validate()  # min < 1
    with pytest.raises(GrammarError):
        datagen.GrammarSpec.from_json("{not json")


def test_grammar_json_round_trip():
    g = fork_grammar(0.7)
    g2 = GrammarSpec.from_json(g.to_json())
    assert g2.actions == g.actions
    assert g2.transitions == g.transitions
    assert g2.duration_range == g.duration_range
    assert g2.max_video_len == g.max_video_len


def test_sample_deterministic_grammar_label_pattern():
    video = datagen.sample_video(chain_grammar(), rng_seed=0)
    acts = [a for a, _, _ in video.segments]
    assert acts == [0, 1]
    for action, _, length in video.segments:
        lo, hi = chain_grammar().duration_range[action]
        assert lo <= length <= hi


def test_sample_same_seed_identical():
    a = datagen.sample_video(fork_grammar(), rng_seed=42)
    b = datagen.sample_video(fork_grammar(), rng_seed=42)
    assert np.array_equal(a.frame_labels, b.frame_labels)
    assert np.array_equal(a.features, b.features)
    c = datagen.sample_video(fork_grammar(), rng_seed=43)
    assert not np.array_equal(a.frame_labels, c.frame_labels) or \
        not np.array_equal(a.features, c.features)


def test_sample_video_invariants():
    for seed in range(10):
        v = datagen.sample_video(fork_grammar(), rng_seed=seed, feature_dim=5)
        assert v.features.shape == (len(v.frame_labels), 5)
        total = sum(length for _, _, length in v.segments)
        assert total == len(v.frame_labels)
        for (a1, _, _), (a2, _, _) in zip(v.segments, v.segments[1:]):
            assert a1 != a2
        assert len(v.frame_labels) <= fork_grammar().max_video_len


def test_branch_frequencies_monte_carlo():
    hits = 0
    n = 10_000
    for seed in range(n):
        v = datagen.sample_video(fork_grammar(0.5), rng_seed=seed, feature_dim=2)
        hits += v.segments[1][0] == 1
    assert abs(hits / n - 0.5) < 0.02


def test_enumerate_deterministic_grammar_single_path():
    g = chain_grammar()
    observed = [(0, 0, 3)]  # inside "prep", elapsed 3 of expected 5
    dist = datagen.enumerate_futures(g, observed, horizon_frames=6)
    assert len(dist.entries) == 1
    entry = dist.entries[0]
    assert entry.probability == pytest.approx(1.0)
    assert entry.actions == (0, 1)
    assert entry.durations == (2.0, 4.0)  # remainder of prep, then stir up to horizon
    assert dist.truncation_mass == 0.0


def test_enumerate_even_fork_two_entries():
    g = fork_grammar(0.5)
    dist = datagen.enumerate_futures(g, [(0, 0, 6)], horizon_frames=10)
    assert len(dist.entries) == 2
    assert {e.actions for e in dist.entries} == {(0, 1), (0, 2)}
    for e in dist.entries:
        assert e.probability == pytest.approx(0.5)


def test_enumerate_uneven_fork_orders_by_probability():
    dist = datagen.enumerate_futures(fork_grammar(0.7), [(0, 0, 6)], horizon_frames=10)
    top = datagen.oracle_top_k(dist, 2)
    assert top[0].actions == (0, 1) and top[0].probability == pytest.approx(0.7)
    assert top[1].actions == (0, 2) and top[1].probability == pytest.approx(0.3)
    assert datagen.oracle_top_k(dist, 1) == [top[0]]
    with pytest.warns(UserWarning):
        assert len(datagen.oracle_top_k(dist, 5)) == 2


def test_enumerate_mass_conservation_random_grammars():
    rng = np.random.default_rng(0)
    for trial in range(20):
        c = int(rng.integers(2, 5))
        transitions = rng.dirichlet(np.ones(c + 1), size=c).tolist()
        g = GrammarSpec(
            actions=[f"a{i}" for i in range(c)],
            start_dist=rng.dirichlet(np.ones(c)).tolist(),
            transitions=transitions,
            duration_range=[(2, 4)] * c,
            max_video_len=50,
        ).validate()
        dist = datagen.enumerate_futures(g, [(0, 0, 1)], horizon_frames=12, max_depth=6)
        total = sum(e.probability for e in dist.entries) + dist.truncation_mass
        assert total == pytest.approx(1.0, abs=1e-9)
        probs = [e.probability for e in dist.entries]
        assert probs == sorted(probs, reverse=True)


def test_enumeration_matches_monte_carlo():
    g = fork_grammar(0.7)
    observed = [(0, 0, 4)]
    dist = datagen.enumerate_futures(g, observed, horizon_frames=14, max_depth=8)
    freqs, truncated = datagen.rollout_futures(g, observed, 14, 8, n_rollouts=100_000,
                                               rng_seed=5)
    for e in dist.entries:
        assert abs(freqs.get((e.actions, e.ended), 0.0) - e.probability) <= 0.02
    assert abs(truncated - dist.truncation_mass) <= 0.02


def test_enumeration_matches_monte_carlo_with_termination_paths():
    # chain that can end early: base -> (left | end)
    g = GrammarSpec(
        actions=["base", "left"],
        start_dist=[1.0, 0.0],
        transitions=[[0.0, 0.6, 0.4], [0.3, 0.0, 0.7]],
        duration_range=[(3, 5), (3, 5)],
        max_video_len=60,
    ).validate()
    observed = [(0, 0, 2)]
    dist = datagen.enumerate_futures(g, observed, horizon_frames=10, max_depth=10)
    freqs, truncated = datagen.rollout_futures(g, observed, 10, 10, 100_000, rng_seed=6)
    for e in dist.entries:
        assert abs(freqs.get((e.actions, e.ended), 0.0) - e.probability) <= 0.02
    assert sum(e.probability for e in dist.entries) + dist.truncation_mass == \
        pytest.approx(1.0, abs=1e-9)


def test_enumerate_rejects_bad_inputs():
    with pytest.raises(GrammarError):
        datagen.enumerate_futures(chain_grammar(), [(0, 0, 2)], horizon_frames=0)
    with pytest.raises(GrammarError):
        datagen.enumerate_futures(chain_grammar(), [], horizon_frames=5)


def test_distribution_json_round_trip():
    g = fork_grammar(0.6)
    dist = datagen.enumerate_futures(g, [(0, 0, 5)], horizon_frames=12)
    text = datagen.distribution_to_json(dist, g.actions, alpha=0.3, beta=0.5)
    back = datagen.distribution_from_json(text, g.actions)
    assert back.horizon_frames == dist.horizon_frames
    assert back.truncation_mass == dist.truncation_mass
    assert [(e.actions, e.probability, e.ended) for e in back.entries] == \
        [(e.actions, e.probability, e.ended) for e in dist.entries]
