"""Shared builders: tiny grammars and in-memory datasets for training tests."""

import numpy as np
import pytest

from planb import trainer
from planb.datagen import GrammarSpec, sample_video


def chain_grammar_3():
    """prep -> stir -> pour -> end, deterministic."""
    return GrammarSpec(
        actions=["prep", "stir", "pour"],
        start_dist=[1.0, 0.0, 0.0],
        transitions=[
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ],
        duration_range=[(5, 7), (5, 7), (5, 7)],
        max_video_len=60,
    ).validate()


def fork2_grammar(p_left=0.5):
    """base then an even fork to (left, go) or (right, stop); branches
    diverge at every position after the shared prefix."""
    return GrammarSpec(
        actions=["base", "left", "right", "go", "stop"],
        start_dist=[1.0, 0.0, 0.0, 0.0, 0.0],
        transitions=[
            [0.0, p_left, 1.0 - p_left, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 0.0, 0.0, 1.0],
            [0.0, 0.0, 0.0, 0.0, 0.0, 1.0],
        ],
        duration_range=[(8, 10), (6, 8), (6, 8), (6, 8), (6, 8)],
        max_video_len=80,
    ).validate()


def fork4_grammar(probs=(0.3, 0.3, 0.2, 0.2)):
    """base then a four-way fork, each branch a distinct two-action tail."""
    p1, p2, p3, p4 = probs
    c = 9  # base + 4 branch heads + 4 branch tails
    rows = [[0.0] * (c + 1) for _ in range(c)]
    rows[0][1], rows[0][2], rows[0][3], rows[0][4] = p1, p2, p3, p4
    for head, tail in ((1, 5), (2, 6), (3, 7), (4, 8)):
        rows[head][tail] = 1.0
        rows[tail][c] = 1.0  # terminate
    return GrammarSpec(
        actions=["base", "b1", "b2", "b3", "b4", "t1", "t2", "t3", "t4"],
        start_dist=[1.0] + [0.0] * 8,
        transitions=rows,
        duration_range=[(8, 10)] + [(6, 8)] * 8,
        max_video_len=100,
    ).validate()


def make_dataset(grammar, n_videos, seed, feature_dim=8, noise_std=0.1):
    children = np.random.SeedSequence(seed).spawn(n_videos)
    return {
        f"video_{i:04d}": sample_video(grammar, child, feature_dim=feature_dim,
                                       noise_std=noise_std)
        for i, child in enumerate(children)
    }


def small_config(**overrides):
    base = dict(k_threads=1, epochs=10, hidden_dim_lower=16, hidden_dim_upper=16,
                embed_dim=8, feature_dim=8, alpha=0.3, beta=0.5, seed=0,
                lambda_=0.0, phi=1.0, restarts=1)
    base.update(overrides)
    return trainer.TrainConfig(**base)


@pytest.fixture(scope="session")
def chain_instances():
    config = small_config()
    videos = make_dataset(chain_grammar_3(), 24, seed=11)
    return trainer.prepare_instances(videos, config)
