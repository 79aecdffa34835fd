"""Shared fixtures: small trained models and the identity gallery.

Training runs once per session on synthetic oracle data. The matcher
fixtures share one identity gallery (latent vectors) with the scenarios
the tests track, mirroring the intended workflow: the affinity head is
fit on labeled footage of the identities it will later re-associate.
"""

from dataclasses import replace

import numpy as np
import pytest

from embtrack.core import TrackerConfig
from embtrack.motion import MotionParams, train_lstm
from embtrack.simulator import ScenarioConfig, generate
from embtrack.training import LabeledFrame, train_matcher

EMBED_DIM = 32
GALLERY_IDS = 20
QUARTER_DIM = EMBED_DIM // 4


@pytest.fixture(scope="session")
def gallery_config():
    """Scenario template whose latents every gallery-based test reuses.

    Absences matter here: frames where an identity is missing are the
    only supervision the non-match column gets. Train without them and
    the head ranks true pairs first but never pushes wrong-pair logits
    below the non-match constant, so a freed track can steal a stranger
    once its real owner is gone. Detection dropout puts departures in
    nearly every sampled pair; occlusion windows add multi-frame gaps.
    """
    return ScenarioConfig(
        n_objects=GALLERY_IDS,
        n_frames=150,
        arena=(2000.0, 2000.0),
        occlusion_rate=0.35,
        occlusion_length_range=(2, 8),
        fn_rate=0.15,
        embed_dim=EMBED_DIM,
        embed_noise=0.05,
        seed=11,
    )


@pytest.fixture(scope="session")
def gallery_scenario(gallery_config):
    return generate(gallery_config)


@pytest.fixture(scope="session")
def gallery_latents(gallery_scenario):
    return gallery_scenario.latents


@pytest.fixture(scope="session")
def matcher_config():
    return TrackerConfig(embed_dim=EMBED_DIM, max_pair_gap=10)


@pytest.fixture(scope="session")
def trained_matcher(gallery_scenario, matcher_config):
    params, history = train_matcher(
        [gallery_scenario.labeled_frames()],
        matcher_config,
        epochs=30,
        rng=np.random.default_rng(1),
    )
    assert history[-1] < history[0]
    return params


@pytest.fixture(scope="session")
def trained_matcher_quarter(gallery_scenario, matcher_config):
    """Head fit on the same footage with embeddings truncated to a
    quarter of their width (the reduced-richness ablation proxy)."""
    frames = [
        LabeledFrame(f.ids, f.embeddings[:, :QUARTER_DIM])
        for f in gallery_scenario.labeled_frames()
    ]
    config = replace(matcher_config, embed_dim=QUARTER_DIM)
    params, _ = train_matcher(
        [frames], config, epochs=30, rng=np.random.default_rng(2)
    )
    return params


@pytest.fixture(scope="session")
def trained_lstm():
    """Forecaster fit on clean synthetic trajectories (straight and
    turning, a spread of speeds)."""
    tracks = []
    for seed, profile in ((31, "constant"), (32, "turning"), (33, "turning")):
        cfg = ScenarioConfig(
            n_objects=15,
            n_frames=90,
            arena=(2000.0, 2000.0),
            motion_profile=profile,
            speed_range=(3.0, 12.0),
            embed_dim=4,
            embed_noise=0.0,
            seed=seed,
        )
        tracks.extend(generate(cfg).gt_observation_tracks())
    params = MotionParams.create(
        mode="2d", hidden_dim=64, horizon=5, rng=np.random.default_rng(3)
    )
    history = train_lstm(
        tracks,
        params,
        past_window=10,
        epochs=8,
        lr=5e-3,
        batch_size=64,
        rng=np.random.default_rng(4),
    )
    assert history[-1] < history[0]
    return params
