import numpy as np
import pytest

from sluice.config import ModelConfig
from sluice.constants import TaskIds
from sluice.exceptions import ConfigurationError, DatasetError, TrainingError
from sluice.nn import AdamSettings
from sluice.simenv import Episode
from sluice.wam import (
    PredictedRollout,
    TrainWindow,
    WorldActionModel,
    sample_training_window,
    slot_time,
    time_slot,
    train_wam,
    window_indices,
)

TINY_MODEL = ModelConfig(
    H=8, r=2, k=4, latent_dim=8, sem_dim=4, trunk_width=16, width=8, heads=2
)


def _episode(T, latent_dim=8, episode_id=0):
    return Episode(
        TaskIds.TRANSPORT_EASY,
        0,
        [],
        np.arange(T * 3, dtype=float).reshape(T, 3),
        np.arange((T + 1) * latent_dim, dtype=float).reshape(T + 1, latent_dim),
        True,
        episode_id,
    )


@pytest.mark.parametrize(
    ("T", "s", "H", "r", "actions", "latents"),
    [
        (10, 9, 4, 2, [9, 10, 10, 10], [11, 11]),
        (10, 1, 4, 2, [1, 2, 3, 4], [3, 5]),
        (3, 3, 4, 4, [3, 3, 3, 3], [4]),
    ],
)
def test_window_indices(T, s, H, r, actions, latents):
    assert window_indices(T, s, H, r) == (actions, latents)


def test_window_index_errors():
    with pytest.raises(ConfigurationError):
        window_indices(10, 1, 5, 2)
    with pytest.raises(ConfigurationError):
        window_indices(10, 11, 4, 2)
    with pytest.raises(ConfigurationError):
        window_indices(10, 0, 4, 2)


def test_slot_times():
    assert [slot_time(j, 4) for j in range(3)] == [4, 8, 12]
    assert time_slot(8, 4) == 1
    with pytest.raises(ConfigurationError):
        time_slot(6, 4)
    with pytest.raises(ConfigurationError):
        time_slot(0, 4)


@pytest.mark.parametrize("r", [1, 2, 4, 8])
def test_slot_time_roundtrip_is_exhaustive(r):
    for H in range(r, 65, r):
        slots = range(H // r)
        assert [time_slot(slot_time(j, r), r) for j in slots] == list(slots)
        steps = [m for m in range(1, H + 1) if m % r == 0]
        assert [slot_time(time_slot(m, r), r) for m in steps] == steps
        for m in range(1, H + 1):
            if m % r:
                with pytest.raises(ConfigurationError):
                    time_slot(m, r)


def test_sampled_window_pads_with_final_action():
    ep = _episode(10)
    win = sample_training_window(ep, 4, 2, np.random.default_rng(0), s=9)
    np.testing.assert_array_equal(win.o_s, ep.latents[8])
    np.testing.assert_array_equal(win.actions[1:], np.tile(ep.actions[9], (3, 1)))
    np.testing.assert_array_equal(win.latents, ep.latents[[10, 10]])
    assert win.key == (0, 9)
    with pytest.raises(DatasetError):
        sample_training_window(_episode(0), 4, 2, np.random.default_rng(0))


@pytest.mark.parametrize(("T", "H", "r"), [(10, 4, 2), (7, 8, 4), (5, 4, 1)])
def test_last_window_targets_terminal_frame(T, H, r):
    ep = _episode(T)
    win = sample_training_window(ep, H, r, np.random.default_rng(0), s=T)
    np.testing.assert_array_equal(win.latents, np.tile(ep.latents[T], (H // r, 1)))
    np.testing.assert_array_equal(win.actions, np.tile(ep.actions[T - 1], (H, 1)))


def test_terminal_frame_is_reachable_target():
    T, H, r = 12, 8, 2
    ep = _episode(T)
    seen = set()
    for s in range(1, T + 1):
        _, lat_idx = window_indices(T, s, H, r)
        assert max(lat_idx) <= T + 1
        win = sample_training_window(ep, H, r, np.random.default_rng(0), s=s)
        expected = [min(s - 1 + (j + 1) * r, T) for j in range(H // r)]
        np.testing.assert_array_equal(win.latents, ep.latents[expected])
        seen.update(expected)
    assert T in seen


def test_clamped_window_frequency_matches_horizon_share():
    T, H, r = 100, 8, 2
    ep = _episode(T)
    rng = np.random.default_rng(1)
    clamped = 0
    draws = 10_000
    for _ in range(draws):
        win = sample_training_window(ep, H, r, rng)
        clamped += win.s + H > T
    assert abs(clamped / draws - H / T) <= 0.02


def test_predict_requires_training():
    model = WorldActionModel(TINY_MODEL)
    with pytest.raises(ConfigurationError, match="not been trained"):
        model.predict(np.zeros(8), TaskIds.TRANSPORT_EASY)
    loose = WorldActionModel(TINY_MODEL, allow_untrained=True)
    ro = loose.predict(np.zeros(8), TaskIds.INSERT_HARD, origin_step=5)
    assert ro.actions.shape == (8, 3)
    assert ro.latents.shape == (4, 8)
    assert ro.semantic_tokens.shape == (2, 4)
    assert (ro.H, ro.r, ro.origin_step) == (8, 2, 5)
    with pytest.raises(ConfigurationError):
        loose.predict(np.zeros(7), TaskIds.INSERT_HARD)
    with pytest.raises(ConfigurationError):
        loose.predict(np.zeros(8), "fold-laundry")


def test_predict_is_deterministic():
    a = WorldActionModel(TINY_MODEL, seed=4, allow_untrained=True)
    b = WorldActionModel(TINY_MODEL, seed=4, allow_untrained=True)
    o = np.linspace(-1, 1, 8)
    ra, rb = (m.predict(o, TaskIds.TRANSPORT_EASY) for m in (a, b))
    np.testing.assert_array_equal(ra.actions, rb.actions)
    np.testing.assert_array_equal(ra.latents, rb.latents)
    assert a.flops == 2 * (16 * 16 + 16 * 16 + 16 * 24 + 16 * 32)


def test_rollout_alignment_checks():
    with pytest.raises(ConfigurationError):
        PredictedRollout(np.zeros((8, 3)), np.zeros((3, 8)), np.zeros((2, 4)))


def test_training_reduces_loss(tiny_config):
    eps = [_episode(12, episode_id=i) for i in range(3)]
    for ep in eps:
        ep.actions = np.tanh(ep.actions / 30)
        ep.latents = np.tanh(ep.latents / 100)
    model, history = train_wam(eps, tiny_config, steps=120)
    assert model.trained
    assert len(history) == 120
    first = history[0]["loss_act"] + history[0]["loss_vid"]
    last = np.mean([h["loss_act"] + h["loss_vid"] for h in history[-5:]])
    assert last < first
    with pytest.raises(DatasetError):
        train_wam([], tiny_config)


def test_train_step_names_bad_windows():
    model = WorldActionModel(TINY_MODEL)
    good = TrainWindow(
        1, 2, TaskIds.TRANSPORT_EASY, np.zeros(8), np.zeros((8, 3)), np.zeros((4, 8))
    )
    bad = TrainWindow(
        7,
        3,
        TaskIds.TRANSPORT_EASY,
        np.full(8, np.inf),
        np.zeros((8, 3)),
        np.zeros((4, 8)),
    )
    with pytest.raises(TrainingError, match=r"\(7, 3\)"):
        model.train_step([good, bad], AdamSettings())
    with pytest.raises(DatasetError):
        model.train_step([], AdamSettings())


def test_checkpoint_roundtrip(tmp_path, tiny_wam):
    path = tiny_wam.checkpoint().save(tmp_path / "wam.ffdc")
    loaded = WorldActionModel.load(path)
    o = np.full(tiny_wam.conf.latent_dim, 0.1)
    a = tiny_wam.predict(o, TaskIds.INSERT_HARD)
    b = loaded.predict(o, TaskIds.INSERT_HARD)
    np.testing.assert_array_equal(a.actions, b.actions)
    np.testing.assert_array_equal(a.semantic_tokens, b.semantic_tokens)
