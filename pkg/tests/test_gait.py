import numpy as np
import pytest

from smplab.env import EnvParams
from smplab.gait import (
    STYLES, gait_frequency, generate_gait_dataset, load_dataset, make_clip, preset_dataset,
    save_dataset, zero_crossing_frequency,
)

P = EnvParams()


def test_neutral_frequency_by_zero_crossings():
    clip = make_clip("neutral", 2.0, 10.0, np.random.default_rng(0))
    assert gait_frequency(2.0) == pytest.approx(1.3)
    for k in range(2):
        assert zero_crossing_frequency(clip.states.q[:, k], P.dt) == pytest.approx(1.3, rel=0.01)


def test_zombie_limb1_is_rigid():
    clip = make_clip("zombie", 1.0, 4.0, np.random.default_rng(1))
    q1 = clip.states.q[:, 0]
    assert np.var(q1) < 0.01
    assert np.mean(q1) == pytest.approx(np.pi / 4)


def test_walk_jog_run_preset():
    ds = preset_dataset("walk_jog_run", seed=0)
    assert len(ds.clips) == 3
    assert [c.speed for c in ds.clips] == [1.5, 3.0, 5.0]
    assert all(c.n_frames == 30 for c in ds.clips)
    assert ds.n_windows == 3 * (30 - 10 + 1)


def test_styles_preset_counts():
    ds = preset_dataset("styles", seed=0)
    assert len(ds.clips) == 60
    for k in range(3):
        assert sum(c.style == ds.styles[k] for c in ds.clips) == 20


def test_features_reproduce_analytic_limb_angles():
    rng = np.random.default_rng(5)
    ds = generate_gait_dataset(rng, clips_per_style=3, duration=2.0, turn_range=(-1, 1))
    for k, clip in enumerate(ds.clips):
        w = ds.windows[ds.clip_ids == k]
        q1 = np.arctan2(w[:, -1, 4], w[:, -1, 3])
        q2 = np.arctan2(w[:, -1, 6], w[:, -1, 5])
        np.testing.assert_allclose(q1, clip.states.q[9:, 0], atol=1e-9)
        np.testing.assert_allclose(q2, clip.states.q[9:, 1], atol=1e-9)
        # analytic form
        sp = STYLES[clip.style]
        assert np.max(np.abs(clip.states.q[:, 0] - sp.offset[0])) <= sp.amplitude[0] + 1e-12


def test_clip_root_speed_and_velocity_consistency():
    clip = make_clip("neutral", 3.0, 2.0, np.random.default_rng(0), turn_rate=0.5)
    np.testing.assert_allclose(np.linalg.norm(clip.states.vel, axis=1), 3.0)
    np.testing.assert_allclose(np.diff(clip.states.pos, axis=0), P.dt * clip.states.vel[1:], atol=1e-12)


def test_dataset_file_round_trip_and_determinism(tmp_path):
    a = preset_dataset("walk_jog_run", seed=3)
    save_dataset(a, tmp_path / "a.smpd")
    save_dataset(preset_dataset("walk_jog_run", seed=3), tmp_path / "b.smpd")
    assert (tmp_path / "a.smpd").read_bytes() == (tmp_path / "b.smpd").read_bytes()
    b = load_dataset(tmp_path / "a.smpd")
    assert b.H == 10 and b.D == 13 and b.styles == a.styles
    np.testing.assert_allclose(b.windows, a.windows, atol=1e-5)
    np.testing.assert_array_equal(b.labels, a.labels)
    np.testing.assert_array_equal(b.clips[1].states.q, a.clips[1].states.q)
