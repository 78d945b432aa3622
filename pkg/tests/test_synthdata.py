import numpy as np
import pytest

from vfisr.flowwarp import approximate_half_flows, backward_warp, estimate_flow
from vfisr.flowwarp import FlowField
from vfisr.synthdata import (
    DatasetManifest,
    Layer,
    SceneSpec,
    build_dataset,
    generate_scene,
    materialize,
    plan_dataset,
    random_scene_specs,
    sample_oracle,
    sample_starts,
)


def single(v=(2.0, 0.0), texture="mix", n=9, seed=0, size=32):
    return generate_scene(SceneSpec(size, size, texture, (Layer(velocity=v),), frame_count=n, seed=seed))


def test_constant_velocity_flow():
    scene = single()
    np.testing.assert_array_equal(scene.flow(3, 4), np.broadcast_to([2.0, 0.0], (32, 32, 2)))


def test_same_seed_bit_identical():
    a, b = single(seed=5), single(seed=5)
    assert np.array_equal(a.frames, b.frames)
    assert not np.array_equal(a.frames, single(seed=6).frames)


def test_integer_motion_shifts_periodic_texture():
    scene = single(v=(2.0, 0.0), n=9)
    # frame index 4 vs 0 (frames "5" and "1"): 8 px to the right, periodic canvas
    np.testing.assert_allclose(scene.frames[4], np.roll(scene.frames[0], 8, axis=1), atol=1e-12)


def test_half_flows_of_oracle_are_true_half_steps():
    scene = single(v=(1.5, -2.5), n=9)
    fs = [FlowField(scene.flow(s, t), s, t) for s, t in ((0, 2), (2, 0), (2, 4), (4, 2))]
    for h in approximate_half_flows(*fs):
        np.testing.assert_allclose(h.data, scene.flow(h.from_time, h.to_time), atol=1e-12)


def test_middle_frame_matches_warped_ends_on_smooth_texture():
    scene = single(v=(1.3, 0.7), texture="noise", n=9, size=64)
    mid = scene.frames[1]
    before = backward_warp(scene.frames[0], scene.flow(1, 0))
    after = backward_warp(scene.frames[2], scene.flow(1, 2))
    inner = (slice(8, -8), slice(8, -8))
    assert np.abs(before - mid)[inner].mean() <= 2e-2
    assert np.abs(after - mid)[inner].mean() <= 2e-2


def test_sprite_layers_own_their_pixels():
    spec = SceneSpec(
        32, 32, "checker",
        (Layer(velocity=(0.0, 0.0)), Layer(velocity=(3.0, 0.0), centre=(16.0, 16.0), half_size=4.0)),
        frame_count=9,
    )
    scene = generate_scene(spec)
    own = scene.owner(0)
    assert own[16, 16] == 1 and own[0, 0] == 0
    f = scene.flow(0, 1)
    assert tuple(f[16, 16]) == (3.0, 0.0) and tuple(f[0, 0]) == (0.0, 0.0)


def test_spec_validation():
    with pytest.raises(ValueError):
        SceneSpec(frame_count=8)
    with pytest.raises(ValueError):
        SceneSpec(texture="marble")
    with pytest.raises(ValueError):
        SceneSpec(layers=(Layer(velocity=(7.0, 0.0)),), max_disp=6.0)


def test_spec_dict_round_trip():
    for spec in random_scene_specs(4, seed=2):
        assert SceneSpec.from_dict(spec.to_dict()) == spec
        assert all(np.hypot(*l.velocity) <= spec.max_disp for l in spec.layers)


def test_sample_start_arithmetic():
    # 9-frame windows every 10 frames of a 29-frame scene: 1-based starts 1, 11, 21
    assert [s + 1 for s in sample_starts(29, 10)] == [1, 11, 21]
    assert len(sample_starts(9, 10)) == 1
    assert len(sample_starts(30, 3)) == (30 - 9) // 3 + 1


def test_dataset_manifest_and_rebuild():
    specs = random_scene_specs(2, seed=3, canvas=(48, 48), frame_count=19)
    manifest, samples = build_dataset(specs, patch=32, frame_stride=10, seed=4)
    assert len(samples) == 2 * 2
    assert samples[0].hr.shape == (7, 32, 32, 3) and samples[0].lr.shape == (5, 16, 16, 3)
    back = DatasetManifest.from_dict(manifest.to_dict())
    frames = {sid: generate_scene(SceneSpec.from_dict(d)).frames for sid, d in back.scenes.items()}
    again = materialize(back, frames)
    for a, b in zip(samples, again):
        assert a.sample_id == b.sample_id
        assert np.array_equal(a.hr, b.hr) and np.array_equal(a.lr, b.lr)
    e = manifest.entries[1]
    top, left, h, w = e.crop
    np.testing.assert_array_equal(samples[1].hr_at(0), frames[e.scene_id][e.start + 4, top : top + h, left : left + w])


def test_dataset_errors():
    specs = random_scene_specs(1, seed=0, canvas=(32, 32), frame_count=9)
    with pytest.raises(ValueError):
        plan_dataset(specs, patch=48, frame_stride=10, seed=0)
    with pytest.raises(ValueError):
        plan_dataset(specs, patch=15, frame_stride=10, seed=0)


def test_sample_oracle_is_lr_displacement():
    spec = SceneSpec(32, 32, "noise", (Layer(velocity=(4.0, -2.0)),), frame_count=9)
    scene = generate_scene(spec)
    oracle = sample_oracle(scene, start=0, crop=(0, 0, 32, 32))
    # half-steps -4 -> 0 are HR frames 0 -> 4: 16 HR px right, i.e. 8 LR px
    f = estimate_flow(oracle, np.zeros((16, 16)), np.zeros((16, 16)), -4, 0)
    np.testing.assert_allclose(f.data, np.broadcast_to([8.0, -4.0], (16, 16, 2)))
