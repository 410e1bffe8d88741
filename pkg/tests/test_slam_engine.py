import numpy as np
import pytest
import torch

from camera_pose import PoseSE3
from dataio import FrameRGBD
from eval_metrics import metric_ate
from losses import LossWeights, compute_losses
from renderer import CameraIntrinsics, render
from slam_engine import (
    Keyframe, KeyframeStore, SlamEngine, TrackingDivergedError, draw_tracking_rays, frame_rays, map_step,
    predict_const_speed, run_slam, sample_pixels, track_frame,
)
from synth_world import SynthScene, make_trajectory, render_synth_frame
from tensor_core import params_checksum
from utils import default_config


def blank_frame(intr: CameraIntrinsics, timestamp: float = 0.0) -> FrameRGBD:
    h, w = intr.height, intr.width
    return FrameRGBD(np.full((h, w, 3), 0.5), np.ones((h, w)), np.ones((h, w), dtype=bool), timestamp, intr)


@pytest.fixture
def synth_frames(small_cfg, small_intr):
    scene = SynthScene.from_config(small_cfg["scene"])
    poses = make_trajectory("arc", 5, sweep_deg=4.0, scene=scene)
    return [render_synth_frame(scene, p, small_intr, t=i / 30.0) for i, p in enumerate(poses)]


@pytest.fixture
def engine(small_cfg, rng):
    small_cfg["verbose"] = False
    scene = SynthScene.from_config(small_cfg["scene"])
    return SlamEngine(small_cfg, scene.bounds, rng)


def test_keyframe_ids_must_follow_interval(small_intr):
    store = KeyframeStore(interval=5, window=8)
    store.add(0, blank_frame(small_intr), PoseSE3.identity())
    store.add(5, blank_frame(small_intr), PoseSE3.identity())
    with pytest.raises(ValueError):
        store.add(7, blank_frame(small_intr), PoseSE3.identity())
    with pytest.raises(ValueError):
        store.add(5, blank_frame(small_intr), PoseSE3.identity())
    with pytest.raises(KeyError):
        store.update_pose(10, PoseSE3.identity())
    assert store.ids == [0, 5]


def test_window_with_two_keyframes(small_intr, rng):
    store = KeyframeStore(interval=1, window=3)
    for i in range(2):
        store.add(i, blank_frame(small_intr), PoseSE3.identity())
    current = Keyframe(2, blank_frame(small_intr), PoseSE3.identity())
    window = store.select_window(current, rng)
    assert [kf.frame_id for kf in window] == [2, 1, 0]


def test_window_fills_with_random_older_keyframes(small_intr):
    store = KeyframeStore(interval=1, window=4)
    for i in range(6):
        store.add(i, blank_frame(small_intr), PoseSE3.identity())
    current = Keyframe(6, blank_frame(small_intr), PoseSE3.identity())
    a = store.select_window(current, np.random.default_rng(3))
    b = store.select_window(current, np.random.default_rng(3))
    ids = [kf.frame_id for kf in a]
    assert len(ids) == 4 and ids[:3] == [6, 5, 4]
    assert ids[3] in (0, 1, 2, 3)
    assert ids == [kf.frame_id for kf in b]


def test_window_size_is_capped_by_available(small_intr, rng):
    store = KeyframeStore(interval=1, window=8)
    for i in range(4):
        store.add(i, blank_frame(small_intr), PoseSE3.identity())
    window = store.select_window(Keyframe(4, blank_frame(small_intr), PoseSE3.identity()), rng)
    assert sorted(kf.frame_id for kf in window) == [0, 1, 2, 3, 4]


def test_sample_pixels_distinct_and_in_frame(small_intr, rng):
    px = sample_pixels(small_intr, 100, rng)
    assert px.shape == (100, 2)
    assert len({tuple(p) for p in px}) == 100
    assert px[:, 0].max() <= 16 and px[:, 1].max() <= 12
    assert len(sample_pixels(small_intr, 10_000, rng)) == 17 * 13


def test_frame_rays_convert_z_depth(small_intr):
    frame = blank_frame(small_intr)
    _, dirs, _, depth, valid = frame_rays(frame, PoseSE3.identity(), np.array([[0.0, 0.0], [8.0, 6.0]]))
    # z-глубина 1 м: точка вдоль луча лежит на плоскости z = 1
    assert torch.allclose(dirs[:, 2] * depth, torch.ones(2), atol=1e-12)
    assert float(depth[1]) == 1.0 and bool(valid.all())


def test_tracking_never_touches_field(engine, synth_frames):
    frame = synth_frames[0].frame
    before = params_checksum(engine.field.parameters())
    pose = track_frame(frame, engine.field, engine.renderer, synth_frames[0].pose, engine.cfg["tracking"], engine.rng)
    assert params_checksum(engine.field.parameters()) == before
    assert all(p.requires_grad for p in engine.field.parameters())
    assert np.all(np.isfinite(pose.matrix()))


def test_tracking_at_optimum_stays_put(engine, small_intr):
    # Геометрия поля постоянна, цвет зависит от точки
    with torch.no_grad():
        for decoder in (engine.field.sdf_fused, engine.field.sdf_local):
            decoder.out.weight.zero_()
    start = PoseSE3(np.eye(3), [0.0, 0.0, 1.0])
    _, depth = engine.renderer.render_frame(engine.field, start, small_intr, seed=1)
    frame = FrameRGBD.from_arrays(np.zeros((13, 17, 3)), depth, small_intr)

    # Цвет кадра в выбранных трекингом пикселях рендерится на тех же точках лучей
    cfg = engine.cfg["tracking"]
    draw = draw_tracking_rays(frame, start, cfg["pixels"], engine.renderer, engine.field, np.random.default_rng(5))
    origins, dirs, _, gt_depth, valid = frame_rays(frame, start, draw.pixels)
    with torch.no_grad():
        batch = engine.renderer.sample_rays(origins, dirs, gt_depth, valid, torch.zeros(len(draw.pixels), 3),
                                            engine.field, None, depths=draw.depths)
        color = render(batch).color.numpy()
    iu, iv = draw.pixels[:, 0].astype(int), draw.pixels[:, 1].astype(int)
    frame.color[iv, iu] = color

    pose = track_frame(frame, engine.field, engine.renderer, start, cfg, np.random.default_rng(5))
    assert np.linalg.norm(pose.translation - start.translation) < 1e-4
    angle = np.arccos(np.clip((np.trace(pose.rotation.T @ start.rotation) - 1) / 2, -1, 1))
    assert angle < 1e-4


def test_keep_best_never_returns_worse_than_start(engine, synth_frames):
    frame, start = synth_frames[0].frame, synth_frames[0].pose
    cfg = dict(engine.cfg["tracking"], iterations=4)
    draw = draw_tracking_rays(frame, start, cfg["pixels"], engine.renderer, engine.field, np.random.default_rng(9))
    weights = LossWeights.from_dict(cfg["weights"])

    def loss_at(pose):
        origins, dirs, color, depth, valid = frame_rays(frame, pose, draw.pixels)
        with torch.no_grad():
            batch = engine.renderer.sample_rays(origins, dirs, depth, valid, color, engine.field, None,
                                                depths=draw.depths)
            return compute_losses(batch, weights)[1].total

    pose = track_frame(frame, engine.field, engine.renderer, start, cfg, np.random.default_rng(9))
    assert loss_at(pose) <= loss_at(start) + 1e-12


def test_tracking_noise_frame_returns_finite_pose(engine, small_intr, rng):
    frame = FrameRGBD.from_arrays(rng.random((13, 17, 3)), rng.uniform(0.0, 3.0, (13, 17)), small_intr)
    pose = track_frame(frame, engine.field, engine.renderer, PoseSE3(np.eye(3), [0.0, 0.0, 1.0]),
                       engine.cfg["tracking"], engine.rng)
    assert np.all(np.isfinite(pose.matrix()))


def test_tracking_reports_divergence(engine, synth_frames):
    with torch.no_grad():
        engine.field.sdf_fused.out.bias.fill_(float("nan"))
    with pytest.raises(TrackingDivergedError):
        track_frame(synth_frames[0].frame, engine.field, engine.renderer, synth_frames[0].pose,
                    engine.cfg["tracking"], engine.rng, frame_id=3)


def test_tracking_hook_receives_every_iteration(engine, synth_frames):
    calls = []
    track_frame(synth_frames[0].frame, engine.field, engine.renderer, synth_frames[0].pose, engine.cfg["tracking"],
                engine.rng, frame_id=2, hook=lambda *args: calls.append(args))
    assert [c[2] for c in calls] == list(range(engine.cfg["tracking"]["iterations"]))
    assert all(c[0] == 2 and c[1] == "tracking" for c in calls)


def test_map_step_rejects_empty_window(engine):
    with pytest.raises(ValueError):
        map_step([], engine.field, engine.renderer, engine.field_stepper, engine.cfg["mapping"], engine.rng)


def test_map_step_updates_field_and_keeps_anchor(engine, synth_frames):
    before = params_checksum(engine.field.parameters())
    anchor = Keyframe(0, synth_frames[0].frame, synth_frames[0].pose)
    other = Keyframe(2, synth_frames[2].frame, synth_frames[2].pose)
    poses = map_step([other, anchor], engine.field, engine.renderer, engine.field_stepper, engine.cfg["mapping"],
                     engine.rng, iterations=3, anchor_id=0)
    assert params_checksum(engine.field.parameters()) != before
    assert poses[1] is anchor.pose
    assert not np.array_equal(poses[0].matrix(), other.pose.matrix())


def test_map_step_reduces_loss_on_single_frame(engine, synth_frames):
    window = [Keyframe(0, synth_frames[0].frame, synth_frames[0].pose)]
    totals = []
    map_step(window, engine.field, engine.renderer, engine.field_stepper, engine.cfg["mapping"], engine.rng,
             iterations=60, hook=lambda fid, phase, it, report: totals.append(report.total))
    assert np.mean(totals[-10:]) < np.mean(totals[:10])


def test_predict_const_speed():
    a = PoseSE3(np.eye(3), [0.0, 0.0, 0.0])
    b = PoseSE3(np.eye(3), [0.1, 0.0, 0.0])
    assert np.allclose(predict_const_speed([a, b]).translation, [0.2, 0.0, 0.0])
    assert predict_const_speed([b]) is b


def test_single_frame_stream(small_cfg, synth_frames, rng):
    small_cfg["verbose"] = False
    init = synth_frames[0].pose
    scene = SynthScene.from_config(small_cfg["scene"])
    trajectory, field, engine = run_slam([synth_frames[0].frame], small_cfg, scene.bounds, rng, init_pose=init)
    assert len(trajectory) == 1 and trajectory[0] is init
    assert engine.keyframes.ids == [0]


def test_empty_stream_rejected(engine):
    with pytest.raises(ValueError):
        engine.run([])


def test_run_keeps_anchor_and_keyframe_spacing(small_cfg, synth_frames, rng):
    small_cfg["verbose"] = False
    init = synth_frames[0].pose
    anchor = init.matrix().copy()
    scene = SynthScene.from_config(small_cfg["scene"])
    reports = []
    trajectory, _, engine = run_slam([sf.frame for sf in synth_frames], small_cfg, scene.bounds, rng,
                                     init_pose=init, hook=lambda *args: reports.append(args))
    assert len(trajectory) == 5
    assert np.array_equal(trajectory[0].matrix(), anchor)
    assert np.array_equal(engine.keyframes.keyframes[0].pose.matrix(), anchor)
    assert all(i % small_cfg["mapping"]["keyframe_every"] == 0 for i in engine.keyframes.ids)
    assert engine.keyframes.ids == [0, 2, 4]
    assert engine.timestamps == [sf.frame.timestamp for sf in synth_frames]
    phases = {r[1] for r in reports}
    assert phases == {"tracking", "mapping"}
    assert all(np.all(np.isfinite(p.matrix())) for p in trajectory)


def test_engine_state_round_trip(engine, synth_frames, small_intr):
    engine.run([sf.frame for sf in synth_frames[:3]], synth_frames[0].pose)
    state = engine.state_dict()
    other = SlamEngine(engine.cfg, engine.field.bounds, np.random.default_rng(99))
    other.load_state_dict(state, small_intr)
    assert params_checksum(other.field.parameters()) == params_checksum(engine.field.parameters())
    assert other.keyframes.ids == engine.keyframes.ids
    assert other.rng.bit_generator.state == engine.rng.bit_generator.state
    assert all(np.array_equal(a.matrix(), b.matrix()) for a, b in zip(other.trajectory, engine.trajectory))


def test_const_speed_option_is_used(small_cfg, synth_frames, rng):
    small_cfg["verbose"] = False
    small_cfg["tracking"]["const_speed"] = True
    scene = SynthScene.from_config(small_cfg["scene"])
    trajectory, _, _ = run_slam([sf.frame for sf in synth_frames[:3]], small_cfg, scene.bounds, rng,
                                init_pose=synth_frames[0].pose)
    assert len(trajectory) == 3


@pytest.mark.slow
def test_tracking_recovers_two_centimetre_offset():
    cfg = default_config("synthetic")
    cfg["verbose"] = False
    rng = np.random.default_rng(0)
    intr = CameraIntrinsics.from_dict(cfg["dataset"]["intrinsics"])
    scene = SynthScene.from_config(cfg["scene"])
    pose = make_trajectory("static", 1, scene=scene)[0]
    frame = render_synth_frame(scene, pose, intr).frame
    engine = SlamEngine(cfg, scene.bounds, rng)
    engine.process_frame(frame, pose)
    start = PoseSE3(pose.rotation, pose.translation + np.array([0.02, 0.0, 0.0]))
    track_cfg = dict(cfg["tracking"], iterations=60)
    est = track_frame(frame, engine.field, engine.renderer, start, track_cfg, rng)
    assert np.linalg.norm(est.translation - pose.translation) < 0.005


@pytest.mark.slow
def test_static_stream_has_submillimetre_ate():
    cfg = default_config("synthetic")
    cfg["verbose"] = False
    intr = CameraIntrinsics.from_dict(cfg["dataset"]["intrinsics"])
    scene = SynthScene.from_config(cfg["scene"])
    pose = make_trajectory("static", 1, scene=scene)[0]
    frame = render_synth_frame(scene, pose, intr).frame
    trajectory, _, _ = run_slam([frame] * 10, cfg, scene.bounds, np.random.default_rng(0), init_pose=pose)
    _, rmse = metric_ate(trajectory, [pose] * 10, align=False)
    assert rmse < 0.1
