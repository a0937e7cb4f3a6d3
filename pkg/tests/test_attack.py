import numpy as np
import pytest

from advmesh.attack import (AttackConfig, Optimizer, black_box_attack, detect_scenes, evaluate_attack, mesh_poses,
                            run_ablation, scene_objective, white_box_attack)
from advmesh.detectors.base import DetectorError
from advmesh.detectors.stub import EchoDetector
from advmesh.detectors.template import TemplateDetector, TemplateDetectorConfig
from advmesh.losses import loss_preset
from advmesh.mesh import apply_deformation, load_state
from advmesh.render import hdl64_pattern

NO_LAP = loss_preset("c_logit", lam=0.0)


def in_bounds(state):
    raw = state.base_vertices + state.displacements
    return bool(np.all(np.abs(raw) <= state.scale_box) and np.all(np.abs(state.global_offset) <= state.offset_limit))


def test_config_guards_and_round_trip():
    for bad in (dict(mode="grey"), dict(optimizer="sgd"), dict(step=-1.0), dict(epochs=0), dict(batch_size=0)):
        with pytest.raises(ValueError):
            AttackConfig(**bad)
    cfg = AttackConfig(step=0.02, level=1, loss=loss_preset("mr_phyadv"))
    assert AttackConfig.from_dict(cfg.to_dict()) == cfg
    assert AttackConfig.from_dict({"loss": "ml_iou"}).loss == loss_preset("ml_iou")


def test_mesh_rests_on_the_roof(small_scenes):
    cfg = AttackConfig()
    st = cfg.initial_state()
    scene = small_scenes[0]
    (pose,) = mesh_poses(scene, st)
    car = scene.gt_boxes[0]
    assert pose.translation[2] == pytest.approx(car.z + car.h / 2 + 0.5)
    lowest = pose.apply(st.base_vertices)[:, 2].min()
    assert lowest == pytest.approx(car.z + car.h / 2, abs=1e-12)


def test_never_hit_scene_leaves_state_unchanged(small_scenes, small_pattern):
    scene = small_scenes[8]           # the car sits outside the pattern's azimuth window
    cfg = AttackConfig(epochs=3, step=0.05, loss=NO_LAP)
    ev = scene_objective(TemplateDetector(), scene, cfg.initial_state(), NO_LAP, small_pattern)
    assert ev.n_hits == 0 and np.all(ev.grad_dv == 0) and np.all(ev.grad_dg == 0)
    st, trace = white_box_attack(TemplateDetector(), [scene], cfg, small_pattern)
    assert np.array_equal(st.displacements, cfg.initial_state().displacements)
    assert np.array_equal(st.global_offset, np.zeros(3))
    assert all(r.note == "zero_gradient" and not r.accepted for r in trace.records)


def test_scene_without_placements():
    scene = type("S", (), {})()
    scene.cloud, scene.gt_boxes, scene.poses = np.zeros((0, 4)), [], []
    ev = scene_objective(TemplateDetector(), scene, AttackConfig().initial_state(), NO_LAP, hdl64_pattern("rooftop"))
    assert ev.loss == 0.0 and ev.n_hits == 0


def test_zero_step_size_is_a_no_op(small_scenes, small_pattern):
    cfg = AttackConfig(epochs=2, step=0.0)
    st, trace = white_box_attack(TemplateDetector(), small_scenes[:1], cfg, small_pattern)
    init = cfg.initial_state()
    assert np.array_equal(st.displacements, init.displacements)
    assert np.array_equal(st.global_offset, init.global_offset)
    assert len(trace.records) == 2


def test_gd_step_has_size_epsilon_per_block():
    cfg = AttackConfig(step=0.01, level=1)
    st = cfg.initial_state()
    st.displacements = -0.2 * st.base_vertices              # interior, so nothing is clipped
    rng = np.random.default_rng(0)
    g = (rng.normal(size=st.displacements.shape), np.array([0.3, -0.4, 0.0]))
    cand, _ = Optimizer(cfg, len(st.base_vertices)).propose(st, g)
    assert np.linalg.norm(cand.displacements - st.displacements) == pytest.approx(0.01, rel=1e-12)
    assert np.linalg.norm(cand.global_offset - st.global_offset) == pytest.approx(0.01, rel=1e-12)
    cand, _ = Optimizer(cfg, len(st.base_vertices)).propose(st, (np.zeros_like(g[0]), np.zeros(3)))
    assert np.array_equal(cand.displacements, st.displacements)


def test_adam_first_step_is_sign_like():
    cfg = AttackConfig(step=1e-3, optimizer="adam", level=0)
    st = cfg.initial_state()
    st.displacements = -0.2 * st.base_vertices
    g = np.full_like(st.displacements, 5.0)
    opt = Optimizer(cfg, len(st.base_vertices))
    cand, mem = opt.propose(st, (g, np.zeros(3)))
    assert np.allclose(cand.displacements - st.displacements, -1e-3, rtol=1e-6)
    assert opt.t == 0
    opt.commit(mem)
    assert opt.t == 1


def test_white_box_descends_on_a_single_scene(small_scenes, small_pattern):
    st, trace = white_box_attack(TemplateDetector(), [small_scenes[10]], AttackConfig(epochs=20, step=0.01),
                                 small_pattern)
    losses = trace.losses()
    assert losses[-1] < losses[0]
    assert np.count_nonzero(np.diff(losses) > 0) <= 2
    assert in_bounds(st)


def test_constraints_hold_after_aggressive_steps(small_scenes, small_pattern):
    cfg = AttackConfig(epochs=2, step=2.0, offset_limit=(0.05, 0.02, 0.0), level=1)
    st, _ = white_box_attack(TemplateDetector(), small_scenes[:3], cfg, small_pattern)
    assert in_bounds(st)
    assert np.any(np.abs(st.base_vertices + st.displacements) == st.scale_box)     # the box is active
    assert st.global_offset[2] == 0.0
    assert abs(st.global_offset[0]) <= 0.05 and abs(st.global_offset[1]) <= 0.02


def test_white_box_rejects_non_differentiable(small_scenes):
    det = TemplateDetector()
    det.differentiable = False
    with pytest.raises(DetectorError):
        white_box_attack(det, small_scenes[:1], AttackConfig(epochs=1))
    with pytest.raises(DetectorError):
        black_box_attack(det, TemplateDetector(), small_scenes[:1], AttackConfig(epochs=1))


def test_checkpoints_are_written(small_scenes, small_pattern, tmp_path):
    cfg = AttackConfig(epochs=2, step=0.01, checkpoint_every=1, level=1)
    st, _ = white_box_attack(TemplateDetector(), small_scenes[:1], cfg, small_pattern, checkpoint_dir=str(tmp_path))
    files = sorted(p.name for p in tmp_path.iterdir())
    assert files == ["checkpoint_000001.state", "checkpoint_000002.state"]
    last = load_state((tmp_path / files[-1]).read_text())
    assert np.array_equal(last.displacements, st.displacements)


# --------------------------------------------------------------------------
# black box


def test_black_box_invariants(small_scenes, small_pattern):
    cfg = AttackConfig(epochs=6, step=0.05, level=1)
    target = TemplateDetector(TemplateDetectorConfig(w_above=-0.12))     # a related but different model
    st, trace = black_box_attack(TemplateDetector(), target, [small_scenes[0]], cfg, small_pattern)
    assert in_bounds(st)
    for r in trace.records:
        if r.loss_after is not None:
            assert r.accepted == (r.loss_after < r.loss)
    kept = [r.loss_after for r in trace.accepted()]
    assert len(kept) >= 2
    assert all(b < a for a, b in zip(kept, kept[1:]))
    # the next step's "before" loss is the last accepted value
    for prev, cur in zip(trace.records, trace.records[1:]):
        expect = prev.loss_after if prev.accepted else prev.loss
        assert cur.loss == expect


def test_black_box_with_surrogate_equal_to_target_matches_white_box(small_scenes, small_pattern):
    cfg = AttackConfig(epochs=4, step=0.01)
    scenes = [small_scenes[10]]
    wb, _ = white_box_attack(TemplateDetector(), scenes, cfg, small_pattern)
    bb, trace = black_box_attack(TemplateDetector(), TemplateDetector(), scenes, cfg, small_pattern)
    assert all(r.accepted for r in trace.records)
    assert np.array_equal(wb.displacements, bb.displacements)
    assert np.array_equal(wb.global_offset, bb.global_offset)


def test_black_box_constant_target_never_accepts(small_scenes, small_pattern):
    cfg = AttackConfig(epochs=3, step=0.05, level=1)
    st, trace = black_box_attack(TemplateDetector(), EchoDetector([]), small_scenes[:2], cfg, small_pattern)
    assert trace.accepted() == []
    assert np.array_equal(st.displacements, cfg.initial_state().displacements)


# --------------------------------------------------------------------------
# evaluation and ablation


def test_evaluate_undeformed_mesh_has_zero_asr_vs_vanilla(small_scenes, small_pattern):
    st = AttackConfig(level=1).initial_state()
    rep = evaluate_attack(TemplateDetector(), small_scenes[:4], st, small_pattern)
    assert rep.extra["asr_vs_vanilla_3d"] == 0.0 or np.isnan(rep.extra["asr_vs_vanilla_3d"])
    assert rep.extra["p_vanilla_3d"] == rep.p_a_3d
    assert rep.invisibility.l2 == 0.0
    clean = evaluate_attack(TemplateDetector(), small_scenes[:4], None, small_pattern)
    assert clean.p_a_3d == clean.p_o_3d == rep.p_o_3d
    with pytest.raises(ValueError):
        detect_scenes(TemplateDetector(), small_scenes[:1], apply_deformation(st), small_pattern)


def test_ablation_grid(small_scenes, small_pattern):
    base = AttackConfig(epochs=1, step=0.01)
    with pytest.raises(ValueError):
        run_ablation({}, TemplateDetector, small_scenes[:2], base, pattern=small_pattern)
    with pytest.raises(ValueError):
        run_ablation({"level": []}, TemplateDetector, small_scenes[:2], base, pattern=small_pattern)
    rows = run_ablation({"level": [0, 1]}, TemplateDetector, small_scenes[:2], base, pattern=small_pattern)
    assert [r["level"] for r in rows] == [0, 1]
    for r in rows:
        assert "error" not in r and r["steps"] == 2 and 0 <= r["map_3d"] <= 1
    rows = run_ablation({"loss": ["c_logit", "nope"]}, TemplateDetector, small_scenes[:1], base,
                        pattern=small_pattern)
    assert "error" not in rows[0] and "nope" in rows[1]["error"]
    rows = run_ablation({"mode": ["black"]}, TemplateDetector, small_scenes[:1], base, pattern=small_pattern)
    assert "surrogate" in rows[0]["error"]


def test_thread_count_does_not_change_the_result(small_scenes, small_pattern, monkeypatch):
    cfg = AttackConfig(epochs=2, step=0.01, batch_size=4, level=1)
    monkeypatch.setenv("ADVMESH_THREADS", "1")
    a, _ = white_box_attack(TemplateDetector(), small_scenes[:4], cfg, small_pattern)
    monkeypatch.setenv("ADVMESH_THREADS", "3")
    b, _ = white_box_attack(TemplateDetector(), small_scenes[:4], cfg, small_pattern)
    assert np.max(np.abs(a.displacements - b.displacements)) <= 1e-12
    assert np.max(np.abs(a.global_offset - b.global_offset)) <= 1e-12
