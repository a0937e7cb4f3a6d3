"""White-box and black-box optimization of a rooftop mesh.

Each step renders the current mesh onto one scene (or a small batch),
runs the detector, and chains the loss gradient back through the detector
and the ray-cast hit points to the vertex displacements ``dv`` and the
global offset ``dg``. Steps are projected back onto the feasible set
immediately.
"""

from __future__ import annotations

import copy
import itertools
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .detectors.base import Detector, DetectorError
from .losses import LossSpec, loss_preset, misdetection_loss, total_loss
from .mesh import DeformationState, SphereSpec, apply_deformation, dump_state
from .metrics import EvalReport, attack_success_rate, average_precision, invisibility_report
from .render import Pose, RayPattern, hdl64_pattern, render, vertex_gradient

logger = logging.getLogger(__name__)


@dataclass
class AttackConfig:
    mode: str = "white"
    optimizer: str = "gd"              # "gd" (normalized steps of size ``step``) or "adam" (rate ``step``)
    step: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 5
    batch_size: int = 1
    shuffle: bool = False
    level: int = 2
    scale: tuple[float, float, float] = (0.7, 0.7, 0.5)
    offset_limit: tuple[float, float, float] = (0.1, 0.1, 0.0)
    loss: LossSpec = field(default_factory=lambda: loss_preset("c_logit"))
    seed: int = 0
    log_every: int = 1
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.mode not in ("white", "black"):
            raise ValueError("mode must be 'white' or 'black'")
        if self.optimizer not in ("gd", "adam"):
            raise ValueError("optimizer must be 'gd' or 'adam'")
        if self.step < 0:
            raise ValueError("step must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        self.scale = tuple(float(v) for v in self.scale)
        self.offset_limit = tuple(float(v) for v in self.offset_limit)

    def initial_state(self) -> DeformationState:
        return DeformationState.from_sphere(SphereSpec(self.level, self.scale), self.offset_limit)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = self.loss.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        d = dict(d)
        loss = d.pop("loss", None)
        if isinstance(loss, str):
            loss = loss_preset(loss)
        elif isinstance(loss, dict):
            loss = dict(loss)
            preset = loss.pop("preset", None)
            loss = loss_preset(preset, **loss) if preset else LossSpec(**loss)
        for k in ("scale", "offset_limit"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d, **({"loss": loss} if loss is not None else {}))


@dataclass
class StepRecord:
    step: int
    epoch: int
    scenes: tuple
    loss: float
    grad_norm: float
    accepted: bool
    loss_after: float | None = None
    note: str = ""


@dataclass
class AttackTrace:
    records: list[StepRecord] = field(default_factory=list)
    final_state: DeformationState | None = None

    def losses(self) -> list[float]:
        return [r.loss for r in self.records]

    def accepted(self) -> list[StepRecord]:
        return [r for r in self.records if r.accepted]

    def log_line(self, r: StepRecord) -> str:
        after = "" if r.loss_after is None else f" loss_after={r.loss_after!r}"
        note = f" note={r.note}" if r.note else ""
        scenes = ",".join(str(s) for s in r.scenes)
        return (f"step={r.step} epoch={r.epoch} scene={scenes} loss={r.loss!r} "
                f"grad_norm={r.grad_norm!r} accepted={int(r.accepted)}{after}{note}")

    def to_json(self) -> str:
        return json.dumps({"records": [asdict(r) for r in self.records]}, indent=1)


# --------------------------------------------------------------------------
# objective for one scene


def placement_poses(scene, lift: float) -> list[Pose]:
    """Rooftop poses raised by ``lift`` (the mesh's local half height)."""
    return [Pose((p.translation[0], p.translation[1], p.translation[2] + lift), p.yaw) for p in scene.poses]


def mesh_poses(scene, state: DeformationState) -> list[Pose]:
    """Mesh placements for a scene: the bottom of the box constraint rests on the roof."""
    return placement_poses(scene, float(state.scale_box[2]))


@dataclass
class SceneEval:
    loss: float
    misdetection: float
    grad_dv: np.ndarray
    grad_dg: np.ndarray
    n_hits: int
    n_pairs: int
    detections: list = field(default_factory=list)


def scene_objective(detector: Detector, scene, state: DeformationState, spec: LossSpec,
                    pattern: RayPattern, need_grad: bool = True) -> SceneEval:
    """Total loss of one scene and its gradient w.r.t. dv and dg.

    The gradient treats the projection as the identity (projected gradient
    steps); coordinates whose offset limit is zero get zero gradient.
    """
    mesh = apply_deformation(state)
    poses = mesh_poses(scene, state)
    res = render(scene.cloud, mesh, poses, pattern)
    dets = detector.forward(res.cloud)
    mis = misdetection_loss(dets, scene.gt_boxes, spec)
    value, lap_grad = total_loss(mis.value, mesh, spec.lam)
    V = len(mesh.vertices)
    g_local = lap_grad.copy()
    if need_grad and (np.any(mis.dlogit) or np.any(mis.dbox)) and len(res.face_ids):
        dpoints = detector.backward(mis.dlogit, mis.dbox)
        grad_hits = np.asarray(dpoints)[res.hit_slice, :3]
        gw = vertex_gradient(res, grad_hits)
        for k, pose in enumerate(poses):
            g_local += gw[k * V:(k + 1) * V] @ pose.rotation()       # R^T g per row
    grad_dg = np.where(state.offset_limit > 0, g_local.sum(axis=0), 0.0)
    return SceneEval(value, mis.value, g_local, grad_dg, len(res.face_ids), len(mis.pairs), dets)


def scene_misdetection(detector: Detector, scene, state: DeformationState | None, spec: LossSpec,
                       pattern: RayPattern) -> float:
    """Forward-only misdetection loss (no mesh when ``state`` is None)."""
    if state is None:
        cloud = scene.cloud
    else:
        cloud = render(scene.cloud, apply_deformation(state), mesh_poses(scene, state), pattern).cloud
    return misdetection_loss(detector.forward(cloud), scene.gt_boxes, spec).value


# --------------------------------------------------------------------------
# optimizer


class Optimizer:
    """GD with per-block normalized steps, or Adam on the raw gradient."""

    def __init__(self, config: AttackConfig, n_vertices: int):
        self.config = config
        self.t = 0
        self.m = [np.zeros((n_vertices, 3)), np.zeros(3)]
        self.v = [np.zeros((n_vertices, 3)), np.zeros(3)]

    def propose(self, state: DeformationState, grads):
        """Candidate state and the optimizer memory to commit if it is kept."""
        c = self.config
        blocks = [state.displacements, state.global_offset]
        new, memory = [], (self.t, self.m, self.v)
        if c.optimizer == "gd":
            for x, g in zip(blocks, grads):
                n = float(np.linalg.norm(g))
                new.append(x - c.step * g / n if n > 0 else x.copy())
        else:
            t = self.t + 1
            m = [c.beta1 * mi + (1 - c.beta1) * g for mi, g in zip(self.m, grads)]
            v = [c.beta2 * vi + (1 - c.beta2) * g * g for vi, g in zip(self.v, grads)]
            for x, mi, vi in zip(blocks, m, v):
                mh = mi / (1 - c.beta1 ** t)
                vh = vi / (1 - c.beta2 ** t)
                new.append(x - c.step * mh / (np.sqrt(vh) + c.adam_eps))
            memory = (t, m, v)
        cand = state.copy()
        cand.displacements, cand.global_offset = new
        return cand.projected(), memory

    def commit(self, memory):
        self.t, self.m, self.v = memory


# --------------------------------------------------------------------------
# drivers


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("ADVMESH_THREADS", "1")))
    except ValueError:
        return 1


def _batches(n_scenes: int, config: AttackConfig):
    rng = np.random.default_rng(config.seed)
    for epoch in range(config.epochs):
        order = rng.permutation(n_scenes) if config.shuffle else np.arange(n_scenes)
        for s in range(0, n_scenes, config.batch_size):
            yield epoch, [int(i) for i in order[s:s + config.batch_size]]


class _Evaluator:
    """Scene objectives for a batch, optionally on worker threads.

    Each worker owns a deep copy of the detector (forward caches are
    per-instance); results are reduced in batch order, so the sum does not
    depend on thread scheduling.
    """

    def __init__(self, detector: Detector, workers: int):
        reentrant = not getattr(detector, "serial_only", False)
        self.workers = workers if reentrant else 1
        self.detectors = [detector] + [copy.deepcopy(detector) for _ in range(self.workers - 1)]
        self.pool = ThreadPoolExecutor(self.workers) if self.workers > 1 else None

    def __call__(self, scenes, ids, state, spec, pattern):
        if self.pool is None or len(ids) == 1:
            return [self._one(self.detectors[0], scenes[i], i, state, spec, pattern) for i in ids]
        chunks = [ids[k::self.workers] for k in range(self.workers)]
        futs = [self.pool.submit(lambda d=d, ch=ch: [(i, self._one(d, scenes[i], i, state, spec, pattern))
                                                     for i in ch])
                for d, ch in zip(self.detectors, chunks)]
        found = dict(itertools.chain.from_iterable(f.result() for f in futs))
        return [found[i] for i in ids]

    @staticmethod
    def _one(det, scene, sid, state, spec, pattern):
        try:
            return scene_objective(det, scene, state, spec, pattern)
        except DetectorError as exc:
            raise DetectorError(f"scene {sid}: {exc}") from exc

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()


def _reduce(evals):
    loss = sum(e.loss for e in evals)
    gv = evals[0].grad_dv.copy()
    gg = evals[0].grad_dg.copy()
    for e in evals[1:]:
        gv += e.grad_dv
        gg += e.grad_dg
    return loss, gv, gg


def _checkpoint(out_dir, step, state):
    if out_dir is None:
        return
    path = os.path.join(out_dir, f"checkpoint_{step:06d}.state")
    with open(path, "w") as fh:
        fh.write(dump_state(state))


def white_box_attack(target: Detector, scenes, config: AttackConfig, pattern: RayPattern | None = None,
                     state: DeformationState | None = None, log=None, checkpoint_dir=None):
    """Optimize the mesh against a differentiable detector; returns (state, trace)."""
    if not target.differentiable:
        raise DetectorError("white-box attack needs a differentiable detector")
    pattern = pattern or hdl64_pattern()
    scenes = list(scenes)
    state = (state or config.initial_state()).projected()
    opt = Optimizer(config, len(state.base_vertices))
    trace = AttackTrace()
    evaluate = _Evaluator(target, _threads())
    try:
        for step, (epoch, ids) in enumerate(_batches(len(scenes), config)):
            loss, gv, gg = _reduce(evaluate(scenes, ids, state, config.loss, pattern))
            gnorm = float(np.sqrt(np.sum(gv * gv) + np.sum(gg * gg)))
            if gnorm == 0.0:
                rec = StepRecord(step, epoch, tuple(ids), loss, 0.0, False, note="zero_gradient")
            else:
                state, memory = opt.propose(state, (gv, gg))
                opt.commit(memory)
                rec = StepRecord(step, epoch, tuple(ids), loss, gnorm, True)
            _log(trace, rec, log, config)
            if config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
                _checkpoint(checkpoint_dir, step + 1, state)
    finally:
        evaluate.close()
    trace.final_state = state
    return state, trace


def black_box_attack(surrogate: Detector, target: Detector, scenes, config: AttackConfig,
                     pattern: RayPattern | None = None, state: DeformationState | None = None,
                     target_loss: LossSpec | None = None, log=None, checkpoint_dir=None):
    """Surrogate-gradient steps kept only when the target's loss drops on the same scenes."""
    if not surrogate.differentiable:
        raise DetectorError("black-box surrogate must be differentiable")
    pattern = pattern or hdl64_pattern()
    tspec = target_loss or config.loss
    scenes = list(scenes)
    state = (state or config.initial_state()).projected()
    opt = Optimizer(config, len(state.base_vertices))
    trace = AttackTrace()
    evaluate = _Evaluator(surrogate, _threads())
    try:
        for step, (epoch, ids) in enumerate(_batches(len(scenes), config)):
            loss, gv, gg = _reduce(evaluate(scenes, ids, state, config.loss, pattern))
            gnorm = float(np.sqrt(np.sum(gv * gv) + np.sum(gg * gg)))
            before = sum(scene_misdetection(target, scenes[i], state, tspec, pattern) for i in ids)
            if gnorm == 0.0:
                rec = StepRecord(step, epoch, tuple(ids), before, 0.0, False, note="zero_gradient")
            else:
                cand, memory = opt.propose(state, (gv, gg))
                after = sum(scene_misdetection(target, scenes[i], cand, tspec, pattern) for i in ids)
                accepted = after < before
                if accepted:
                    state = cand
                    opt.commit(memory)
                rec = StepRecord(step, epoch, tuple(ids), before, gnorm, accepted, after)
            _log(trace, rec, log, config)
            if config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
                _checkpoint(checkpoint_dir, step + 1, state)
    finally:
        evaluate.close()
    trace.final_state = state
    return state, trace


def _log(trace, rec, log, config):
    trace.records.append(rec)
    if config.log_every and rec.step % config.log_every == 0:
        line = trace.log_line(rec)
        logger.debug(line)
        if log is not None:
            log.write(line + "\n")


# --------------------------------------------------------------------------
# evaluation


def detect_scenes(detector: Detector, scenes, mesh=None, pattern: RayPattern | None = None,
                  lift: float | None = None):
    """(detections, gt_boxes) per scene with ``mesh`` on every GT roof.

    ``mesh`` may be None (clean scenes), a DeformationState or a
    TriangleMesh in the local frame; ``lift`` defaults to the state's
    b_z and is required for a bare mesh.
    """
    pattern = pattern or hdl64_pattern()
    if isinstance(mesh, DeformationState):
        lift = float(mesh.scale_box[2]) if lift is None else lift
        mesh = apply_deformation(mesh)
    elif mesh is not None and lift is None:
        raise ValueError("a bare mesh needs an explicit lift")
    out = []
    for scene in scenes:
        cloud = scene.cloud
        if mesh is not None and scene.poses:
            cloud = render(cloud, mesh, placement_poses(scene, lift), pattern).cloud
        out.append((detector.forward(cloud), list(scene.gt_boxes)))
    return out


def evaluate_attack(detector: Detector, scenes, state: DeformationState | None, pattern: RayPattern | None = None,
                    iou_threshold: float = 0.7, vanilla: bool = True, clean=None, mesh=None) -> EvalReport:
    """Clean precision, precision with the adversarial mesh and, optionally, with the undeformed one.

    The attacked mesh is ``mesh`` when given (a TriangleMesh in the local
    frame, e.g. read from OBJ) and the materialized ``state`` otherwise.
    The vanilla mesh is ``state`` with zero displacement and offset.
    """
    pattern = pattern or hdl64_pattern()
    scenes = list(scenes)
    clean = clean if clean is not None else detect_scenes(detector, scenes, None, pattern)
    modes = ("bev", "3d")
    p_o = {m: average_precision(clean, iou_threshold, m) for m in modes}
    extra = {}
    if state is None:
        return EvalReport(p_o["bev"], p_o["3d"], p_o["bev"], p_o["3d"], None, extra)
    lift = float(state.scale_box[2])
    mesh = apply_deformation(state) if mesh is None else mesh
    attacked = detect_scenes(detector, scenes, mesh, pattern, lift)
    p_a = {m: average_precision(attacked, iou_threshold, m) for m in modes}
    if vanilla:
        base = state.copy()
        base.displacements = np.zeros_like(base.displacements)
        base.global_offset = np.zeros(3)
        van = detect_scenes(detector, scenes, base, pattern)
        for m in modes:
            p_v = average_precision(van, iou_threshold, m)
            extra[f"p_vanilla_{m}"] = p_v
            extra[f"asr_vanilla_{m}"] = attack_success_rate(p_o[m], p_v) if p_o[m] > 0 else float("nan")
            extra[f"asr_vs_vanilla_{m}"] = attack_success_rate(p_v, p_a[m]) if p_v > 0 else float("nan")
    inv = invisibility_report(state, mesh)
    return EvalReport(p_o["bev"], p_o["3d"], p_a["bev"], p_a["3d"], inv, extra)


def run_ablation(grid: dict, detector_factory, scenes, base: AttackConfig, eval_scenes=None,
                 pattern: RayPattern | None = None, surrogate_factory=None):
    """Attack + evaluate every cell of a Cartesian grid of config overrides.

    ``grid`` maps AttackConfig field names (``loss`` takes preset names) to
    value lists. Returns a list of row dicts; failed cells carry an
    ``error`` entry and the sweep continues.
    """
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ValueError("ablation grid must be non-empty")
    keys = list(grid)
    rows = []
    scenes = list(scenes)
    eval_scenes = scenes if eval_scenes is None else list(eval_scenes)
    clean = None
    for values in itertools.product(*(grid[k] for k in keys)):
        cell = dict(zip(keys, values))
        row = {k: v for k, v in cell.items()}
        try:
            d = base.to_dict()
            d.update(cell)
            cfg = AttackConfig.from_dict(d)
            target = detector_factory()
            if cfg.mode == "black":
                if surrogate_factory is None:
                    raise ValueError("black-box cells need a surrogate detector")
                state, trace = black_box_attack(surrogate_factory(), target, scenes, cfg, pattern)
            else:
                state, trace = white_box_attack(target, scenes, cfg, pattern)
            if clean is None:
                clean = detect_scenes(target, eval_scenes, None, pattern or hdl64_pattern())
            report = evaluate_attack(target, eval_scenes, state, pattern, clean=clean)
            row.update(report.as_dict())
            row["steps"] = len(trace.records)
            row["accepted"] = len(trace.accepted())
        except Exception as exc:          # cell failures are data, not aborts
            logger.exception("ablation cell %s failed", cell)
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    return rows
