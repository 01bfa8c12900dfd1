"""Desk-scale kinematic execution environment.

A free-flying end effector tracks commanded twists perfectly (forward
Euler at a fixed dt); rigid objects carry sampled surface clouds,
labeled ground-truth keypoints, and penalty-contact surfaces. Contact
produces a sensed force only (spring model, no dynamics): the reaction
on the tool is stiffness * penetration * surface normal, summed over
penetrated surfaces and evaluated at the tool's contact probe point.

Synthetic feature rendering gives the grounding pipeline a closed-loop
oracle: each rendered pixel's descriptor is a fixed smooth function of
(object identity, object-local surface point), so true correspondences
across rigid transforms share descriptors exactly (plus optional
Gaussian noise).
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .controllers import FORCE_ALIGN, Limits, ObservationBundle
from .errors import ConfigError, EmptyScene, GraspTooFar, TaskAxesError
from .features import DepthMask, FeatureGrid
from .geometry import CameraIntrinsics, Frame, rotvec_to_matrix
from .grounding import (
    GroundedParams,
    GroundingConfig,
    cloud_from_depth,
    ground_spec,
)
from .skill import ROBOT_ROLE_SOURCE, GraspStep, LiftedSkill, Twist, run_phase

ROBOT_BUILTIN_AXES = ("x", "y", "z")
ROBOT_BUILTIN_KEYPOINT = "pos"


@dataclass
class ContactSurface:
    """Plane spring in the owning object's frame."""

    point: np.ndarray
    normal: np.ndarray
    stiffness: float

    def __post_init__(self):
        self.point = np.asarray(self.point, dtype=np.float64)
        self.normal = np.asarray(self.normal, dtype=np.float64)
        n = np.linalg.norm(self.normal)
        if n == 0:
            raise ConfigError("contact surface normal must be nonzero")
        self.normal = self.normal / n
        if self.stiffness <= 0:
            raise ConfigError("contact stiffness must be positive")


@dataclass
class SceneObject:
    name: str
    pose: Frame
    cloud: np.ndarray                      # (N, 3) object frame
    truth_keypoints: dict = field(default_factory=dict)
    surfaces: list = field(default_factory=list)
    graspable: bool = False
    contact_probe: str = None              # keypoint used as tool tip after grasp

    def __post_init__(self):
        self.cloud = np.asarray(self.cloud, dtype=np.float64).reshape(-1, 3)
        self.truth_keypoints = {k: np.asarray(v, dtype=np.float64)
                                for k, v in self.truth_keypoints.items()}

    def world_keypoint(self, label) -> np.ndarray:
        return self.pose.apply(self.truth_keypoints[label])


@dataclass
class FeatureRenderConfig:
    dim: int = 24
    length_scale: float = 0.02
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.dim < 4:
            raise ConfigError("descriptor dimension must be >= 4")
        if self.length_scale <= 0:
            raise ConfigError("length scale must be positive")


@dataclass
class Scene:
    objects: list
    intrinsics: CameraIntrinsics
    ee_start: Frame = field(default_factory=Frame.identity)
    features: FeatureRenderConfig = field(default_factory=FeatureRenderConfig)

    def find(self, name) -> SceneObject:
        for obj in self.objects:
            if obj.name == name:
                return obj
        raise ConfigError(f"no object named {name!r} in scene")


def _object_basis(name: str, cfg: FeatureRenderConfig):
    """Per-object random Fourier basis, stable across renders and runs."""
    tag = zlib.crc32(name.encode("utf-8"))
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, tag]))
    freqs = rng.normal(0.0, 1.0 / cfg.length_scale, size=(cfg.dim, 3))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=cfg.dim)
    return freqs, phases


def render_synthetic_features(scene: Scene, intr: CameraIntrinsics = None,
                              noise_tag: int = 0):
    """Render the scene into a (FeatureGrid, DepthMask) pair.

    Every object point is projected through the pinhole model; the
    nearest point wins each pixel (ties by global point order). The
    winning pixel's descriptor is cos(W p_local + b) with a per-object
    basis W, b, making descriptors invariant to the object's world pose.
    Background pixels get NaN depth and a zero descriptor.
    """
    intr = intr or scene.intrinsics
    cfg = scene.features
    if not scene.objects or all(obj.cloud.shape[0] == 0 for obj in scene.objects):
        raise EmptyScene("scene has no renderable points")

    pts_world = []
    pts_local = []
    obj_ids = []
    for i, obj in enumerate(scene.objects):
        if obj.cloud.shape[0] == 0:
            continue
        world = obj.cloud @ obj.pose.rotation.T + obj.pose.origin
        pts_world.append(world)
        pts_local.append(obj.cloud)
        obj_ids.append(np.full(obj.cloud.shape[0], i, dtype=np.int64))
    world = np.concatenate(pts_world)
    local = np.concatenate(pts_local)
    obj_ids = np.concatenate(obj_ids)

    z = world[:, 2]
    front = z > 1e-6
    u = np.rint(intr.fx * world[:, 0] / np.where(front, z, 1.0) + intr.cx).astype(np.int64)
    v = np.rint(intr.fy * world[:, 1] / np.where(front, z, 1.0) + intr.cy).astype(np.int64)
    visible = front & (u >= 0) & (u < intr.width) & (v >= 0) & (v < intr.height)
    u, v, z = u[visible], v[visible], z[visible]
    local = local[visible]
    obj_ids = obj_ids[visible]

    depth = np.full((intr.height, intr.width), np.nan)
    data = np.zeros((intr.height, intr.width, cfg.dim), dtype=np.float64)
    if u.size:
        flat = v * intr.width + u
        order = np.lexsort((np.arange(flat.size), z, flat))
        flat_sorted = flat[order]
        first = np.ones(flat_sorted.size, dtype=bool)
        first[1:] = flat_sorted[1:] != flat_sorted[:-1]
        winners = order[first]
        wu, wv = u[winners], v[winners]
        depth[wv, wu] = z[winners]
        for i, obj in enumerate(scene.objects):
            sel = obj_ids[winners] == i
            if not sel.any():
                continue
            freqs, phase = _object_basis(obj.name, cfg)
            desc = np.cos(local[winners][sel] @ freqs.T + phase)
            data[wv[sel], wu[sel]] = desc
        if cfg.noise_sigma > 0:
            rng = np.random.default_rng(
                np.random.SeedSequence([cfg.seed, 7919, noise_tag]))
            data[wv, wu] += rng.normal(0.0, cfg.noise_sigma,
                                       size=(winners.size, cfg.dim))
    grid = FeatureGrid(data=data.astype(np.float32),
                       meta={"source": "synthetic", "dim": str(cfg.dim),
                             "length_scale": str(cfg.length_scale),
                             "noise_sigma": str(cfg.noise_sigma)})
    return grid, DepthMask(depth=depth)


# ----------------------------------------------------------------------
# simulation state


@dataclass
class SimState:
    ee: Frame
    attached: tuple = None          # (object name, grip Frame: object in ee frame)
    probe_local: np.ndarray = None  # contact probe in ee frame
    contact_force: np.ndarray = None
    t: int = 0
    dt: float = 0.005

    def __post_init__(self):
        if self.probe_local is None:
            self.probe_local = np.zeros(3)
        if self.contact_force is None:
            self.contact_force = np.zeros(3)
        if self.dt <= 0:
            raise ConfigError("dt must be positive")


def object_pose(scene: Scene, state: SimState, name: str) -> Frame:
    """Current world pose of an object, tracking the gripper if attached."""
    if state.attached is not None and state.attached[0] == name:
        return state.ee.compose(state.attached[1])
    return scene.find(name).pose


def _contact_force(scene: Scene, state: SimState, probe_world) -> np.ndarray:
    force = np.zeros(3)
    attached_name = state.attached[0] if state.attached else None
    for obj in scene.objects:
        if obj.name == attached_name:
            continue
        for surf in obj.surfaces:
            point = obj.pose.apply(surf.point)
            normal = obj.pose.apply_dir(surf.normal)
            depth = float((point - probe_world) @ normal)
            if depth > 0:
                force = force + surf.stiffness * depth * normal
    return force


def step_sim(state: SimState, twist: Twist, scene: Scene) -> SimState:
    """One forward-Euler tick: integrate the twist, re-evaluate contact."""
    rot = rotvec_to_matrix(np.asarray(twist.w, dtype=np.float64) * state.dt)
    ee = Frame(state.ee.origin + np.asarray(twist.v, dtype=np.float64) * state.dt,
               rot @ state.ee.rotation)
    probe_world = ee.apply(state.probe_local)
    return replace(state, ee=ee, contact_force=_contact_force(scene, state, probe_world),
                   t=state.t + 1)


def grasp(state: SimState, scene: Scene, object_name: str, keypoint: str,
          tol: float = 0.005) -> SimState:
    """Rigidly attach an object when the gripper is at its grasp keypoint."""
    obj = scene.find(object_name)
    if not obj.graspable:
        raise ConfigError(f"object {object_name!r} is not graspable")
    if keypoint not in obj.truth_keypoints:
        raise ConfigError(f"object {object_name!r} has no keypoint {keypoint!r}")
    target = obj.world_keypoint(keypoint)
    distance = float(np.linalg.norm(state.ee.origin - target))
    if distance > tol:
        raise GraspTooFar(
            f"gripper is {distance * 1000:.1f} mm from {object_name}.{keypoint}, "
            f"tolerance {tol * 1000:.1f} mm", distance=distance)
    grip = state.ee.inverse().compose(obj.pose)
    probe_local = state.probe_local
    if obj.contact_probe is not None:
        probe_local = grip.apply(obj.truth_keypoints[obj.contact_probe])
    return replace(state, attached=(object_name, grip), probe_local=probe_local)


# ----------------------------------------------------------------------
# grounded-parameter anchoring


class GroundedAnchors:
    """Tracks where each grounded value lives: world-fixed, gripper-fixed,
    or a robot built-in. Attached entries follow the end effector."""

    def __init__(self):
        self._keypoints = {}   # qualified -> ("world"|"ee", vec)
        self._axes = {}
        self._scores = {}
        self._robot_roles = set()
        self._roles = {}       # role -> list of qualified labels

    def add_robot_role(self, role):
        self._robot_roles.add(role)

    def add_role(self, role, grounded: GroundedParams):
        labels = []
        for label, pos in grounded.keypoints.items():
            q = f"{role}.{label}"
            self._keypoints[q] = ("world", np.asarray(pos, dtype=np.float64))
            self._scores[q] = grounded.scores.get(label, 1.0)
            labels.append(q)
        for label, direction in grounded.axes.items():
            q = f"{role}.{label}"
            self._axes[q] = ("world", np.asarray(direction, dtype=np.float64))
            labels.append(q)
        self._roles[role] = labels

    def attach_role(self, role, ee: Frame):
        """Re-express a role's groundings in the gripper frame at grasp time."""
        inv = ee.inverse()
        for q in self._roles.get(role, []):
            if q in self._keypoints:
                kind, value = self._keypoints[q]
                if kind == "world":
                    self._keypoints[q] = ("ee", inv.apply(value))
            if q in self._axes:
                kind, value = self._axes[q]
                if kind == "world":
                    self._axes[q] = ("ee", inv.apply_dir(value))

    def current(self, ee: Frame, timestamp: int = 0) -> GroundedParams:
        grounded = GroundedParams(timestamp=timestamp)
        for q, (kind, value) in self._keypoints.items():
            grounded.keypoints[q] = ee.apply(value) if kind == "ee" else value
            grounded.scores[q] = self._scores.get(q, 1.0)
        for q, (kind, value) in self._axes.items():
            grounded.axes[q] = ee.apply_dir(value) if kind == "ee" else value
        for role in self._robot_roles:
            grounded.keypoints[f"{role}.{ROBOT_BUILTIN_KEYPOINT}"] = ee.origin
            grounded.scores[f"{role}.{ROBOT_BUILTIN_KEYPOINT}"] = 1.0
            for i, axis in enumerate(ROBOT_BUILTIN_AXES):
                grounded.axes[f"{role}.{axis}"] = ee.rotation[:, i]
        return grounded


# ----------------------------------------------------------------------
# whole-skill execution


def _default_run_grounding() -> GroundingConfig:
    # synthetic descriptors are exact, so the argmax transfer is too;
    # soft mode stays the default at the matching CLI where noisy
    # real-world grids are the expected input
    from .features import MatchConfig
    return GroundingConfig(match=MatchConfig(mode="hard"))


@dataclass
class RunConfig:
    dt: float = 0.005
    grasp_tol: float = 0.005
    limits: Limits = field(default_factory=Limits)
    grounding: GroundingConfig = field(default_factory=_default_run_grounding)

    def __post_init__(self):
        if self.dt <= 0:
            raise ConfigError("dt must be positive")


class SimLog:
    """Append-only per-tick trace, serializable as JSON lines."""

    def __init__(self):
        self.records = []

    def append(self, record):
        self.records.append(record)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_jsonl())

    @staticmethod
    def read(path):
        with open(path, "r", encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]


@dataclass
class RunResult:
    success: bool
    phases: list                  # (phase name, PhaseResult)
    error: str
    log: SimLog
    state: SimState

    def summary(self) -> dict:
        return {
            "success": self.success,
            "phases": [{"name": name, "outcome": res.outcome, "ticks": res.ticks}
                       for name, res in self.phases],
            "error": self.error,
            "ticks_total": self.state.t,
        }


def _check_stability(skill: LiftedSkill, scene: Scene, cfg: RunConfig):
    """Forward-Euler gain bounds; violations are config errors, not runtime."""
    max_k = max((s.stiffness for obj in scene.objects for s in obj.surfaces),
                default=0.0)
    for phase in skill.phases:
        for ctrl in phase.translational + phase.rotational:
            if ctrl.gains.kp * cfg.dt > 1.0 or ctrl.gains.kr * cfg.dt > 1.0:
                raise ConfigError(
                    f"phase {phase.name!r}: gain*dt exceeds 1, integration unstable")
            if ctrl.kind == FORCE_ALIGN and max_k > 0 \
                    and ctrl.gains.kf * max_k * cfg.dt >= 1.0:
                raise ConfigError(
                    f"phase {phase.name!r}: kf*stiffness*dt >= 1, force loop unstable")


class SkillRunner:
    """Grounds a lifted skill against a scene and executes its phases.

    Grounding happens once, from the initial render (or supplied feature
    files); afterwards keypoints and axes of grasped objects follow the
    gripper kinematically, which realizes per-phase re-grounding without
    new images existing mid-run.
    """

    def __init__(self, skill: LiftedSkill, scene: Scene, specs: dict,
                 ref_scene: Scene = None, config: RunConfig = None,
                 feature_files=None):
        self.skill = skill
        self.scene = scene
        self.ref_scene = ref_scene
        self.config = config or RunConfig()
        self.specs = specs
        self.feature_files = feature_files
        self.robot_roles = {role for role, src in skill.uses if src == ROBOT_ROLE_SOURCE}
        for role, src in skill.uses:
            if src != ROBOT_ROLE_SOURCE and role not in specs:
                raise ConfigError(f"no grounding spec supplied for role {role!r}")
        _check_stability(skill, scene, self.config)
        self.anchors = GroundedAnchors()
        self.log = SimLog()
        self.state = SimState(ee=scene.ee_start, dt=self.config.dt)
        self._grounded = False
        self._last_obs = None

    # -- grounding

    def _render_inputs(self):
        if self.feature_files is not None:
            return self.feature_files
        ref_scene = self.ref_scene or self.scene
        ref_grid, _ = render_synthetic_features(ref_scene, noise_tag=0)
        tgt_grid, tgt_depth = render_synthetic_features(self.scene, noise_tag=1)
        return ref_grid, tgt_grid, tgt_depth

    def ground_all(self):
        if self._grounded:
            return
        self._grounded = True
        ref_grid, tgt_grid, tgt_depth = self._render_inputs()
        cloud = cloud_from_depth(tgt_depth, self.scene.intrinsics)
        for role, src in self.skill.uses:
            if role in self.robot_roles:
                self.anchors.add_robot_role(role)
                continue
            spec = self.specs[role]
            try:
                grounded = ground_spec(spec, ref_grid, tgt_grid, tgt_depth, cloud,
                                       self.scene.intrinsics, self.config.grounding)
            except TaskAxesError as err:
                raise err.annotate(f"role {role!r}")
            self.anchors.add_role(role, grounded)

    # -- environment protocol for run_phase

    def observe(self) -> ObservationBundle:
        grounded = self.anchors.current(self.state.ee, timestamp=self.state.t)
        obs = ObservationBundle(grounded=grounded,
                                measured_force=-self.state.contact_force,
                                time=self.state.t, dt=self.state.dt)
        self._last_obs = obs
        return obs

    def apply(self, twist: Twist):
        self.state = step_sim(self.state, twist, self.scene)

    def _on_tick(self, record):
        grounded = self._last_obs.grounded if self._last_obs else GroundedParams()
        record.update({
            "t": self.state.t,
            "ee": {"origin": [float(x) for x in self.state.ee.origin],
                   "rotation": [[float(x) for x in row]
                                for row in self.state.ee.rotation]},
            "contact_force": [float(x) for x in self.state.contact_force],
            "grounded": {
                "keypoints": {q: [float(x) for x in p]
                              for q, p in grounded.keypoints.items()},
                "axes": {q: [float(x) for x in d]
                         for q, d in grounded.axes.items()},
            },
        })
        self.log.append(record)

    # -- execution

    def _role_object(self, role) -> str:
        if role in self.robot_roles:
            raise ConfigError(f"role {role!r} is the robot, it cannot be grasped")
        names = self.specs[role].object_names
        if len(names) != 1:
            raise ConfigError(f"role {role!r} spans objects {names}, expected one")
        return names[0]

    def run(self) -> RunResult:
        error = None
        phases = []
        try:
            self.ground_all()
            for step in self.skill.steps:
                if isinstance(step, GraspStep):
                    obj_name = self._role_object(step.role)
                    self.state = grasp(self.state, self.scene, obj_name,
                                       step.keypoint, tol=self.config.grasp_tol)
                    self.anchors.attach_role(step.role, self.state.ee)
                    continue
                result = run_phase(step, self, self.config.limits,
                                   on_tick=self._on_tick)
                phases.append((step.name, result))
                if result.outcome != "done":
                    break
        except TaskAxesError as err:
            error = str(err)
        expected = len(self.skill.phases)
        success = (error is None and len(phases) == expected
                   and all(res.outcome == "done" for _, res in phases))
        return RunResult(success=success, phases=phases, error=error,
                         log=self.log, state=self.state)


def run_skill(skill: LiftedSkill, scene: Scene, specs: dict,
              ref_scene: Scene = None, config: RunConfig = None,
              feature_files=None) -> RunResult:
    """Ground and execute a skill; convenience wrapper over SkillRunner."""
    runner = SkillRunner(skill, scene, specs, ref_scene=ref_scene, config=config,
                         feature_files=feature_files)
    return runner.run()
