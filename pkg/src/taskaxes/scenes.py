"""Scene construction: primitive cloud sampling, JSON I/O, demo scenes.

Scene JSON layout:

    {
      "intrinsics": {"fx":..,"fy":..,"cx":..,"cy":..,"width":..,"height":..},
      "ee_start": {"origin": [x,y,z], "rpy_deg": [r,p,y]},
      "features": {"dim":.., "length_scale":.., "noise_sigma":.., "seed":..},
      "reference": "ref_scene.json",            # optional sibling file
      "objects": [
        {"name": "...", "pose": {"origin": [..], "rpy_deg": [..]},
         "primitive": {"type": "plane|box|cylinder", ...} | "cloud": [[x,y,z],..]
           | "cloud_file": "points.json",
         "keypoints": {"label": [x,y,z]},        # object frame
         "surfaces": [{"point": [..], "normal": [..], "stiffness": N_per_m}],
         "graspable": true, "contact_probe": "tip_pos"}
      ]
    }

Primitives carry a "spacing" (grid pitch in meters, the reciprocal of
linear sampling density). Keypoints are snapped to the nearest sampled
cloud point at load time so that annotated points are guaranteed to lie
on the rendered surface.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .errors import ConfigError
from .geometry import CameraIntrinsics, Frame, project_point
from .grounding import AxisSpec, GroundingSpec, KeypointRef, spec_to_json
from .simulator import ContactSurface, FeatureRenderConfig, Scene, SceneObject

DESK_Z = 0.45


# ----------------------------------------------------------------------
# primitive sampling


def _cover(lo, hi, spacing):
    n = max(2, int(round((hi - lo) / spacing)) + 1)
    return np.linspace(lo, hi, n)


def sample_plane(size_x, size_y, spacing):
    xs = _cover(-size_x / 2, size_x / 2, spacing)
    ys = _cover(-size_y / 2, size_y / 2, spacing)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    return np.column_stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)])


def sample_box(size_x, size_y, size_z, spacing):
    hx, hy, hz = size_x / 2, size_y / 2, size_z / 2
    xs, ys, zs = (_cover(-h, h, spacing) for h in (hx, hy, hz))
    faces = []
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    for z in (-hz, hz):
        faces.append(np.column_stack([gx.ravel(), gy.ravel(),
                                      np.full(gx.size, z)]))
    gx, gz = np.meshgrid(xs, zs, indexing="ij")
    for y in (-hy, hy):
        faces.append(np.column_stack([gx.ravel(), np.full(gx.size, y),
                                      gz.ravel()]))
    gy, gz = np.meshgrid(ys, zs, indexing="ij")
    for x in (-hx, hx):
        faces.append(np.column_stack([np.full(gy.size, x), gy.ravel(),
                                      gz.ravel()]))
    return np.concatenate(faces)


def sample_cylinder(radius, height, spacing):
    h = height / 2
    n_theta = max(12, int(round(2 * np.pi * radius / spacing)))
    thetas = np.linspace(0.0, 2 * np.pi, n_theta, endpoint=False)
    zs = _cover(-h, h, spacing)
    gt, gz = np.meshgrid(thetas, zs, indexing="ij")
    side = np.column_stack([radius * np.cos(gt).ravel(),
                            radius * np.sin(gt).ravel(), gz.ravel()])
    xs = _cover(-radius, radius, spacing)
    gx, gy = np.meshgrid(xs, xs, indexing="ij")
    inside = gx ** 2 + gy ** 2 <= radius ** 2
    disk = np.column_stack([gx[inside], gy[inside]])
    caps = [np.column_stack([disk, np.full(disk.shape[0], z)]) for z in (-h, h)]
    return np.concatenate([side] + caps)


def sample_primitive(spec: dict) -> np.ndarray:
    kind = spec.get("type")
    spacing = float(spec.get("spacing", 0.0015))
    if spacing <= 0:
        raise ConfigError("primitive spacing must be positive")
    if kind == "plane":
        sx, sy = spec["size"]
        return sample_plane(float(sx), float(sy), spacing)
    if kind == "box":
        sx, sy, sz = spec["size"]
        return sample_box(float(sx), float(sy), float(sz), spacing)
    if kind == "cylinder":
        return sample_cylinder(float(spec["radius"]), float(spec["height"]), spacing)
    raise ConfigError(f"unknown primitive type {kind!r}")


def snap_to_cloud(point, cloud) -> np.ndarray:
    d2 = np.sum((cloud - np.asarray(point, dtype=np.float64)) ** 2, axis=1)
    return cloud[int(np.argmin(d2))].copy()


# ----------------------------------------------------------------------
# scene JSON


def object_from_json(data: dict, base_dir=".") -> SceneObject:
    if "primitive" in data:
        cloud = sample_primitive(data["primitive"])
    elif "cloud" in data:
        cloud = np.asarray(data["cloud"], dtype=np.float64).reshape(-1, 3)
    elif "cloud_file" in data:
        with open(os.path.join(base_dir, data["cloud_file"]), "r") as fh:
            cloud = np.asarray(json.load(fh), dtype=np.float64).reshape(-1, 3)
    else:
        raise ConfigError(f"object {data.get('name')!r} has no cloud source")
    pose = data.get("pose", {})
    frame = Frame.from_rpy_deg(pose.get("origin", (0, 0, 0)),
                               pose.get("rpy_deg", (0, 0, 0)))
    keypoints = {label: snap_to_cloud(p, cloud)
                 for label, p in data.get("keypoints", {}).items()}
    surfaces = [ContactSurface(point=np.asarray(s["point"], dtype=np.float64),
                               normal=np.asarray(s["normal"], dtype=np.float64),
                               stiffness=float(s["stiffness"]))
                for s in data.get("surfaces", [])]
    return SceneObject(name=data["name"], pose=frame, cloud=cloud,
                       truth_keypoints=keypoints, surfaces=surfaces,
                       graspable=bool(data.get("graspable", False)),
                       contact_probe=data.get("contact_probe"))


def scene_from_json(data: dict, base_dir="."):
    """Build a Scene; returns (scene, reference_path_or_None)."""
    intr = CameraIntrinsics.from_json(data["intrinsics"])
    ee = data.get("ee_start", {})
    ee_start = Frame.from_rpy_deg(ee.get("origin", (0.0, 0.0, 0.25)),
                                  ee.get("rpy_deg", (0.0, 0.0, 0.0)))
    feat = data.get("features", {})
    features = FeatureRenderConfig(
        dim=int(feat.get("dim", 24)),
        length_scale=float(feat.get("length_scale", 0.02)),
        noise_sigma=float(feat.get("noise_sigma", 0.0)),
        seed=int(feat.get("seed", 0)))
    objects = [object_from_json(o, base_dir) for o in data.get("objects", [])]
    scene = Scene(objects=objects, intrinsics=intr, ee_start=ee_start,
                  features=features)
    return scene, data.get("reference")


def load_scene(path):
    """Load a scene file plus its reference scene, if it names one."""
    base_dir = os.path.dirname(os.path.abspath(path))
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    scene, ref_name = scene_from_json(data, base_dir)
    ref_scene = None
    if ref_name:
        with open(os.path.join(base_dir, ref_name), "r", encoding="utf-8") as fh:
            ref_scene, _ = scene_from_json(json.load(fh), base_dir)
    return scene, ref_scene


# ----------------------------------------------------------------------
# grounding specs from reference scenes


def make_grounding_spec(ref_scene: Scene, object_name: str, keypoint_labels,
                        axes, reference_image_id="reference") -> GroundingSpec:
    """Annotate reference pixels by projecting truth keypoints."""
    obj = ref_scene.find(object_name)
    intr = ref_scene.intrinsics
    keypoints = []
    for label in keypoint_labels:
        world = obj.world_keypoint(label)
        u, v, _ = project_point(world, intr)
        pu, pv = int(round(u)), int(round(v))
        if not (0 <= pu < intr.width and 0 <= pv < intr.height):
            raise ConfigError(f"{object_name}.{label} projects outside the image")
        keypoints.append(KeypointRef(object=object_name, label=label, pixel=(pu, pv)))
    return GroundingSpec(reference_image_id=reference_image_id,
                         keypoints=keypoints, axes=list(axes))


# ----------------------------------------------------------------------
# demo task scenes


def _intrinsics_json():
    return {"fx": 600.0, "fy": 600.0, "cx": 320.0, "cy": 240.0,
            "width": 640, "height": 480}


def _desk_json():
    return {"name": "desk",
            "pose": {"origin": [0.0, 0.0, DESK_Z], "rpy_deg": [0.0, 0.0, 0.0]},
            "primitive": {"type": "plane", "size": [0.5, 0.38], "spacing": 0.0012},
            "keypoints": {}, "surfaces": [], "graspable": False}


def _base_scene_json(objects, seed):
    return {
        "intrinsics": _intrinsics_json(),
        "ee_start": {"origin": [0.0, 0.0, 0.25], "rpy_deg": [0.0, 0.0, 0.0]},
        "features": {"dim": 24, "length_scale": 0.02, "noise_sigma": 0.0,
                     "seed": seed},
        "objects": objects,
    }


def _spatula_json(origin_xy, yaw_deg):
    return {"name": "spatula",
            "pose": {"origin": [origin_xy[0], origin_xy[1], DESK_Z - 0.005],
                     "rpy_deg": [0.0, 0.0, yaw_deg]},
            "primitive": {"type": "box", "size": [0.22, 0.045, 0.01],
                          "spacing": 0.0007},
            "keypoints": {"tip_pos": [0.1, 0.0, -0.005],
                          "handle_pos": [-0.105, 0.0, -0.005],
                          "grasp_pos": [-0.075, 0.0, -0.005]},
            "surfaces": [], "graspable": True, "contact_probe": "tip_pos"}


def _pan_json(origin_xy, yaw_deg):
    return {"name": "pan",
            "pose": {"origin": [origin_xy[0], origin_xy[1], DESK_Z - 0.006],
                     "rpy_deg": [0.0, 0.0, yaw_deg]},
            "primitive": {"type": "cylinder", "radius": 0.12, "height": 0.012,
                          "spacing": 0.0007},
            "keypoints": {"center_pos": [0.0, 0.0, -0.006],
                          "rim_pos": [-0.095, 0.0, -0.006],
                          "scrape_pos": [-0.05, 0.0, -0.006]},
            "surfaces": [{"point": [0.0, 0.0, -0.006], "normal": [0.0, 0.0, -1.0],
                          "stiffness": 15000.0}],
            "graspable": False}


def _mug_json(origin_xy):
    return {"name": "mug",
            "pose": {"origin": [origin_xy[0], origin_xy[1], DESK_Z - 0.05],
                     "rpy_deg": [0.0, 0.0, 0.0]},
            "primitive": {"type": "cylinder", "radius": 0.035, "height": 0.10,
                          "spacing": 0.00045},
            "keypoints": {"center_pos": [0.0, 0.0, -0.05],
                          "edge_pos": [0.0325, 0.0, -0.05],
                          "handle_pos": [0.028, 0.0, -0.05]},
            "surfaces": [], "graspable": True}


def _bowl_json(origin_xy):
    return {"name": "bowl",
            "pose": {"origin": [origin_xy[0], origin_xy[1], DESK_Z - 0.02],
                     "rpy_deg": [0.0, 0.0, 0.0]},
            "primitive": {"type": "cylinder", "radius": 0.075, "height": 0.04,
                          "spacing": 0.00055},
            "keypoints": {"center_pos": [0.0, 0.0, -0.02]},
            "surfaces": [], "graspable": False}


def _screw_json(origin_xy, yaw_deg=0.0):
    # lying flat: local z (shaft axis) pitched onto the desk plane
    return {"name": "screw",
            "pose": {"origin": [origin_xy[0], origin_xy[1], DESK_Z - 0.004],
                     "rpy_deg": [0.0, 90.0, yaw_deg]},
            "primitive": {"type": "cylinder", "radius": 0.004, "height": 0.07,
                          "spacing": 0.0005},
            "keypoints": {"head_pos": [0.004, 0.0, -0.031],
                          "tip_pos": [0.004, 0.0, 0.031],
                          "grasp_pos": [0.004, 0.0, 0.005]},
            "surfaces": [], "graspable": True, "contact_probe": "tip_pos"}


def _block_json(origin_xy):
    return {"name": "block",
            "pose": {"origin": [origin_xy[0], origin_xy[1], DESK_Z - 0.015],
                     "rpy_deg": [0.0, 0.0, 0.0]},
            "primitive": {"type": "box", "size": [0.12, 0.12, 0.03],
                          "spacing": 0.00065},
            "keypoints": {"hole_pos": [0.0, 0.0, -0.015]},
            "surfaces": [{"point": [0.0, 0.0, 0.005], "normal": [0.0, 0.0, -1.0],
                          "stiffness": 5000.0}],
            "graspable": False}


_SPEC_AXES = {
    "spatula": [AxisSpec(label="tip_dir", kind="from_keypoints",
                         a="tip_pos", b="handle_pos")],
    "pan": [AxisSpec(label="surface_dir", kind="surface_normal", at="center_pos"),
            AxisSpec(label="scrape_dir", kind="from_keypoints",
                     a="center_pos", b="rim_pos")],
    "mug": [AxisSpec(label="up_dir", kind="surface_normal", at="center_pos"),
            AxisSpec(label="edge_dir", kind="edge_direction", at="edge_pos")],
    "bowl": [AxisSpec(label="surface_dir", kind="surface_normal", at="center_pos")],
    "screw": [AxisSpec(label="axis_dir", kind="from_keypoints",
                       a="tip_pos", b="head_pos")],
    "block": [AxisSpec(label="hole_dir", kind="surface_normal", at="hole_pos"),
              AxisSpec(label="turn_ref", kind="global", dir=(-1.0, 0.0, 0.0))],
}

TASKS = ("scrape", "pour", "screw")


def build_task(task: str, seed: int = 7):
    """Scene pair, grounding specs, and skill source for one demo task.

    Returns a dict with the run scene / reference scene JSON (the run
    scene's objects sit at different poses than the reference ones, so
    grounding performs a real transfer), per-role grounding specs, and
    the skill source text.
    """
    if task == "scrape":
        ref_objs = [_desk_json(), _spatula_json((-0.115, 0.09), 0.0),
                    _pan_json((0.10, -0.02), 85.0)]
        run_objs = [_desk_json(), _spatula_json((-0.12, 0.10), 20.0),
                    _pan_json((0.09, -0.03), 90.0)]
        roles = {"spatula": "spatula", "pan": "pan"}
    elif task == "pour":
        ref_objs = [_desk_json(), _mug_json((-0.08, -0.04)), _bowl_json((0.07, 0.05))]
        run_objs = [_desk_json(), _mug_json((-0.09, -0.05)), _bowl_json((0.08, 0.06))]
        roles = {"mug": "mug", "bowl": "bowl"}
    elif task == "screw":
        ref_objs = [_desk_json(), _screw_json((-0.06, 0.04)), _block_json((0.07, -0.03))]
        run_objs = [_desk_json(), _screw_json((-0.07, 0.05)), _block_json((0.08, -0.04))]
        roles = {"screw": "screw", "block": "block"}
    else:
        raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}")

    ref_json = _base_scene_json(ref_objs, seed)
    run_json = _base_scene_json(run_objs, seed)
    run_json["reference"] = "ref_scene.json"
    ref_scene, _ = scene_from_json(ref_json)
    specs = {}
    for role, obj_name in roles.items():
        obj = next(o for o in ref_json["objects"] if o["name"] == obj_name)
        specs[role] = make_grounding_spec(ref_scene, obj_name,
                                          sorted(obj["keypoints"].keys()),
                                          _SPEC_AXES[obj_name],
                                          reference_image_id=f"{task}_reference")
    return {"task": task, "scene": run_json, "ref_scene": ref_json,
            "specs": specs, "skill_text": load_skill_text(task)}


def load_skill_text(task: str) -> str:
    here = os.path.dirname(os.path.abspath(__file__))
    path = os.path.join(here, "data", "skills", f"{task}.skill")
    with open(path, "r", encoding="utf-8") as fh:
        return fh.read()


def write_task_bundle(task: str, out_dir: str, seed: int = 7):
    """Write scene.json, ref_scene.json, role specs, and the skill file."""
    bundle = build_task(task, seed=seed)
    os.makedirs(out_dir, exist_ok=True)
    paths = {}

    def dump(name, payload):
        path = os.path.join(out_dir, name)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        paths[name] = path

    dump("scene.json", bundle["scene"])
    dump("ref_scene.json", bundle["ref_scene"])
    for role, spec in bundle["specs"].items():
        dump(f"{role}.json", spec_to_json(spec))
    skill_path = os.path.join(out_dir, f"{task}.skill")
    with open(skill_path, "w", encoding="utf-8") as fh:
        fh.write(bundle["skill_text"])
    paths[f"{task}.skill"] = skill_path
    return paths
