"""Command-line interface.

Commands (all non-interactive; every command writes its outputs plus a
manifest.json into --out):

  match      transfer annotated keypoints between two feature grids
  ground     ground a full spec against feature/depth files
  run        execute a skill file against a scene file in the simulator
  validate   grounding-accuracy statistics over randomized scene pairs
  gen        emit a demo task bundle (scenes, specs, skill)
  replay     re-execute a recorded manifest into a fresh output directory

Exit codes: 0 success, 1 usage error, 2 data/matching error,
3 execution failure. Environment variables are never consulted.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import __version__
from .errors import FileFormatError, TaskAxesError
from .evaluation import run_noise_sweep, run_validation
from .features import MatchConfig, match_keypoint, read_depth_mask, read_feature_grid, window_average, cosine_map
from .geometry import CameraIntrinsics
from .grounding import GroundingConfig, ground_spec, spec_from_json
from .scenes import TASKS, load_scene, write_task_bundle
from .simulator import RunConfig, SkillRunner
from .skill import parse_skill
from .controllers import Gains, Limits


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _dump_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _write_manifest(out_dir, command, flags, inputs):
    outputs = {}
    for name in sorted(os.listdir(out_dir)):
        if name == "manifest.json":
            continue
        path = os.path.join(out_dir, name)
        if os.path.isfile(path):
            outputs[name] = _sha256(path)
    manifest = {
        "artifact_version": __version__,
        "command": command,
        "flags": flags,
        "inputs": {os.path.abspath(p): _sha256(p) for p in sorted(set(inputs))},
        "outputs": outputs,
    }
    _dump_json(os.path.join(out_dir, "manifest.json"), manifest)


def _write_pgm(path, score, valid):
    """Similarity heat map as binary PGM: score -1..1 mapped to 1..255, invalid 0."""
    levels = np.zeros(score.shape, dtype=np.uint8)
    levels[valid] = np.clip((score[valid] + 1.0) * 127.0 + 1.0, 1, 255).astype(np.uint8)
    header = f"P5\n{score.shape[1]} {score.shape[0]}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header + levels.tobytes())


def _match_config(flags) -> MatchConfig:
    return MatchConfig(mode=flags["mode"], temperature=flags["temp"],
                       window_radius=flags["window"])


# ----------------------------------------------------------------------
# commands: each returns (exit_code, input_paths)


def cmd_match(flags, out_dir):
    ref = read_feature_grid(flags["ref"])
    target = read_feature_grid(flags["target"])
    depth = read_depth_mask(flags["depth"])
    keypoints = _load_json(flags["keypoints"])
    cfg = _match_config(flags)
    results = []
    for kp in keypoints:
        px = (int(kp["pixel"][0]), int(kp["pixel"][1]))
        m = match_keypoint(ref, px, target, depth, cfg)
        results.append({"object": kp.get("object", ""), "label": kp["label"],
                        "ref_pixel": list(px), "u": m.u, "v": m.v,
                        "pixel": list(m.pixel), "score": m.peak_score,
                        "mode": m.mode})
        if flags.get("dump_simmap"):
            desc = window_average(ref, px[0], px[1], cfg.window_radius)
            sim = cosine_map(desc, target, depth)
            name = f"simmap_{kp.get('object', 'obj')}_{kp['label']}.pgm"
            _write_pgm(os.path.join(out_dir, name), sim.score, sim.valid)
    _dump_json(os.path.join(out_dir, "matches.json"), results)
    return 0, [flags["ref"], flags["target"], flags["depth"], flags["keypoints"]]


def cmd_ground(flags, out_dir):
    spec = spec_from_json(_load_json(flags["spec"]))
    ref = read_feature_grid(flags["ref"])
    target = read_feature_grid(flags["target"])
    depth = read_depth_mask(flags["depth"])
    intr = CameraIntrinsics.from_json(_load_json(flags["intr"]))
    inputs = [flags["spec"], flags["ref"], flags["target"], flags["depth"],
              flags["intr"]]
    cloud = None
    if flags.get("cloud"):
        cloud = np.asarray(_load_json(flags["cloud"]), dtype=np.float64)
        inputs.append(flags["cloud"])
    cfg = GroundingConfig(match=_match_config(flags),
                          min_score=flags["min_score"])
    grounded = ground_spec(spec, ref, target, depth, cloud, intr, cfg)
    _dump_json(os.path.join(out_dir, "grounded.json"), grounded.to_json())
    return 0, inputs


def _run_config(flags, inputs):
    """RunConfig plus parse-time gain/limit presets from --config JSON."""
    cfg = RunConfig()
    gains = None
    limits = None
    if flags.get("config"):
        data = _load_json(flags["config"])
        inputs.append(flags["config"])
        if "gains" in data:
            g = data["gains"]
            gains = Gains(kp=float(g.get("kp", Gains.kp)),
                          kr=float(g.get("kr", Gains.kr)),
                          kf=float(g.get("kf", Gains.kf)))
        if "limits" in data:
            lim = data["limits"]
            limits = Limits(v_max=float(lim.get("v_max", Limits.v_max)),
                            w_max=float(lim.get("w_max", Limits.w_max)))
        grounding = data.get("grounding", {})
        cfg = RunConfig(
            dt=float(data.get("dt", cfg.dt)),
            grasp_tol=float(data.get("grasp_tol", cfg.grasp_tol)),
            limits=limits or Limits(),
            grounding=GroundingConfig(
                match=MatchConfig(
                    mode=grounding.get("mode", "hard"),
                    temperature=float(grounding.get("temperature", 0.01)),
                    window_radius=int(grounding.get("window_radius", 1))),
                min_score=float(grounding.get("min_score", 0.4)),
                normal_radius=float(grounding.get("normal_radius", 0.02)),
                min_neighbors=int(grounding.get("min_neighbors", 8))))
    return cfg, gains, limits


def cmd_run(flags, out_dir):
    skill_path = flags["skill"]
    inputs = [skill_path, flags["scene"]]
    cfg, gains, limits = _run_config(flags, inputs)
    with open(skill_path, "r", encoding="utf-8") as fh:
        skill = parse_skill(fh.read(), default_gains=gains, default_limits=limits)
    scene, ref_scene = load_scene(flags["scene"])
    scene_json = _load_json(flags["scene"])
    scene_dir = os.path.dirname(os.path.abspath(flags["scene"]))
    ref_name = scene_json.get("reference")
    if ref_name:
        inputs.append(os.path.join(scene_dir, ref_name))
    feature_files = None
    if "feature_files" in scene_json:
        # pre-extracted grids; the simulator then skips synthetic rendering
        ff = scene_json["feature_files"]
        paths = [os.path.join(scene_dir, ff[k]) for k in ("ref", "target",
                                                          "target_depth")]
        inputs.extend(paths)
        feature_files = (read_feature_grid(paths[0]), read_feature_grid(paths[1]),
                         read_depth_mask(paths[2]))
    if flags.get("seed") is not None:
        scene.features.seed = int(flags["seed"])
        if ref_scene is not None:
            ref_scene.features.seed = int(flags["seed"])
    specs = {}
    skill_dir = os.path.dirname(os.path.abspath(skill_path))
    for role, source in skill.uses:
        if source == "robot":
            continue
        spec_path = os.path.join(skill_dir, source)
        specs[role] = spec_from_json(_load_json(spec_path))
        inputs.append(spec_path)

    runner = SkillRunner(skill, scene, specs, ref_scene=ref_scene, config=cfg,
                         feature_files=feature_files)
    runner.ground_all()
    result = runner.run()
    log_name = flags.get("log") or "log.jsonl"
    result.log.write(os.path.join(out_dir, log_name))
    _dump_json(os.path.join(out_dir, "result.json"), result.summary())
    _write_trajectory_csv(os.path.join(out_dir, "trajectory.csv"), result.log)
    if not result.success:
        print(f"run failed: {json.dumps(result.summary(), sort_keys=True)}",
              file=sys.stderr)
        return 3, inputs
    return 0, inputs


def _write_trajectory_csv(path, log):
    cols = ("t", "x", "y", "z", "vx", "vy", "vz", "wx", "wy", "wz",
            "fx", "fy", "fz")
    lines = [",".join(cols)]
    for rec in log.records:
        row = ([rec["t"]] + rec["ee"]["origin"] + rec["twist"]["v"]
               + rec["twist"]["w"] + rec["contact_force"])
        lines.append(",".join(repr(x) if isinstance(x, float) else str(x)
                              for x in row))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def cmd_validate(flags, out_dir):
    if flags.get("noise_sweep"):
        sigmas = [float(s) for s in flags["noise_sweep"].split(",") if s.strip()]
        stats = {"sweep": run_noise_sweep(sigmas, flags["trials"],
                                          mode=flags["mode"],
                                          temperature=flags["temp"],
                                          seed=flags["seed"])}
    else:
        stats = run_validation(flags["trials"], noise_sigma=flags["noise"],
                               mode=flags["mode"], temperature=flags["temp"],
                               seed=flags["seed"])
    _dump_json(os.path.join(out_dir, "stats.json"), stats)
    return 0, []


def cmd_gen(flags, out_dir):
    write_task_bundle(flags["task"], out_dir, seed=flags["seed"])
    return 0, []


_COMMANDS = {"match": cmd_match, "ground": cmd_ground, "run": cmd_run,
             "validate": cmd_validate, "gen": cmd_gen}


def cmd_replay(flags, out_dir):
    manifest = _load_json(flags["manifest"])
    command = manifest.get("command")
    if command not in _COMMANDS:
        raise FileFormatError(f"manifest names unknown command {command!r}")
    for path, digest in manifest.get("inputs", {}).items():
        if not os.path.isfile(path):
            raise FileFormatError(f"manifest input missing: {path}")
        if _sha256(path) != digest:
            raise FileFormatError(f"manifest input changed since recording: {path}")
    code, inputs = _COMMANDS[command](manifest["flags"], out_dir)
    _write_manifest(out_dir, command, manifest["flags"], inputs)
    return code, [flags["manifest"]]


# ----------------------------------------------------------------------
# argument parsing


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _build_parser():
    parser = _Parser(prog="taskaxes", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_match_flags(p):
        p.add_argument("--mode", choices=("hard", "soft"), default="soft")
        p.add_argument("--temp", type=float, default=0.01,
                       help="soft-argmax temperature (default 0.01)")
        p.add_argument("--window", type=int, default=1,
                       help="reference window radius in pixels (default 1 = 3x3)")

    p = sub.add_parser("match", help="transfer keypoints between feature grids")
    p.add_argument("--ref", required=True, help="reference .fgrd")
    p.add_argument("--keypoints", required=True, help="reference keypoints JSON")
    p.add_argument("--target", required=True, help="target .fgrd")
    p.add_argument("--depth", required=True, help="target .dpth")
    add_match_flags(p)
    p.add_argument("--dump-simmap", action="store_true", dest="dump_simmap",
                   help="also write one PGM similarity map per keypoint")
    p.add_argument("--out", required=True)

    p = sub.add_parser("ground", help="ground a spec against feature files")
    p.add_argument("--spec", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--depth", required=True)
    p.add_argument("--intr", required=True, help="camera intrinsics JSON")
    p.add_argument("--cloud", help="optional [[x,y,z],...] JSON; defaults to the "
                                   "cloud deprojected from the depth file")
    add_match_flags(p)
    p.add_argument("--min-score", type=float, default=0.4, dest="min_score")
    p.add_argument("--out", required=True)

    p = sub.add_parser("run", help="execute a skill in the simulator")
    p.add_argument("--skill", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--seed", type=int, default=None,
                   help="override the scene's feature seed")
    p.add_argument("--log", default=None, help="log file name inside --out")
    p.add_argument("--config", default=None, help="run configuration JSON")
    p.add_argument("--out", required=True)

    p = sub.add_parser("validate", help="grounding accuracy statistics")
    p.add_argument("--trials", type=int, required=True)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--mode", choices=("hard", "soft"), default="soft")
    p.add_argument("--temp", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise-sweep", dest="noise_sweep", default=None,
                   help="comma-separated sigma list; overrides --noise")
    p.add_argument("--out", required=True)

    p = sub.add_parser("gen", help="write a demo task bundle")
    p.add_argument("--task", choices=TASKS, required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)

    p = sub.add_parser("replay", help="re-execute a recorded manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    except SystemExit:
        # argparse exits for --help; treat that as success
        return 0
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "out")}
    out_dir = args.out
    os.makedirs(out_dir, exist_ok=True)
    handler = cmd_replay if args.command == "replay" else _COMMANDS[args.command]
    try:
        code, inputs = handler(flags, out_dir)
    except TaskAxesError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (json.JSONDecodeError, KeyError, ValueError) as err:
        print(f"error: malformed input ({err})", file=sys.stderr)
        return 2
    if args.command != "replay":
        _write_manifest(out_dir, args.command, flags, inputs)
    return code


if __name__ == "__main__":
    sys.exit(main())
