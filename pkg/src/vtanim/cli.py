"""``vtanim`` command line: compile, dump, evaluate, inspect, synth.

Exit codes: 0 success, 2 gate failure, 3 input or usage error, 4 internal
error. Logs go to standard error; machine-readable output goes to files.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from vtanim import __version__
from vtanim.asset import AssetError, read_asset
from vtanim.compiler import ConfigError, EvalParams, compile, evaluate_asset, load_config
from vtanim.ema import EmaFormatError, write_ag500_pos, write_ema_csv
from vtanim.evaluation import EvalError, EvalReport, dumps_json, generate_report, write_files_atomically
from vtanim.ik import IkError, dump_targets
from vtanim.mesh import MeshError, load_obj
from vtanim.rig import RigError
from vtanim.synth import SCENARIOS, SynthError, generate, write_fixture

EXIT_OK = 0
EXIT_GATE = 2
EXIT_INPUT = 3
EXIT_INTERNAL = 4

log = logging.getLogger("vtanim")

_INPUT_ERRORS = (
    AssetError, ConfigError, EmaFormatError, EvalError, IkError, MeshError, RigError, SynthError, OSError,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Usage errors become exceptions so they map to exit code 3."""

    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(f"{self.prog}: {message}")


def _positive(value: str) -> float:
    x = float(value)
    if not x > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {value}")
    return x


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vtanim", description="Articulatory model compiler and evaluation harness.")
    p.add_argument("--version", action="version", version=f"vtanim {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log phase timings and details")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("compile", help="run the compiler lifecycle on a config-v1 file")
    c.add_argument("config", help="config-v1 JSON file")
    c.add_argument("--out", help="asset manifest path (buffer is written next to it)")
    c.add_argument("--report-dir", help="directory for the lifecycle and metric reports")

    d = sub.add_parser("dump", help="write the solved IK targets as EMA data")
    d.add_argument("asset", help="asset manifest path")
    d.add_argument("--format", required=True, choices=("csv", "pos"), help="canonical CSV or AG500 .pos")
    d.add_argument("--out", required=True, help="output file")

    e = sub.add_parser("evaluate", help="evaluate an asset and write a report")
    e.add_argument("asset", help="asset manifest path")
    e.add_argument("--palate", help="oriented palate mesh (OBJ) for contact/penetration")
    e.add_argument("--reference-mesh", help="reference tongue mesh (OBJ) for pose similarity")
    g = e.add_mutually_exclusive_group()
    g.add_argument("--frame", type=int, help="frame index compared with the reference mesh")
    g.add_argument("--time", type=float, help="time in seconds compared with the reference mesh")
    e.add_argument("--report-dir", help="directory for the metric report")
    e.add_argument("--distance-mm", type=_positive, help="target-to-surface gate threshold")
    e.add_argument("--penetration-mm", type=_positive, help="penetration gate threshold")
    e.add_argument("--contact-eps-mm", type=_positive, help="contact distance on the front side")
    e.add_argument("--similarity-mm", type=_positive, help="pose similarity gate (symmetric mean)")
    e.add_argument("--require-contact", action="store_true", help="fail unless the tongue touches the palate")
    e.add_argument("--samples-per-triangle", type=int, help="surface samples per triangle for similarity")
    e.add_argument("--seed", type=int, help="seed for surface sampling")

    i = sub.add_parser("inspect", help="summarize an asset")
    i.add_argument("asset", help="asset manifest path")
    i.add_argument("--out", help="also write the summary as JSON to this file")

    s = sub.add_parser("synth", help="generate a synthetic fixture")
    s.add_argument("scenario", choices=SCENARIOS, help="fixture to generate")
    s.add_argument("--out-dir", required=True, help="output directory")
    s.add_argument("--frames", type=int, help="frame count (scenario default if omitted)")
    s.add_argument("--seed", type=int, default=7, help="motion seed (fk-roundtrip)")
    s.add_argument("--depth-mm", type=_positive, default=0.3, help="penetration depth (penetrate)")
    s.add_argument("--peak-frame", type=int, default=10, help="penetrating frame (penetrate)")
    return p


def cmd_compile(args) -> int:
    cfg = load_config(args.config)
    _, report = compile(cfg, args.out, args.report_dir)
    for line in report.summary_lines():
        print(line, file=sys.stderr)
    return report.exit_code


def cmd_dump(args) -> int:
    asset = read_asset(args.asset)
    traj = dump_targets(asset.armature, asset.clip, asset.topology)
    data = write_ema_csv(traj) if args.format == "csv" else write_ag500_pos(traj)
    out = Path(args.out)
    write_files_atomically(out.parent, {out.name: data})
    log.info("wrote %d frames x %d coils to %s", traj.n_frames, traj.n_coils, out)
    return EXIT_OK


def _eval_params(args, stored: dict) -> EvalParams:
    base = {k: stored[k] for k in EvalParams.__dataclass_fields__ if k in stored}
    for flag, key in (
        ("distance_mm", "distance_mm"),
        ("penetration_mm", "penetration_mm"),
        ("contact_eps_mm", "contact_eps_mm"),
        ("similarity_mm", "similarity_mm"),
        ("samples_per_triangle", "samples_per_triangle"),
        ("seed", "seed"),
    ):
        if getattr(args, flag) is not None:
            base[key] = getattr(args, flag)
    if args.require_contact:
        base["require_contact"] = True
    return EvalParams(**base)


def cmd_evaluate(args) -> int:
    asset = read_asset(args.asset)
    params = _eval_params(args, dict(asset.parameters.get("evaluation", {})))
    palate = load_obj(args.palate) if args.palate else None
    reference = load_obj(args.reference_mesh) if args.reference_mesh else None
    frame = None
    if reference is not None:
        if args.frame is None and args.time is None:
            raise UsageError("--reference-mesh needs --frame or --time")
        frame = args.frame if args.frame is not None else int(round(args.time * asset.clip.frame_rate_hz))
        if not 0 <= frame < asset.clip.n_frames:
            raise UsageError(f"frame {frame} outside 0..{asset.clip.n_frames - 1}")
    ev = evaluate_asset(asset, params, palate, reference, frame)
    prov = dict(asset.provenance)
    if args.report_dir:
        report = generate_report(ev.series, ev.gates, args.report_dir, scalars=ev.scalars, provenance=prov,
                                 seed=params.seed)
    else:
        report = EvalReport(ev.series, ev.gates, ev.scalars, prov, params.seed)
    for gate in report.gates:
        state = "pass" if gate.passed else "FAIL"
        print(f"{gate.name:<16} {state}  measured={gate.measured:.6g} threshold={gate.threshold:g}", file=sys.stderr)
    return EXIT_OK if report.passed else EXIT_GATE


def asset_summary(asset) -> dict:
    clip = asset.clip
    return {
        "meshes": {
            k: {"vertices": m.n_vertices, "triangles": m.n_triangles, "skinned": k in asset.weights}
            for k, m in asset.meshes.items()
        },
        "bones": [
            {"id": b.id, "parent": b.parent, "length_mm": b.length} for b in asset.armature.bones
        ],
        "clip": {
            "frames": clip.n_frames,
            "frame_rate_hz": clip.frame_rate_hz,
            "converged_fraction": float(np.mean(clip.converged)),
            "max_residual_mm": float(np.max(clip.residuals_mm)),
            "mean_iterations": float(np.mean(clip.iterations)),
            "held_frames": int(np.count_nonzero(clip.held)),
        },
        "coils": [
            {"id": c.coil_id, "articulator": c.articulator.value, "mesh": c.mesh,
             "bind_position": c.bind_position.tolist()}
            for c in asset.coils
        ],
        "provenance": dict(asset.provenance),
    }


def cmd_inspect(args) -> int:
    asset = read_asset(args.asset)
    info = asset_summary(asset)
    for name, m in info["meshes"].items():
        kind = "skinned" if m["skinned"] else "static"
        print(f"mesh   {name:<10} {m['vertices']:>6} vertices {m['triangles']:>6} triangles  {kind}")
    for b in info["bones"]:
        print(f"bone   {b['id']:<10} parent={b['parent']} length={b['length_mm']:.4g} mm")
    for c in info["coils"]:
        print(f"coil   {c['id']:<10} {c['articulator']:<9} mesh={c['mesh']}")
    cl = info["clip"]
    print(
        f"clip   {cl['frames']} frames @ {cl['frame_rate_hz']:g} Hz, converged {cl['converged_fraction']:.1%}, "
        f"max residual {cl['max_residual_mm']:.3g} mm, held {cl['held_frames']}"
    )
    if args.out:
        out = Path(args.out)
        write_files_atomically(out.parent, {out.name: dumps_json(info)})
    return EXIT_OK


def cmd_synth(args) -> int:
    opts = {}
    if args.scenario == "penetrate":
        opts = {"depth_mm": args.depth_mm, "peak_frame": args.peak_frame}
    if args.frames is not None and args.frames < 1:
        raise UsageError("--frames must be >= 1")
    fixture = generate(args.scenario, args.frames, args.seed, **opts)
    for p in write_fixture(fixture, args.out_dir):
        log.info("wrote %s", p)
    return EXIT_OK


COMMANDS = {
    "compile": cmd_compile,
    "dump": cmd_dump,
    "evaluate": cmd_evaluate,
    "inspect": cmd_inspect,
    "synth": cmd_synth,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INPUT
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"vtanim {args.command}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except _INPUT_ERRORS as exc:
        print(f"vtanim {args.command}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception:  # noqa: BLE001
        log.exception("internal error")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
