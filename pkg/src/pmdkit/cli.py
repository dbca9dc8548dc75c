"""Command-line driver: ``simulate``, ``patterns export``, ``single-view``, ``multi-view``, ``serve``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .core import PMDError, ScreenGeometry
from .fileio import write_png
from .patterns import build_sequence, export_pattern, gen_fringe

log = logging.getLogger("pmdkit")


def _processing_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--hp-sigma", type=float, help="high-pass sigma in pixels")
    p.add_argument("--mod-threshold", type=float, help="minimum fringe modulation for a valid pixel")
    p.add_argument("--frequency", type=int, help="override the manifest fringe frequency")
    p.add_argument("--scale", choices=("none", "geometric"))
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--debug-intermediates", action="store_true", default=None)
    p.add_argument("--formats", help="comma separated subset of png16,pfm,preview")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pmdkit", description="Phase-measuring deflectometry toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="render a synthetic capture bundle")
    sim.add_argument("--scene", required=True, type=Path, help="scene description (JSON)")
    sim.add_argument("--out", required=True, type=Path)
    sim.add_argument("--seed", type=int)
    sim.add_argument("--frequency", type=int)

    pat = sub.add_parser("patterns", help="display pattern utilities")
    pat_sub = pat.add_subparsers(dest="pattern_command", required=True)
    exp = pat_sub.add_parser("export", help="write the 8-pattern sequence as images")
    exp.add_argument("--out", required=True, type=Path)
    exp.add_argument("--frequency", type=int, default=1)
    exp.add_argument("--width", type=int, default=2048)
    exp.add_argument("--height", type=int, default=1536)
    exp.add_argument("--gamma", type=float, default=None, help="display gamma to pre-compensate")
    exp.add_argument("--bits", type=int, choices=(8, 16), default=8)

    for name in ("single-view", "multi-view"):
        _processing_args(sub.add_parser(name, help=f"{name} reconstruction"))

    srv = sub.add_parser("serve", help="run the HTTP job service")
    srv.add_argument("--store", type=Path, default=Path("pmd-jobs"))
    srv.add_argument("--host", default="127.0.0.1")
    srv.add_argument("--port", type=int, default=8000)
    srv.add_argument("--workers", type=int, default=2)
    return parser


def overrides_from_args(args) -> dict:
    return {
        "hp_sigma": args.hp_sigma,
        "mod_threshold": args.mod_threshold,
        "scale": args.scale,
        "seed": args.seed,
        "jobs": args.jobs,
        "debug_intermediates": args.debug_intermediates,
        "formats": args.formats,
    }


def _process(args, mode: str) -> int:
    from .pipeline import process_manifest

    written = process_manifest(args.manifest, args.out, overrides_from_args(args), mode, args.frequency)
    for p in written:
        print(p)
    return 0


def _export_patterns(args) -> int:
    screen = ScreenGeometry((0, 0, 0), (1, 0, 0), (0, 1, 0), args.width, args.height)
    args.out.mkdir(parents=True, exist_ok=True)
    for spec in build_sequence(args.frequency):
        img = export_pattern(gen_fringe(spec, screen), args.gamma, args.bits)
        name = args.out / f"pattern_{spec.orientation}_{spec.frequency}_{spec.phase_index}.png"
        write_png(name, img / float((1 << args.bits) - 1), args.bits)
        print(name)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "simulate":
            from .pipeline import simulate_to_dir

            desc = json.loads(args.scene.read_text())
            print(simulate_to_dir(desc, args.out, args.seed, args.frequency))
            return 0
        if args.command == "patterns":
            return _export_patterns(args)
        if args.command in ("single-view", "multi-view"):
            return _process(args, args.command)
        if args.command == "serve":
            import uvicorn

            from .service import create_app

            uvicorn.run(create_app(args.store, args.workers), host=args.host, port=args.port)
            return 0
    except (PMDError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 1


if __name__ == "__main__":
    sys.exit(main())
