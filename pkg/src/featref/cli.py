"""Command-line front end.

Subcommands: synth, extract, patches, ka, ba, geo-ba, eval. Exit codes:
0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .bundle_adjustment import BAOptions, featuremetric_ba, geometric_ba, select_track_references
from .errors import (
    DegenerateGeometry,
    FeatrefError,
    NumericalFailure,
    ParseError,
    SingularPointBlock,
)
from .evaluate import evaluate
from .features import extract_gradient_features, extract_ncc_intensity, extract_patches, FeaturePatchSet
from .io_formats import (
    read_fmap,
    read_fpat,
    read_matches,
    read_model,
    write_fmap,
    write_fpat,
    write_matches,
    write_model,
)
from .keypoint_adjustment import KAOptions, adjust_all
from .matching import build_graph, extract_tracks
from .optim import LMOptions, RobustLoss
from .scene import Point3D, triangulate_dlt
from .synth import load_synth_config, synth_generate


class _Parser(argparse.ArgumentParser):
    """argparse variant that exits with code 1 on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _load_image(path: Path) -> np.ndarray:
    from PIL import Image as PILImage

    with PILImage.open(path) as img:
        return np.asarray(img.convert("L"), dtype=np.float64) / 255.0


def _image_id_for(path: Path, index: int) -> int:
    stem = path.stem
    digits = "".join(ch for ch in stem if ch.isdigit())
    return int(digits) if digits else index


def _load_fmaps(directory: Path) -> Dict[int, object]:
    fmaps = {}
    for path in sorted(directory.glob("*.fmap")):
        fmap = read_fmap(path)
        fmaps[fmap.image_id] = fmap
    if not fmaps:
        raise ParseError(f"no .fmap files in {directory}")
    return fmaps


def _retriangulate(recon) -> int:
    """Re-triangulate every tracked point from current keypoints, fixed poses."""
    failures = 0
    for pid in sorted(recon.points):
        pt = recon.points[pid]
        if len(pt.track) < 2:
            continue
        obs = [
            (
                recon.keypoint(o.image_id, o.keypoint_id).location,
                recon.images[o.image_id].pose,
                recon.camera_of(o.image_id),
            )
            for o in pt.track
        ]
        try:
            recon.set_point_position(pid, triangulate_dlt(obs))
        except DegenerateGeometry:
            failures += 1
    return failures


def _cmd_synth(args) -> int:
    config = load_synth_config(args.config)
    result = synth_generate(config)
    out = Path(args.out)
    (out / "fmaps").mkdir(parents=True, exist_ok=True)
    write_model(result.truth, out / "truth")
    write_model(result.noisy, out / "noisy")
    for image_id in sorted(result.fmaps):
        write_fmap(result.fmaps[image_id], out / "fmaps" / f"view{image_id:03d}.fmap")
    write_matches(result.matches, out / "matches.txt")
    write_fpat(result.patches, out / "patches.fpat")
    print(
        f"synth: {config.n_cameras} cameras, {len(result.truth.points)} points, "
        f"{len(result.matches)} matches ({result.n_outliers} outliers) -> {out}"
    )
    return 0


def _cmd_extract(args) -> int:
    images_dir = Path(args.images)
    paths = sorted(
        p for p in images_dir.iterdir() if p.suffix.lower() in (".png", ".pgm")
    )
    if not paths:
        raise ParseError(f"no .png/.pgm images in {images_dir}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for index, path in enumerate(paths):
        image = _load_image(path)
        image_id = _image_id_for(path, index)
        if args.method == "gradient":
            fmap = extract_gradient_features(image, image_id)
        else:
            fmap = extract_ncc_intensity(image, window=args.window, image_id=image_id)
        write_fmap(fmap, out / f"{path.stem}.fmap")
    print(f"extract: {len(paths)} feature maps -> {out}")
    return 0


def _cmd_patches(args) -> int:
    recon = read_model(args.model)
    fmaps = _load_fmaps(Path(args.fmaps))
    patches = FeaturePatchSet(size=args.size)
    for image_id in sorted(recon.images):
        if image_id not in fmaps:
            raise ParseError(f"no feature map for image {image_id}")
        extract_patches(
            fmaps[image_id], recon.images[image_id].keypoints, args.size, into=patches
        )
    write_fpat(patches, args.out)
    print(f"patches: {len(patches)} patches of size {args.size} -> {args.out}")
    return 0


def _cmd_ka(args) -> int:
    recon = read_model(args.model)
    matches = read_matches(args.matches)
    patches = read_fpat(args.patches)
    tracks = extract_tracks(build_graph(matches))
    locations = {
        (img.image_id, kp.keypoint_id): kp.location
        for img in recon.images.values()
        for kp in img.keypoints
    }
    opts = KAOptions(
        max_drift=args.max_drift,
        loss=RobustLoss.cauchy(args.loss_scale),
        lm=LMOptions(max_iterations=args.max_iters, parameter_tolerance=1e-4),
    )
    result = adjust_all(tracks, patches, opts, locations=locations)
    for (image_id, kp_id), xy in result.locations.items():
        recon.set_keypoint_location(image_id, kp_id, xy)
    # keypoint adjustment precedes geometry, so tracked points are rebuilt
    # from the refined locations before any downstream bundle adjustment
    failures = _retriangulate(recon)
    write_model(recon, args.out)
    moved = len(result.locations)
    print(
        f"ka: {len(tracks)} tracks, {moved} keypoints refined, "
        f"{len(result.failures)} tracks skipped, {failures} retriangulation failures "
        f"-> {args.out}"
    )
    return 0


def _ba_options(args, mode: Optional[str] = None) -> BAOptions:
    return BAOptions(
        mode=mode if mode is not None else args.mode,
        loss=RobustLoss.cauchy(args.loss_scale),
        lm=LMOptions(max_iterations=args.max_iters, parameter_tolerance=1e-4),
        pose_handling=args.poses,
    )


def _write_report(report, path: Optional[str]):
    text = "\n".join(report.lines()) + "\n"
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def _cmd_ba(args) -> int:
    recon = read_model(args.model)
    patches = read_fpat(args.patches)
    opts = _ba_options(args)
    refs = select_track_references(recon, patches, opts.loss)
    refined, report = featuremetric_ba(recon, patches, refs, opts)
    write_model(refined, args.out)
    _write_report(report, args.report)
    print(
        f"ba({opts.mode}): cost {report.initial_cost:.6g} -> {report.final_cost:.6g}, "
        f"{report.termination} -> {args.out}"
    )
    return 0


def _cmd_geo_ba(args) -> int:
    recon = read_model(args.model)
    opts = _ba_options(args, mode="exact")
    refined, report = geometric_ba(recon, opts)
    write_model(refined, args.out)
    _write_report(report, args.report)
    print(
        f"geo-ba: cost {report.initial_cost:.6g} -> {report.final_cost:.6g}, "
        f"{report.termination} -> {args.out}"
    )
    return 0


def _cmd_eval(args) -> int:
    refined = read_model(args.refined)
    truth = read_model(args.truth)
    report = evaluate(refined, truth)
    payload = report.to_json()
    if args.report:
        Path(args.report).write_text(payload + "\n")
    print(payload)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="featref", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic scene")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_synth)

    p = sub.add_parser("extract", help="dense features from grayscale images")
    p.add_argument("--method", choices=("gradient", "ncc"), required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=int, default=5, help="ncc window size (odd)")
    p.set_defaults(fn=_cmd_extract)

    p = sub.add_parser("patches", help="cut feature patches around keypoints")
    p.add_argument("--model", required=True)
    p.add_argument("--fmaps", required=True)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_patches)

    p = sub.add_parser("ka", help="featuremetric keypoint adjustment")
    p.add_argument("--model", required=True)
    p.add_argument("--matches", required=True)
    p.add_argument("--patches", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-drift", type=float, default=8.0)
    p.add_argument("--loss-scale", type=float, default=0.25)
    p.add_argument("--max-iters", type=int, default=100)
    p.set_defaults(fn=_cmd_ka)

    p = sub.add_parser("ba", help="featuremetric bundle adjustment")
    p.add_argument("--model", required=True)
    p.add_argument("--patches", required=True)
    p.add_argument("--mode", choices=("exact", "costmap"), default="exact")
    p.add_argument("--poses", choices=("fixed", "free"), default="fixed")
    p.add_argument("--out", required=True)
    p.add_argument("--max-iters", type=int, default=30)
    p.add_argument("--loss-scale", type=float, default=0.25)
    p.add_argument("--report", default=None)
    p.set_defaults(fn=_cmd_ba)

    p = sub.add_parser("geo-ba", help="geometric bundle adjustment baseline")
    p.add_argument("--model", required=True)
    p.add_argument("--poses", choices=("fixed", "free"), default="fixed")
    p.add_argument("--out", required=True)
    p.add_argument("--max-iters", type=int, default=30)
    p.add_argument("--loss-scale", type=float, default=0.25)
    p.add_argument("--report", default=None)
    p.set_defaults(fn=_cmd_geo_ba)

    p = sub.add_parser("eval", help="compare a refined model against ground truth")
    p.add_argument("--refined", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--report", default=None)
    p.set_defaults(fn=_cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except (NumericalFailure, SingularPointBlock) as exc:
        print(f"featref: numerical failure: {exc}", file=sys.stderr)
        return 3
    except (FeatrefError, OSError) as exc:
        print(f"featref: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
