"""Readers and writers for the model, feature-map, patch, and match formats.

Model bundles use the COLMAP text layout (cameras.txt, images.txt,
points3D.txt). Feature maps (FMAP) and patch collections (FPAT) are little-
endian binary with fixed headers. Matches are plain text, one per line:
IMG_A KP_A IMG_B KP_B CONFIDENCE.

All formats round-trip losslessly: binary byte-identical, text value-
identical at 12 significant digits.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict, Iterable, List, Tuple

import numpy as np

from .errors import (
    BadMagic,
    DanglingReference,
    NonPositiveConfidence,
    ParseError,
    TruncatedPayload,
    UnknownCameraModel,
    VersionUnsupported,
)
from .features import DenseFeatureMap, FeaturePatch, FeaturePatchSet
from .matching import Match
from .scene import (
    PINHOLE,
    SIMPLE_PINHOLE,
    Camera,
    Image,
    Keypoint,
    Observation,
    Point3D,
    Pose,
    Reconstruction,
)

FMT = "%.12g"


def _fmt(x: float) -> str:
    return FMT % float(x)


# --- quaternions (COLMAP order: qw qx qy qz, world-to-camera) -----------------


def quat_to_rotation(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotation_to_quat(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    t = np.trace(R)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s,
             (R[1, 0] - R[0, 1]) / s]
        )
    else:
        i = int(np.argmax(np.diag(R)))
        if i == 0:
            s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
            q = np.array(
                [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s,
                 (R[0, 2] + R[2, 0]) / s]
            )
        elif i == 1:
            s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
            q = np.array(
                [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s,
                 (R[1, 2] + R[2, 1]) / s]
            )
        else:
            s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
            q = np.array(
                [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s,
                 (R[1, 2] + R[2, 1]) / s, 0.25 * s]
            )
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


# --- COLMAP-style model bundle -------------------------------------------------


def _parse_lines(path: Path):
    with open(path, "r") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.rstrip("\n")
            if line.strip().startswith("#"):
                continue
            yield lineno, line


def _parse_error(path, lineno, message) -> ParseError:
    return ParseError(f"{path}:{lineno}: {message}")


def read_model(directory) -> Reconstruction:
    """Read cameras.txt / images.txt / points3D.txt into a Reconstruction."""
    directory = Path(directory)
    recon = Reconstruction()

    cam_path = directory / "cameras.txt"
    for lineno, line in _parse_lines(cam_path):
        if not line.strip():
            continue
        parts = line.split()
        try:
            camera_id, model = int(parts[0]), parts[1]
            width, height = int(parts[2]), int(parts[3])
            params = [float(p) for p in parts[4:]]
        except (ValueError, IndexError):
            raise _parse_error(cam_path, lineno, "malformed camera line") from None
        if model == SIMPLE_PINHOLE:
            if len(params) != 3:
                raise _parse_error(cam_path, lineno, "SIMPLE_PINHOLE needs f cx cy")
            f, cx, cy = params
            cam = Camera(camera_id, SIMPLE_PINHOLE, width, height, f, f, cx, cy)
        elif model == PINHOLE:
            if len(params) != 4:
                raise _parse_error(cam_path, lineno, "PINHOLE needs fx fy cx cy")
            fx, fy, cx, cy = params
            cam = Camera(camera_id, PINHOLE, width, height, fx, fy, cx, cy)
        else:
            raise UnknownCameraModel(f"{cam_path}:{lineno}: camera model {model!r}")
        recon.add_camera(cam)

    img_path = directory / "images.txt"
    header = None
    point_ids_by_kp: Dict[Tuple[int, int], int] = {}
    for lineno, line in _parse_lines(img_path):
        if header is None:
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) < 10:
                raise _parse_error(img_path, lineno, "malformed image header line")
            try:
                image_id = int(parts[0])
                q = [float(v) for v in parts[1:5]]
                t = [float(v) for v in parts[5:8]]
                camera_id = int(parts[8])
            except ValueError:
                raise _parse_error(img_path, lineno, "malformed image header line") from None
            name = " ".join(parts[9:])
            header = (image_id, q, t, camera_id, name)
            continue
        image_id, q, t, camera_id, name = header
        header = None
        keypoints: List[Keypoint] = []
        parts = line.split()
        if len(parts) % 3 != 0:
            raise _parse_error(img_path, lineno, "keypoint line must hold X Y POINT3D_ID triples")
        for k in range(0, len(parts), 3):
            try:
                x, y = float(parts[k]), float(parts[k + 1])
                pid = int(parts[k + 2])
            except ValueError:
                raise _parse_error(img_path, lineno, "malformed keypoint triple") from None
            kp_id = k // 3
            keypoints.append(Keypoint.at(kp_id, image_id, (x, y)))
            if pid != -1:
                point_ids_by_kp[(image_id, kp_id)] = pid
        recon.add_image(
            Image(image_id, camera_id, Pose(quat_to_rotation(q), t), keypoints, name)
        )
    if header is not None:
        raise ParseError(f"{img_path}: image {header[0]} missing its keypoint line")

    pts_path = directory / "points3D.txt"
    for lineno, line in _parse_lines(pts_path):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) < 8 or (len(parts) - 8) % 2 != 0:
            raise _parse_error(pts_path, lineno, "malformed point line")
        try:
            pid = int(parts[0])
            xyz = [float(v) for v in parts[1:4]]
            rgb = tuple(int(v) for v in parts[4:7])
            error = float(parts[7])
            track = []
            for k in range(8, len(parts), 2):
                track.append(Observation(int(parts[k]), int(parts[k + 1])))
        except ValueError:
            raise _parse_error(pts_path, lineno, "malformed point line") from None
        try:
            recon.add_point(Point3D(pid, xyz, tuple(track), rgb, error))
        except ValueError as exc:
            raise _parse_error(pts_path, lineno, str(exc)) from None

    try:
        recon.validate()
    except ValueError as exc:
        raise DanglingReference(str(exc)) from None
    for (image_id, kp_id), pid in point_ids_by_kp.items():
        if pid not in recon.points:
            raise DanglingReference(
                f"image {image_id} keypoint {kp_id} references missing point {pid}"
            )
    return recon


def write_model(recon: Reconstruction, directory):
    """Write the reconstruction as a COLMAP-style text triplet."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    with open(directory / "cameras.txt", "w") as f:
        f.write("# CAMERA_ID MODEL WIDTH HEIGHT PARAMS[]\n")
        for cam_id in sorted(recon.cameras):
            c = recon.cameras[cam_id]
            if c.model == SIMPLE_PINHOLE:
                params = [c.fx, c.cx, c.cy]
            else:
                params = [c.fx, c.fy, c.cx, c.cy]
            f.write(
                f"{c.camera_id} {c.model} {c.width} {c.height} "
                + " ".join(_fmt(p) for p in params)
                + "\n"
            )

    point_of_kp: Dict[Tuple[int, int], int] = {}
    for pid in sorted(recon.points):
        for obs in recon.points[pid].track:
            point_of_kp[obs.key] = pid

    with open(directory / "images.txt", "w") as f:
        f.write("# IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME\n")
        f.write("# X Y POINT3D_ID per keypoint\n")
        for image_id in sorted(recon.images):
            img = recon.images[image_id]
            q = rotation_to_quat(img.pose.rotation)
            t = img.pose.translation
            f.write(
                f"{image_id} "
                + " ".join(_fmt(v) for v in q)
                + " "
                + " ".join(_fmt(v) for v in t)
                + f" {img.camera_id} {img.name or f'image{image_id}'}\n"
            )
            cells = []
            for kp in img.keypoints:
                pid = point_of_kp.get((image_id, kp.keypoint_id), -1)
                cells.append(f"{_fmt(kp.location[0])} {_fmt(kp.location[1])} {pid}")
            f.write(" ".join(cells) + "\n")

    with open(directory / "points3D.txt", "w") as f:
        f.write("# POINT3D_ID X Y Z R G B ERROR TRACK[] as (IMAGE_ID KEYPOINT_ID)\n")
        for pid in sorted(recon.points):
            p = recon.points[pid]
            track = " ".join(f"{o.image_id} {o.keypoint_id}" for o in p.track)
            f.write(
                f"{pid} "
                + " ".join(_fmt(v) for v in p.position)
                + f" {p.color[0]} {p.color[1]} {p.color[2]} {_fmt(p.error)}"
                + (f" {track}" if track else "")
                + "\n"
            )


# --- FMAP binary feature maps ----------------------------------------------------

_FMAP_MAGIC = b"FMAP"
_FPAT_MAGIC = b"FPAT"
_FMAP_HEADER = struct.Struct("<4sIQIIIB")
_FPAT_HEADER = struct.Struct("<4sIQ")
_FPAT_ENTRY = struct.Struct("<QQiiII")


def write_fmap(fmap: DenseFeatureMap, path):
    with open(path, "wb") as f:
        f.write(
            _FMAP_HEADER.pack(
                _FMAP_MAGIC, 1, fmap.image_id, fmap.width, fmap.height, fmap.channels, 0
            )
        )
        f.write(np.ascontiguousarray(fmap.data, dtype="<f4").tobytes())


def read_fmap(path) -> DenseFeatureMap:
    with open(path, "rb") as f:
        header = f.read(_FMAP_HEADER.size)
        if len(header) < _FMAP_HEADER.size:
            raise TruncatedPayload(f"{path}: header truncated")
        magic, version, image_id, width, height, channels, dtype = _FMAP_HEADER.unpack(header)
        if magic != _FMAP_MAGIC:
            raise BadMagic(f"{path}: expected FMAP, found {magic!r}")
        if version != 1:
            raise VersionUnsupported(f"{path}: FMAP version {version}")
        if dtype != 0:
            raise VersionUnsupported(f"{path}: unsupported dtype {dtype}")
        expected = width * height * channels * 4
        payload = f.read()
    if len(payload) < expected:
        raise TruncatedPayload(f"{path}: payload {len(payload)} < {expected} bytes")
    if len(payload) > expected:
        raise ParseError(f"{path}: {len(payload) - expected} trailing bytes")
    data = np.frombuffer(payload, dtype="<f4").reshape(height, width, channels)
    return DenseFeatureMap(int(image_id), data)


def write_fpat(patches: FeaturePatchSet, path):
    entries = sorted(patches.items())
    with open(path, "wb") as f:
        f.write(_FPAT_HEADER.pack(_FPAT_MAGIC, 1, len(entries)))
        for (image_id, kp_id), patch in entries:
            f.write(
                _FPAT_ENTRY.pack(
                    image_id, kp_id, patch.corner[0], patch.corner[1],
                    patch.size, patch.channels,
                )
            )
            f.write(np.ascontiguousarray(patch.data, dtype="<f4").tobytes())


def read_fpat(path) -> FeaturePatchSet:
    """Read a patch collection; anchors are not stored in the format and come
    back as None (supply keypoint locations from the model when adjusting)."""
    with open(path, "rb") as f:
        header = f.read(_FPAT_HEADER.size)
        if len(header) < _FPAT_HEADER.size:
            raise TruncatedPayload(f"{path}: header truncated")
        magic, version, count = _FPAT_HEADER.unpack(header)
        if magic != _FPAT_MAGIC:
            raise BadMagic(f"{path}: expected FPAT, found {magic!r}")
        if version != 1:
            raise VersionUnsupported(f"{path}: FPAT version {version}")
        out = None
        last_key = None
        for _ in range(count):
            entry = f.read(_FPAT_ENTRY.size)
            if len(entry) < _FPAT_ENTRY.size:
                raise TruncatedPayload(f"{path}: entry header truncated")
            image_id, kp_id, x0, y0, size, channels = _FPAT_ENTRY.unpack(entry)
            need = size * size * channels * 4
            payload = f.read(need)
            if len(payload) < need:
                raise TruncatedPayload(f"{path}: patch payload truncated")
            key = (int(image_id), int(kp_id))
            if last_key is not None and key <= last_key:
                raise ParseError(f"{path}: entries not sorted or duplicated at {key}")
            last_key = key
            data = np.frombuffer(payload, dtype="<f4").reshape(size, size, channels)
            if out is None:
                out = FeaturePatchSet(size=size)
            out.add(FeaturePatch(key[0], key[1], (x0, y0), data))
        trailing = f.read(1)
        if trailing:
            raise ParseError(f"{path}: trailing bytes after last entry")
    return out if out is not None else FeaturePatchSet()


# --- matches text ------------------------------------------------------------------


def read_matches(path) -> List[Match]:
    path = Path(path)
    out: List[Match] = []
    for lineno, line in _parse_lines(path):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 5:
            raise _parse_error(path, lineno, "expected IMG_A KP_A IMG_B KP_B CONFIDENCE")
        try:
            ia, ka, ib, kb = (int(p) for p in parts[:4])
            w = float(parts[4])
        except ValueError:
            raise _parse_error(path, lineno, "malformed match line") from None
        if w <= 0.0:
            raise NonPositiveConfidence(f"{path}:{lineno}: confidence {w:g} <= 0")
        if w > 1.0:
            raise _parse_error(path, lineno, f"confidence {w:g} > 1")
        out.append(Match(ia, ka, ib, kb, w))
    return out


def write_matches(matches: Iterable[Match], path):
    """Write matches deduplicated by max confidence, sorted by endpoints."""
    best: Dict[Tuple, float] = {}
    for m in matches:
        key = m.edge_key
        best[key] = max(best.get(key, 0.0), m.confidence)
    with open(path, "w") as f:
        f.write("# IMG_A KP_A IMG_B KP_B CONFIDENCE\n")
        for (a, b), w in sorted(best.items()):
            f.write(f"{a[0]} {a[1]} {b[0]} {b[1]} {_fmt(w)}\n")
