"""7-Scenes style readers/writers and a synthetic posed RGB-D scene generator.

On-disk layout (real and synthetic scenes alike)::

    <root>/manifest.txt
    <root>/seq-01/frame-000000.pose.txt     4x4 row-major camera-to-world
    <root>/seq-01/frame-000000.depth.png    uint16 millimetres, 0/65535 invalid
    <root>/seq-01/frame-000000.feature.npy  optional encoder input
    <root>/seq-01/frame-000000.color.png    optional, used when no feature file

The manifest is a keyed plain-text file, one ``key value...`` entry per line::

    scene synthetic
    intrinsics 40 40 32 24 64 48
    depth_scale 0.001
    train seq-01
    test seq-02
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .frustum import CameraIntrinsics, DepthFrame
from .mining import Frame
from .pose_core import Pose, quat_from_axis_angle, quat_multiply, rotation_matrix_to_quat

INVALID_DEPTH = 65535


class ParseError(ValueError):
    pass


class NonOrthonormalRotation(ValueError):
    pass


class UnsupportedFormat(ValueError):
    pass


# -- pose files ----------------------------------------------------------------


def load_pose_file(path) -> Pose:
    try:
        vals = [float(v) for v in Path(path).read_text().split()]
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if len(vals) != 16:
        raise ParseError(f"{path}: expected 16 floats, got {len(vals)}")
    return pose_from_matrix(np.array(vals).reshape(4, 4))


def pose_from_matrix(T) -> Pose:
    R = np.asarray(T, dtype=np.float64)[:3, :3]
    if not np.all(np.isfinite(T)):
        raise ParseError("non-finite pose matrix")
    if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-3 or np.linalg.det(R) <= 0:
        raise NonOrthonormalRotation("rotation block is not orthonormal within 1e-3")
    U, _, Vt = np.linalg.svd(R)
    return Pose(np.asarray(T)[:3, 3], rotation_matrix_to_quat(U @ Vt))


def pose_to_matrix(pose: Pose):
    T = np.eye(4)
    T[:3, :3] = pose.R
    T[:3, 3] = pose.t
    return T


def write_pose_file(path, pose: Pose):
    T = pose_to_matrix(pose)
    Path(path).write_text("\n".join(" ".join(f"{v:.17g}" for v in row) for row in T) + "\n")


# -- depth PNGs ----------------------------------------------------------------


def load_depth_png(path, intrinsics: CameraIntrinsics, scale=0.001) -> DepthFrame:
    with Image.open(path) as img:
        if img.mode not in ("I;16", "I;16B", "I;16L", "I"):
            raise UnsupportedFormat(f"{path}: expected 16-bit single channel, got mode {img.mode}")
        raw = np.array(img).astype(np.int64)
    if raw.ndim != 2 or raw.min(initial=0) < 0 or raw.max(initial=0) > 65535:
        raise UnsupportedFormat(f"{path}: values outside the 16-bit range")
    valid = (raw != 0) & (raw != INVALID_DEPTH)
    return DepthFrame(intrinsics, np.where(valid, raw * scale, 0.0), valid)


def write_depth_png(path, frame: DepthFrame, scale=0.001):
    raw = np.rint(frame.depth / scale)
    if np.any(raw[frame.valid] >= INVALID_DEPTH):
        raise ValueError("depth exceeds the 16-bit range at this scale")
    raw = np.where(frame.valid, raw, INVALID_DEPTH).astype(np.uint16)
    Image.fromarray(raw).save(path, format="PNG")


# -- manifests and scenes ------------------------------------------------------


@dataclass
class SceneManifest:
    scene: str
    intrinsics: CameraIntrinsics
    depth_scale: float = 0.001
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def to_text(self):
        K = self.intrinsics
        lines = [
            f"scene {self.scene}",
            f"intrinsics {K.fx!r} {K.fy!r} {K.cx!r} {K.cy!r} {K.width} {K.height}",
            f"depth_scale {self.depth_scale!r}",
        ]
        lines += [f"train {s}" for s in self.train]
        lines += [f"test {s}" for s in self.test]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        fields = {"train": [], "test": []}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, *rest = line.split()
            if key in ("train", "test"):
                fields[key].extend(rest)
            elif key == "intrinsics":
                if len(rest) != 6:
                    raise ParseError(f"manifest line {lineno}: intrinsics needs 6 values")
                fx, fy, cx, cy = (float(v) for v in rest[:4])
                fields[key] = CameraIntrinsics(fx, fy, cx, cy, int(rest[4]), int(rest[5]))
            elif key == "depth_scale":
                fields[key] = float(rest[0])
            elif key == "scene":
                fields[key] = rest[0]
            else:
                raise ParseError(f"manifest line {lineno}: unknown key {key!r}")
        if "intrinsics" not in fields:
            raise ParseError("manifest lacks intrinsics")
        return cls(**{"scene": "scene", **fields})


@dataclass
class Scene:
    manifest: SceneManifest
    frames: dict  # id -> Frame
    features: dict  # id -> encoder input (float64 vector)
    split: dict  # id -> "train" | "test"

    def ids(self, split):
        return sorted(i for i, s in self.split.items() if s == split)

    def frame_list(self, split):
        return [self.frames[i] for i in self.ids(split)]


def _grayscale_feature(path, side=8):
    with Image.open(path) as img:
        g = img.convert("L").resize((side, side), Image.BILINEAR)
    return np.asarray(g, dtype=np.float64).ravel() / 255.0


def load_scene(root) -> Scene:
    root = Path(root)
    manifest = SceneManifest.from_text((root / "manifest.txt").read_text())
    K, scale = manifest.intrinsics, manifest.depth_scale

    def depth_loader(path):
        return load_depth_png(path, K, scale)

    frames, features, split = {}, {}, {}
    for tag, seqs in (("train", manifest.train), ("test", manifest.test)):
        for seq in seqs:
            seq_dir = root / seq
            if not seq_dir.is_dir():
                raise FileNotFoundError(seq_dir)
            for pose_path in sorted(seq_dir.glob("frame-*.pose.txt")):
                stem = pose_path.name[: -len(".pose.txt")]
                fid = f"{seq}/{stem}"
                if fid in frames:
                    raise ParseError(f"duplicate frame id {fid}")
                depth_path = seq_dir / f"{stem}.depth.png"
                if not depth_path.exists():
                    raise FileNotFoundError(depth_path)
                frames[fid] = Frame(fid, load_pose_file(pose_path), depth_path, manifest.scene, depth_loader)
                feat_path = seq_dir / f"{stem}.feature.npy"
                color_path = seq_dir / f"{stem}.color.png"
                if feat_path.exists():
                    features[fid] = np.load(feat_path).astype(np.float64)
                elif color_path.exists():
                    features[fid] = _grayscale_feature(color_path)
                split[fid] = tag
    return Scene(manifest, frames, features, split)


def write_scene(root, scene: Scene):
    """Write a scene (with in-memory depth frames) in the on-disk layout."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "manifest.txt").write_text(scene.manifest.to_text())
    for fid in sorted(scene.frames):
        frame = scene.frames[fid]
        seq, stem = fid.split("/")
        (root / seq).mkdir(exist_ok=True)
        write_pose_file(root / seq / f"{stem}.pose.txt", frame.pose)
        write_depth_png(root / seq / f"{stem}.depth.png", frame.depth(), scene.manifest.depth_scale)
        if fid in scene.features:
            np.save(root / seq / f"{stem}.feature.npy", scene.features[fid].astype(np.float64))


# -- synthetic scenes ----------------------------------------------------------


@dataclass
class SyntheticSceneConfig:
    """Cameras inside a box, looking along world +z at the plane z = plane_z.

    ``layout="random"`` samples positions and orientations independently;
    ``layout="orbit"`` moves along a circle for several laps while the roll
    advances at a different rate, so revisited places are seen rolled.
    """

    seed: int = 0
    n_database: int = 500
    n_query: int = 100
    extent: tuple = (4.0, 4.0, 1.0)
    plane_z: float = 3.0
    intrinsics: CameraIntrinsics = field(default_factory=lambda: CameraIntrinsics(40.0, 40.0, 32.0, 24.0, 64, 48))
    tilt_deg: float = 10.0
    roll_deg: float = 180.0
    depth_noise: float = 0.0
    feature_dim: int = 64
    feature_freq: float = 1.0
    feature_noise: float = 0.01
    layout: str = "random"
    orbit_radius: float = 1.2
    orbit_laps: int = 3
    orbit_roll_turns: float = 5.0
    name: str = "synthetic"

    def __post_init__(self):
        if min(self.extent) <= 0:
            raise ValueError("extents must be positive")
        if self.plane_z <= 0 or self.plane_z <= self.extent[2]:
            raise ValueError("plane must lie beyond the camera box")
        if self.layout not in ("random", "orbit"):
            raise ValueError(f"unknown layout {self.layout!r}")


def camera_orientation(yaw, pitch, roll):
    """Camera-to-world rotation: roll about the optical axis, then pitch, then yaw."""
    q = quat_multiply(quat_from_axis_angle([0, 1, 0], yaw), quat_from_axis_angle([1, 0, 0], pitch))
    return quat_multiply(q, quat_from_axis_angle([0, 0, 1], roll))


def render_plane_depth(pose: Pose, K: CameraIntrinsics, plane_z, noise=0.0, rng=None) -> DepthFrame:
    """z-depth of the plane world_z = plane_z at every pixel (invalid where not hit)."""
    vs, us = np.mgrid[0:K.height, 0:K.width].astype(np.float64)
    rays = np.stack([(us - K.cx) / K.fx, (vs - K.cy) / K.fy, np.ones_like(us)], axis=-1)
    dz = rays @ pose.R[2]
    with np.errstate(divide="ignore"):
        depth = (plane_z - pose.t[2]) / dz
    valid = np.isfinite(depth) & (depth > 0) & (dz > 1e-9)
    if noise > 0:
        depth = depth * (1.0 + noise * rng.standard_normal(depth.shape))
        valid &= depth > 0
    return DepthFrame(K, np.where(valid, depth, 0.0), valid)


def pose_feature_basis(pose: Pose, extent):
    """Continuous pose descriptor: scaled translation plus rotation-matrix entries."""
    return np.concatenate([pose.t / (0.5 * np.asarray(extent)), pose.R.ravel()])


def _sample_poses(cfg: SyntheticSceneConfig, n, rng, offset=0):
    ex, ey, ez = cfg.extent
    tilt, roll = math.radians(cfg.tilt_deg), math.radians(cfg.roll_deg)
    poses = []
    for i in range(n):
        if cfg.layout == "random":
            t = rng.uniform([-ex / 2, -ey / 2, 0.0], [ex / 2, ey / 2, ez])
            r = rng.uniform(-roll, roll)
        else:
            s = (i + offset + rng.uniform(0, 1)) / n
            phi = 2 * math.pi * cfg.orbit_laps * s
            t = np.array([cfg.orbit_radius * math.cos(phi), cfg.orbit_radius * math.sin(phi),
                          ez / 2 + 0.25 * ez * math.sin(3 * phi)])
            t = t + rng.normal(0, 0.05, 3)
            r = (2 * math.pi * cfg.orbit_roll_turns * s + math.pi) % (2 * math.pi) - math.pi
        yaw, pitch = rng.uniform(-tilt, tilt, 2)
        poses.append(Pose(t, camera_orientation(yaw, pitch, r)))
    return poses


def generate_synthetic_scene(cfg: SyntheticSceneConfig) -> Scene:
    """Deterministic synthetic scene: database frames in seq-01, queries in seq-02."""
    rng = np.random.default_rng(cfg.seed)
    K = cfg.intrinsics
    # fixed random-feature map from the 12-d pose descriptor to encoder inputs
    proj = rng.normal(0.0, cfg.feature_freq, (cfg.feature_dim, 12))
    phase = rng.uniform(0.0, 2 * math.pi, cfg.feature_dim)
    db_poses = _sample_poses(cfg, cfg.n_database, rng)
    q_poses = _sample_poses(cfg, cfg.n_query, rng, offset=0.5)
    frames, features, split = {}, {}, {}
    for seq, tag, poses in (("seq-01", "train", db_poses), ("seq-02", "test", q_poses)):
        for i, pose in enumerate(poses):
            fid = f"{seq}/frame-{i:06d}"
            depth = render_plane_depth(pose, K, cfg.plane_z, cfg.depth_noise, rng)
            frames[fid] = Frame(fid, pose, depth, cfg.name)
            basis = pose_feature_basis(pose, cfg.extent)
            features[fid] = np.cos(proj @ basis + phase) + cfg.feature_noise * rng.standard_normal(cfg.feature_dim)
            split[fid] = tag
    manifest = SceneManifest(cfg.name, K, 0.001, ["seq-01"], ["seq-02"] if cfg.n_query else [])
    return Scene(manifest, frames, features, split)

