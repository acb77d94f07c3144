"""Training pair and quadruplet construction from posed depth sequences.

Quadruplet labels follow the easy/medium/hard overlap + angular-distance
thresholds; NN-Net style pairs are all ordered pairs with enough bilateral
overlap.  Overlap between two frames is always the bilateral minimum.
"""

from __future__ import annotations

import enum
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .frustum import DepthFrame, overlap_counts, sample_points
from .pose_core import Pose, angular_distance


class DomainError(ValueError):
    pass


class PairLabel(enum.Enum):
    EASY = "easy"
    MEDIUM = "medium"
    HARD = "hard"
    UNUSABLE = "unusable"


@dataclass(frozen=True)
class Thresholds:
    easy_overlap: float = 0.40
    easy_alpha: float = 0.30
    medium_overlap: float = 0.30
    medium_alpha: float = 0.60
    hard_low: float = 0.05
    hard_high: float = 0.25


@dataclass
class MiningConfig:
    stride: int = 4
    per_anchor_cap: int = 1
    threads: int = 1
    thresholds: Thresholds = field(default_factory=Thresholds)


@dataclass(eq=False)
class Frame:
    """A posed frame.  ``depth_ref`` is a DepthFrame or something ``depth_loader`` accepts."""

    id: str
    pose: Pose
    depth_ref: object = None
    scene: str = ""
    depth_loader: object = None

    def depth(self) -> DepthFrame:
        if isinstance(self.depth_ref, DepthFrame):
            return self.depth_ref
        if self.depth_loader is None:
            raise ValueError(f"frame {self.id} has no depth loader")
        self.depth_ref = self.depth_loader(self.depth_ref)
        return self.depth_ref


def classify_pair(overlap_min, alpha, th: Thresholds = Thresholds()) -> PairLabel:
    if not (0.0 <= overlap_min <= 1.0 and 0.0 <= alpha <= 1.0):
        raise DomainError(f"overlap {overlap_min} and alpha {alpha} must lie in [0, 1]")
    if overlap_min > th.easy_overlap and alpha < th.easy_alpha:
        return PairLabel.EASY
    if overlap_min > th.medium_overlap and alpha > th.medium_alpha:
        return PairLabel.MEDIUM
    if th.hard_low < overlap_min < th.hard_high:
        return PairLabel.HARD
    return PairLabel.UNUSABLE


def overlap_matrix(frames, stride=4, threads=1):
    """theta[i, j] = fraction of frame i's valid pixels landing inside frame j."""
    n = len(frames)
    Rs = np.stack([f.pose.R for f in frames]) if n else np.zeros((0, 3, 3))
    ts = np.stack([f.pose.t for f in frames]) if n else np.zeros((0, 3))
    depths = [f.depth() for f in frames]

    def row(i):
        pts = sample_points(depths[i], stride)
        # single-camera scenes: frame j's intrinsics are shared with frame i
        return overlap_counts(pts, Rs[i], ts[i], Rs, ts, depths[i].intrinsics) / pts[0].size

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            rows = list(pool.map(row, range(n)))
    else:
        rows = [row(i) for i in range(n)]
    return np.array(rows).reshape(n, n)


@dataclass(frozen=True)
class Quadruplet:
    anchor: str
    easy: str
    medium: str
    hard: str
    # (d1, d2, alpha) per member pair
    easy_stats: tuple
    medium_stats: tuple
    hard_stats: tuple

    def to_json(self):
        return json.dumps(
            {
                "anchor": self.anchor,
                "easy": self.easy,
                "medium": self.medium,
                "hard": self.hard,
                "stats": {
                    "easy": list(self.easy_stats),
                    "medium": list(self.medium_stats),
                    "hard": list(self.hard_stats),
                },
            }
        )

    @classmethod
    def from_dict(cls, d):
        s = d["stats"]
        return cls(d["anchor"], d["easy"], d["medium"], d["hard"],
                   tuple(s["easy"]), tuple(s["medium"]), tuple(s["hard"]))


def _by_scene(frames):
    scenes = {}
    for f in frames:
        scenes.setdefault(f.scene, []).append(f)
    for name in scenes:
        scenes[name].sort(key=lambda f: f.id)
    return [scenes[k] for k in sorted(scenes)]


def mine_quadruplets(frames, config: MiningConfig = None):
    """Anchor + first easy/medium/hard partners per anchor, candidates in id order.

    Up to ``per_anchor_cap`` quadruplets per anchor, pairing the k-th
    candidate of each label.  Anchors lacking any label are skipped.
    """
    config = config or MiningConfig()
    out = []
    for group in _by_scene(frames):
        if len(group) < 4:
            continue
        theta = overlap_matrix(group, config.stride, config.threads)
        ids = [f.id for f in group]
        qs = np.stack([f.pose.q for f in group])
        for i, anchor in enumerate(ids):
            alpha = angular_distance(qs[i], qs)
            found = {PairLabel.EASY: [], PairLabel.MEDIUM: [], PairLabel.HARD: []}
            for j in range(len(group)):
                if j == i:
                    continue
                ov = min(theta[i, j], theta[j, i])
                label = classify_pair(ov, float(alpha[j]), config.thresholds)
                if label is not PairLabel.UNUSABLE and len(found[label]) < config.per_anchor_cap:
                    found[label].append(j)
            n = min(len(v) for v in found.values())

            def stats(j):
                return (float(1.0 - theta[i, j]), float(1.0 - theta[j, i]), float(alpha[j]))

            for k in range(n):
                e, m, h = (found[lbl][k] for lbl in (PairLabel.EASY, PairLabel.MEDIUM, PairLabel.HARD))
                out.append(Quadruplet(anchor, ids[e], ids[m], ids[h], stats(e), stats(m), stats(h)))
    out.sort(key=lambda q: q.anchor)
    return out


def mine_overlap_pairs(frames, min_overlap=0.3, stride=4, per_frame_cap=None, seed=0, threads=1):
    """Ordered (db, query, overlap) triples with bilateral overlap >= min_overlap.

    With ``per_frame_cap`` set, each db frame keeps a seeded random subset of
    its partners (still emitted in id order).
    """
    if not 0.0 < min_overlap <= 1.0:
        raise DomainError("min_overlap must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    out = []
    for group in _by_scene(frames):
        theta = overlap_matrix(group, stride, threads)
        ov = np.minimum(theta, theta.T)
        for i in range(len(group)):
            js = [j for j in range(len(group)) if j != i and ov[i, j] >= min_overlap]
            if per_frame_cap is not None and len(js) > per_frame_cap:
                js = sorted(rng.choice(js, size=per_frame_cap, replace=False).tolist())
            out.extend((group[i], group[j], float(ov[i, j])) for j in js)
    return out


def write_quadruplets(path, quads, header=None):
    with open(path, "w") as fh:
        if header is not None:
            fh.write(json.dumps({"header": header}, sort_keys=True) + "\n")
        for q in quads:
            fh.write(q.to_json() + "\n")


def read_quadruplets(path):
    out = []
    for line in Path(path).read_text().splitlines():
        d = json.loads(line)
        if "header" not in d:
            out.append(Quadruplet.from_dict(d))
    return out


def write_pairs(path, pairs, header=None):
    with open(path, "w") as fh:
        if header is not None:
            fh.write(json.dumps({"header": header}, sort_keys=True) + "\n")
        for db, q, ov in pairs:
            fh.write(json.dumps({"db": db.id, "query": q.id, "overlap": ov}) + "\n")


def read_pairs(path):
    """List of (db_id, query_id, overlap)."""
    out = []
    for line in Path(path).read_text().splitlines():
        d = json.loads(line)
        if "header" not in d:
            out.append((d["db"], d["query"], d["overlap"]))
    return out


def thresholds_header(config: MiningConfig, **extra):
    return {"thresholds": asdict(config.thresholds), "stride": config.stride,
            "per_anchor_cap": config.per_anchor_cap, **extra}
