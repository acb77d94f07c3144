"""Exact nearest-neighbour index over (embedding, absolute pose) entries.

Embeddings are held as float32 (the on-disk precision) so an index behaves
identically before and after a save/load round trip.  Distances are
computed in float64 from those values.

File layout (little-endian):
    b"RFIX"  u32 version  u32 dim  u32 count
    per entry: u32 id length, utf-8 id, dim x f32 embedding,
               7 x f32 pose (tx ty tz qw qx qy qz)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .pose_core import Pose, pose_errors


class DimensionMismatch(ValueError):
    pass


class DuplicateId(ValueError):
    pass


class EmptyIndex(ValueError):
    pass


class IndexFormatError(ValueError):
    pass


INDEX_VERSION = 1


@dataclass(frozen=True, eq=False)
class IndexEntry:
    frame_id: str
    embedding: np.ndarray
    pose: Pose


class RetrievalIndex:
    def __init__(self, dim=64):
        self.dim = int(dim)
        self._ids = []
        self._emb = []
        self._poses = []
        self._seen = set()
        self._frozen = None

    def __len__(self):
        return len(self._ids)

    def insert(self, frame_id, embedding, pose: Pose):
        emb = np.asarray(embedding, dtype=np.float32).reshape(-1)
        if emb.size != self.dim:
            raise DimensionMismatch(f"embedding has {emb.size} dims, index holds {self.dim}")
        if not np.all(np.isfinite(emb)):
            raise ValueError("embedding must be finite")
        if frame_id in self._seen:
            raise DuplicateId(frame_id)
        self._seen.add(frame_id)
        self._ids.append(frame_id)
        self._emb.append(emb)
        self._poses.append(pose)
        self._frozen = None
        return self

    def _snapshot(self):
        if self._frozen is None:
            order = sorted(range(len(self._ids)), key=self._ids.__getitem__)
            emb = np.stack([self._emb[i] for i in order]).astype(np.float64) if order else np.zeros((0, self.dim))
            self._frozen = (order, emb)
        return self._frozen

    def entry(self, i):
        return IndexEntry(self._ids[i], self._emb[i], self._poses[i])

    def query_knn(self, query_embedding, k=1):
        """k nearest entries as [(IndexEntry, distance)], ties broken by frame id."""
        if not self._ids:
            raise EmptyIndex("query on an empty index")
        if k < 1:
            raise ValueError("k must be >= 1")
        q = np.asarray(query_embedding, dtype=np.float32).reshape(-1).astype(np.float64)
        if q.size != self.dim:
            raise DimensionMismatch(f"query has {q.size} dims, index holds {self.dim}")
        order, emb = self._snapshot()
        diff = emb - q
        d2 = np.einsum("ij,ij->i", diff, diff)
        # stable sort over id-sorted rows gives the lexicographic tie-break
        top = np.argsort(d2, kind="stable")[:k]
        return [(self.entry(order[i]), float(np.sqrt(d2[i]))) for i in top]

    def retrieval_error(self, query_embedding, query_gt_pose: Pose):
        nn, _ = self.query_knn(query_embedding, 1)[0]
        return pose_errors(query_gt_pose, nn.pose)

    # -- persistence ---------------------------------------------------------

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(b"RFIX" + struct.pack("<III", INDEX_VERSION, self.dim, len(self)))
            for fid, emb, pose in zip(self._ids, self._emb, self._poses):
                raw = fid.encode("utf-8")
                fh.write(struct.pack("<I", len(raw)) + raw)
                fh.write(emb.astype("<f4").tobytes())
                fh.write(pose.as_array().astype("<f4").tobytes())

    @classmethod
    def load(cls, path):
        data = open(path, "rb").read()
        if data[:4] != b"RFIX":
            raise IndexFormatError("bad magic")
        version, dim, count = struct.unpack_from("<III", data, 4)
        if version != INDEX_VERSION:
            raise IndexFormatError(f"unsupported index version {version}")
        index, off = cls(dim), 16
        try:
            for _ in range(count):
                (n,) = struct.unpack_from("<I", data, off)
                off += 4
                fid = data[off:off + n].decode("utf-8")
                off += n
                emb = np.frombuffer(data, "<f4", dim, off)
                off += 4 * dim
                p = np.frombuffer(data, "<f4", 7, off).astype(np.float64)
                off += 28
                index.insert(fid, emb, Pose(p[:3], p[3:]))
        except (struct.error, UnicodeDecodeError, ValueError) as exc:
            if isinstance(exc, (DuplicateId, DimensionMismatch)):
                raise
            raise IndexFormatError(f"truncated or corrupt index: {exc}") from exc
        if off != len(data):
            raise IndexFormatError("trailing bytes in index file")
        return index
