"""Layerwise pretraining, distilled fine-tuning, localization and evaluation."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import losses as L
from .model import (
    angle_head_graph,
    backward,
    encode,
    encode_graph,
    frustum_head_graph,
    pose_head_graph,
    regress_relative_pose,
)
from .pose_core import Pose, compose_absolute, pose_errors, relative_pose
from .retrieval import RetrievalIndex

# -- schedules and optimizers --------------------------------------------------


@dataclass(frozen=True)
class TrainSchedule:
    phase: str = "pretrain"
    epochs: int = 50
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    batch_size: int = 128
    seed: int = 0
    momentum: float = 0.0

    def __post_init__(self):
        if self.phase not in ("pretrain", "finetune"):
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.epochs < 1 or self.batch_size < 1 or not self.learning_rate >= 0:
            raise ValueError("epochs and batch size must be >= 1 and lr >= 0")


PRESETS = {
    "desk": {
        "pretrain": TrainSchedule("pretrain", 50, "adam", 1e-3, 128),
        "finetune": TrainSchedule("finetune", 20, "sgd", 1e-3, 128),
    },
    "full": {
        "pretrain": TrainSchedule("pretrain", 300, "adam", 1e-4, 128),
        "finetune": TrainSchedule("finetune", 75, "sgd", 1e-4, 128),
    },
}


def schedule_preset(name, phase, **overrides):
    sched = PRESETS[name][phase]
    return replace(sched, **{k: v for k, v in overrides.items() if v is not None})


@dataclass
class OptimizerState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def sgd_step(params, grads, state: OptimizerState, lr, momentum=0.0):
    new = dict(params)
    for name, g in grads.items():
        if momentum:
            buf = momentum * state.m.get(name, 0.0) + g
            state.m[name] = buf
            g = buf
        new[name] = params[name] - lr * g
    state.step += 1
    return new, state


def adam_step(params, grads, state: OptimizerState, lr, b1=0.9, b2=0.999, eps=1e-8):
    new = dict(params)
    state.step += 1
    c1, c2 = 1.0 - b1 ** state.step, 1.0 - b2 ** state.step
    for name, g in grads.items():
        m = b1 * state.m.get(name, 0.0) + (1 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        new[name] = params[name] - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return new, state


# -- training data -------------------------------------------------------------


def relative_target(db: Pose, query: Pose):
    rel = relative_pose(db, query)
    return np.concatenate([rel.dt, rel.dq])


@dataclass
class PairData:
    x_db: np.ndarray
    x_q: np.ndarray
    target: np.ndarray  # (N, 7) ground-truth relative pose, quaternion w >= 0

    def __len__(self):
        return len(self.target)

    def take(self, idx):
        return PairData(self.x_db[idx], self.x_q[idx], self.target[idx])

    @classmethod
    def build(cls, pairs, features, poses):
        """``pairs`` are (db_id, query_id, ...) tuples."""
        if not pairs:
            raise ValueError("empty pair set")
        return cls(
            np.stack([features[p[0]] for p in pairs]),
            np.stack([features[p[1]] for p in pairs]),
            np.stack([relative_target(poses[p[0]], poses[p[1]]) for p in pairs]),
        )


MEMBERS = ("anchor", "easy", "medium", "hard")


@dataclass
class QuadData:
    x: dict  # member -> (N, input_dim)
    target: np.ndarray  # (N, 7) anchor -> easy relative pose
    stats: dict  # tier -> (N, 3) of (d1, d2, alpha)

    def __len__(self):
        return len(self.target)

    def take(self, idx):
        return QuadData({k: v[idx] for k, v in self.x.items()}, self.target[idx],
                        {k: v[idx] for k, v in self.stats.items()})

    @classmethod
    def build(cls, quads, features, poses):
        if not quads:
            raise ValueError("empty quadruplet set")
        x = {m: np.stack([features[getattr(q, m)] for q in quads]) for m in MEMBERS}
        target = np.stack([relative_target(poses[q.anchor], poses[q.easy]) for q in quads])
        stats = {t: np.array([getattr(q, f"{t}_stats") for q in quads], dtype=np.float64)
                 for t in ("easy", "medium", "hard")}
        return cls(x, target, stats)


# -- loss graphs ---------------------------------------------------------------


def pretrain_loss_graph(P, data: PairData, beta=1.0):
    """Batch mean of the pose loss summed over every block's head."""
    n = len(data)
    embs = encode_graph(P, np.concatenate([data.x_db, data.x_q]))
    preds = [pose_head_graph(P, k, e[:n], e[n:]) for k, e in enumerate(embs, 1)]
    return ad.mean(L.pose_loss_layerwise(preds, data.target, beta))


def aux_loss_graph(P, e, data: QuadData, variant: L.Variant, cfg: L.LossConfig):
    """Per-sample auxiliary loss, summed over the tiers the variant uses."""
    a = e["anchor"]
    kind = variant.aux
    if kind == "ATL":
        return L.angle_triplet_loss(a, e["easy"], e["medium"], cfg.margin)
    if kind == "FTL":
        out = L.frustum_triplet_loss(a, e["easy"], e["hard"], cfg.margin)
        if cfg.dual_triplet:
            out = out + L.frustum_triplet_loss(a, e["medium"], e["hard"], cfg.margin)
        return out
    total = 0.0
    for tier in L.AUX_TIERS[kind]:
        d1, d2, alpha = (data.stats[tier][:, i] for i in range(3))
        b = e[tier]
        if kind == "PF":
            d_hat = frustum_head_graph(P, a, b)
            term = L.predict_frustum_loss(d_hat[:, 0], d_hat[:, 1], d1, d2)
        elif kind == "EF":
            term = L.enforce_frustum_loss(a, b, d1, d2)
        elif kind == "PA":
            term = L.predict_angle_loss(angle_head_graph(P, a, b)[:, 0], alpha)
        else:
            term = L.enforce_angle_loss(a, b, alpha)
        total = total + term
    return total


def finetune_loss_graph(P, data: QuadData, cfg: L.LossConfig):
    """Distilled objective: block-1 pose loss on (anchor, easy) plus the variant's auxiliary term."""
    variant = L.Variant.parse(cfg.variant)
    members = ["anchor", "easy"]
    if variant.aux:
        members += [t for t in ("medium", "hard") if t in L.AUX_TIERS[variant.aux]]
    n = len(data)
    e1 = encode_graph(P, np.concatenate([data.x[m] for m in members]), n_blocks=1)[0]
    e = {m: e1[i * n:(i + 1) * n] for i, m in enumerate(members)}
    l_pose = ad.mean(L.pose_loss_layerwise([pose_head_graph(P, 1, e["anchor"], e["easy"])], data.target, cfg.beta))
    if variant.aux is None:
        return l_pose
    l_aux = ad.mean(aux_loss_graph(P, e, data, variant, cfg))
    if variant.homoscedastic:
        return L.combine_homoscedastic(l_pose, l_aux, P["log_var.beta"], P["log_var.gamma"])
    return L.combine_equal(l_pose, l_aux)


def finetune_trainable(names, variant_label):
    """Names updated during fine-tuning: block 1, head 1 and whatever the variant needs."""
    variant = L.Variant.parse(variant_label)
    names = [n for n in names if n.startswith(("stage1.", "head1."))]
    if variant.aux == "PF":
        names += ["frustum.W", "frustum.b"]
    if variant.aux == "PA":
        names += ["angle.W", "angle.b"]
    if variant.homoscedastic:
        names += ["log_var.beta", "log_var.gamma"]
    return names


# -- training loop -------------------------------------------------------------


def _train(params, data, loss_graph, schedule: TrainSchedule, trainable, log=None):
    rng = np.random.default_rng(schedule.seed)
    state = OptimizerState()
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    curve = []
    for epoch in range(schedule.epochs):
        perm = rng.permutation(len(data))
        batch_losses = []
        for start in range(0, len(data), schedule.batch_size):
            batch = data.take(perm[start:start + schedule.batch_size])
            value, grads = backward(params, lambda P: loss_graph(P, batch), trainable)
            batch_losses.append(value)
            if schedule.optimizer == "adam":
                params, state = adam_step(params, grads, state, schedule.learning_rate)
            else:
                params, state = sgd_step(params, grads, state, schedule.learning_rate, schedule.momentum)
        curve.append(float(np.mean(batch_losses)))
        if log:
            log(f"{schedule.phase} epoch {epoch + 1}/{schedule.epochs} loss {curve[-1]:.6f}")
    return params, curve


def pretrain(params, data: PairData, schedule: TrainSchedule, loss_cfg=L.LossConfig(), log=None):
    """Train every block and head on the layerwise pose loss."""
    trainable = [n for n in params if n.startswith(("stage", "head"))]
    return _train(params, data, lambda P, b: pretrain_loss_graph(P, b, loss_cfg.beta), schedule, trainable, log)


def finetune(params, data: QuadData, loss_cfg: L.LossConfig, schedule: TrainSchedule, log=None):
    """Fine-tune the distilled model; parameters outside block 1 / head 1 / aux are untouched."""
    trainable = finetune_trainable(list(params), loss_cfg.variant)
    return _train(params, data, lambda P, b: finetune_loss_graph(P, b, loss_cfg), schedule, trainable, log)


# -- inference -----------------------------------------------------------------


def build_index(params, ids, features, poses):
    e1 = encode(params, np.stack([features[i] for i in ids]), n_blocks=1)[1]
    index = RetrievalIndex(e1.shape[1])
    for fid, emb in zip(ids, e1):
        index.insert(fid, emb, poses[fid])
    return index


def localize(params, index: RetrievalIndex, query_input, k=1):
    """Encode, retrieve the top neighbour, regress with head 1 and compose.

    Returns (predicted pose, neighbour entry).  ``k`` > 1 is accepted for
    inspection, but only the top-1 neighbour is used.
    """
    e_q = encode(params, query_input, n_blocks=1)[1]
    nn, _ = index.query_knn(e_q, k)[0]
    rel, _ = regress_relative_pose(params, 1, nn.embedding.astype(np.float64), e_q)
    return compose_absolute(nn.pose, rel), nn


def median(values):
    """Median; an even-length list averages the two middle values."""
    v = sorted(values)
    if not v:
        raise ValueError("median of an empty list")
    n = len(v)
    return float(v[n // 2]) if n % 2 else 0.5 * (v[n // 2 - 1] + v[n // 2])


REFERENCE_ROWS = {
    "NN-Net (7-Scenes average, retrieval)": (0.33, 14.83),
    "NN-Net (7-Scenes average, pose regression)": (0.21, 9.30),
}


@dataclass
class EvalReport:
    # scene -> {"retrieval": [t_m, r_deg], "pipeline": [t_m, r_deg], "queries": n}
    scenes: dict = field(default_factory=dict)

    def average(self, kind):
        rows = [s[kind] for s in self.scenes.values()]
        return [float(np.mean([r[0] for r in rows])), float(np.mean([r[1] for r in rows]))]

    def to_dict(self):
        return {
            "scenes": self.scenes,
            "average": {"retrieval": self.average("retrieval"), "pipeline": self.average("pipeline")},
            "reference": {k: list(v) for k, v in REFERENCE_ROWS.items()},
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self):
        names = sorted(self.scenes)
        cols = names + ["Average"]

        def cell(tr):
            return f"{tr[0]:.2f}m, {tr[1]:.2f}deg"

        lines = []
        for title, kind in (("Retrieval median localization error", "retrieval"),
                            ("Pose regression median localization error", "pipeline")):
            rows = [("measured", [cell(self.scenes[n][kind]) for n in names] + [cell(self.average(kind))])]
            ref_key = [k for k in REFERENCE_ROWS if ("retrieval" in k) == (kind == "retrieval")][0]
            rows.append((ref_key, ["-"] * len(names) + [cell(REFERENCE_ROWS[ref_key])]))
            w0 = max(len(r[0]) for r in rows + [("Scene", [])])
            widths = [max(len(c), *(len(r[1][i]) for r in rows)) for i, c in enumerate(cols)]
            lines.append(title)
            lines.append(" | ".join(["Scene".ljust(w0)] + [c.rjust(w) for c, w in zip(cols, widths)]))
            lines.append("-" * len(lines[-1]))
            for label, cells in rows:
                lines.append(" | ".join([label.ljust(w0)] + [c.rjust(w) for c, w in zip(cells, widths)]))
            lines.append("")
        return "\n".join(lines)


def evaluate(params, index: RetrievalIndex, test_frames, features, timings=None):
    """Per-scene medians for retrieval-only and full-pipeline predictions."""
    per_scene = {}
    for frame in test_frames:
        t0 = time.perf_counter()
        pred, nn = localize(params, index, features[frame.id])
        if timings is not None:
            timings.append(time.perf_counter() - t0)
        acc = per_scene.setdefault(frame.scene, {"rt": [], "rr": [], "pt": [], "pr": []})
        rt, rr = pose_errors(frame.pose, nn.pose)
        pt, pr = pose_errors(frame.pose, pred)
        acc["rt"].append(rt)
        acc["rr"].append(rr)
        acc["pt"].append(pt)
        acc["pr"].append(pr)
    report = EvalReport()
    for scene, acc in sorted(per_scene.items()):
        report.scenes[scene] = {
            "retrieval": [median(acc["rt"]), median(acc["rr"])],
            "pipeline": [median(acc["pt"]), median(acc["pr"])],
            "queries": len(acc["rt"]),
        }
    return report


def run_metadata(seed, config_digest, variant, loss_cfg: L.LossConfig, schedule: TrainSchedule, **extra):
    return {
        "seed": seed,
        "config_digest": config_digest,
        "variant": variant,
        "beta": loss_cfg.beta,
        "margin": loss_cfg.margin,
        "schedule": asdict(schedule),
        **extra,
    }
