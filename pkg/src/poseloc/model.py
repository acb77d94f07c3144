"""Block-structured siamese encoder with per-block relative-pose heads.

Stage k maps the previous stage's activation through an affine layer and a
tanh; its output is the block-k embedding.  Every block has its own pose
head (pair embedding -> 3 translation + 4 quaternion values): one tanh
hidden layer as wide as the block, then an affine output layer.  The
relative rotation is bilinear in the two orientations, which a purely
affine head over concatenated embeddings cannot express.  Two auxiliary
heads read the block-1 pair embedding: a frustum head (2 outputs) and an
angle head (1 output).  Two scalar log-variances weight the homoscedastic
loss combination.

Parameters live in an ordered dict of float64 arrays; the order produced by
``param_names`` is also the checkpoint order.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .pose_core import RelativePose


class ShapeMismatch(ValueError):
    pass


class DegenerateQuaternion(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int = 64
    block_dims: tuple = (64, 128, 256, 512)
    seed: int = 0
    head_hidden: bool = True

    def __post_init__(self):
        object.__setattr__(self, "block_dims", tuple(int(d) for d in self.block_dims))
        if self.input_dim < 1 or not self.block_dims or min(self.block_dims) < 1:
            raise ValueError("dimensions must be positive and block_dims non-empty")

    @property
    def n_blocks(self):
        return len(self.block_dims)

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    def digest(self):
        return hashlib.sha256(self.to_json().encode()).digest()


def param_shapes(cfg: EncoderConfig):
    shapes = {}
    prev = cfg.input_dim
    for k, d in enumerate(cfg.block_dims, 1):
        shapes[f"stage{k}.W"] = (prev, d)
        shapes[f"stage{k}.b"] = (d,)
        prev = d
    for k, d in enumerate(cfg.block_dims, 1):
        if cfg.head_hidden:
            shapes[f"head{k}.W1"] = (2 * d, d)
            shapes[f"head{k}.b1"] = (d,)
        shapes[f"head{k}.W"] = (d if cfg.head_hidden else 2 * d, 7)
        shapes[f"head{k}.b"] = (7,)
    d1 = cfg.block_dims[0]
    shapes["frustum.W"] = (2 * d1, 2)
    shapes["frustum.b"] = (2,)
    shapes["angle.W"] = (2 * d1, 1)
    shapes["angle.b"] = (1,)
    shapes["log_var.beta"] = ()
    shapes["log_var.gamma"] = ()
    return shapes


def param_names(cfg):
    return list(param_shapes(cfg))


def init_params(cfg: EncoderConfig):
    """Uniform(+-1/sqrt(fan_in)) weights and biases; log-variances start at 0."""
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.startswith("log_var"):
            params[name] = np.zeros(shape)
            continue
        fan_in = param_shapes(cfg)[name.replace(".b", ".W")][0]
        bound = 1.0 / np.sqrt(fan_in)
        params[name] = rng.uniform(-bound, bound, shape)
    return params


def count_params(params, names=None):
    names = params.keys() if names is None else names
    return int(sum(np.asarray(params[n]).size for n in names))


def distilled_names(cfg):
    """Parameters kept after distillation: block 1, pose head 1 and the auxiliary heads."""
    return [n for n in param_names(cfg)
            if n.startswith(("stage1.", "head1.", "frustum.", "angle.", "log_var."))]


# -- forward passes on autodiff graphs -----------------------------------------


def encode_graph(P, X, n_blocks=None):
    """List of block embeddings for inputs X (batch or single vector)."""
    n_blocks = n_blocks or sum(1 for k in P if k.startswith("stage") and k.endswith(".W"))
    h, out = X, []
    for k in range(1, n_blocks + 1):
        h = ad.tanh(ad.matmul(h, P[f"stage{k}.W"]) + P[f"stage{k}.b"])
        out.append(h)
    return out


def _pair(e_a, e_b):
    return ad.concat([e_a, e_b], axis=-1)


def pose_head_graph(P, k, e_db, e_q):
    h = _pair(e_db, e_q)
    if f"head{k}.W1" in P:
        h = ad.tanh(ad.matmul(h, P[f"head{k}.W1"]) + P[f"head{k}.b1"])
    return ad.matmul(h, P[f"head{k}.W"]) + P[f"head{k}.b"]


def frustum_head_graph(P, e_a, e_b):
    return ad.matmul(_pair(e_a, e_b), P["frustum.W"]) + P["frustum.b"]


def angle_head_graph(P, e_a, e_b):
    return ad.matmul(_pair(e_a, e_b), P["angle.W"]) + P["angle.b"]


# -- numeric API ---------------------------------------------------------------


@dataclass
class EmbeddingStack:
    embeddings: list = field(default_factory=list)

    def __getitem__(self, k):
        """1-based block access: stack[1] is the retrieval embedding."""
        return self.embeddings[k - 1]

    def __len__(self):
        return len(self.embeddings)


def _input_dim(params):
    return params["stage1.W"].shape[0]


def encode(params, x, n_blocks=None):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != _input_dim(params):
        raise ShapeMismatch(f"input has {x.shape[-1]} features, encoder expects {_input_dim(params)}")
    return EmbeddingStack([e.value for e in encode_graph(params, x, n_blocks)])


def _check_pair(params, W_name, e_a, e_b):
    e_a, e_b = np.asarray(e_a, dtype=np.float64), np.asarray(e_b, dtype=np.float64)
    if e_a.shape != e_b.shape or 2 * e_a.shape[-1] != params[W_name].shape[0]:
        raise ShapeMismatch(f"{W_name} expects pair width {params[W_name].shape[0]}, got {e_a.shape} + {e_b.shape}")
    return e_a, e_b


def regress_raw(params, head, e_db, e_q):
    first = f"head{head}.W1" if f"head{head}.W1" in params else f"head{head}.W"
    e_db, e_q = _check_pair(params, first, e_db, e_q)
    return pose_head_graph(params, head, e_db, e_q).value


def regress_relative_pose(params, head, e_db, e_q):
    """Returns (RelativePose with normalized rotation, raw 7-vector)."""
    raw = regress_raw(params, head, e_db, e_q)
    qn = np.linalg.norm(raw[3:7])
    if qn < 1e-8:
        raise DegenerateQuaternion(f"predicted quaternion norm {qn:.3g} < 1e-8")
    return RelativePose(raw[:3], raw[3:7] / qn), raw


def predict_frustum(params, e_a, e_b):
    e_a, e_b = _check_pair(params, "frustum.W", e_a, e_b)
    return frustum_head_graph(params, e_a, e_b).value


def predict_angle(params, e_a, e_b):
    e_a, e_b = _check_pair(params, "angle.W", e_a, e_b)
    return angle_head_graph(params, e_a, e_b).value[..., 0]


def backward(params, loss_graph, names=None):
    """Value and exact gradients of ``loss_graph(P) -> scalar Var``.

    ``P`` maps parameter names to ``Var`` leaves.  Gradients are returned for
    ``names`` (default: all), zero-filled where the loss does not depend on
    a parameter.
    """
    names = list(params) if names is None else names
    P = {k: ad.Var(v) for k, v in params.items()}
    loss = loss_graph(P)
    ad.grad(loss)
    grads = {n: (np.zeros_like(params[n]) if P[n].grad is None else P[n].grad) for n in names}
    return float(loss.value), grads


# -- checkpoints ---------------------------------------------------------------
#
# Layout (little-endian):
#   b"RFCK"  u32 version  u32 len(config json)  config json (utf-8)
#   32-byte sha256 of the config json
#   for each name in param_names(config) order: float32 values, C order


CHECKPOINT_VERSION = 1


def save_checkpoint(path, cfg: EncoderConfig, params):
    blob = cfg.to_json().encode()
    with open(path, "wb") as fh:
        fh.write(b"RFCK" + struct.pack("<II", CHECKPOINT_VERSION, len(blob)) + blob + cfg.digest())
        for name, shape in param_shapes(cfg).items():
            arr = np.asarray(params[name], dtype="<f4")
            if arr.shape != shape:
                raise ShapeMismatch(f"{name}: expected {shape}, got {arr.shape}")
            fh.write(arr.tobytes(order="C"))


def load_checkpoint(path):
    data = open(path, "rb").read()
    if data[:4] != b"RFCK":
        raise CheckpointError("bad magic")
    version, n = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    blob = data[12:12 + n]
    if data[12 + n:44 + n] != hashlib.sha256(blob).digest():
        raise CheckpointError("config digest mismatch")
    try:
        cfg_d = json.loads(blob)
        cfg = EncoderConfig(cfg_d["input_dim"], tuple(cfg_d["block_dims"]), cfg_d["seed"], cfg_d["head_hidden"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"unreadable config: {exc}") from exc
    off = 44 + n
    expected = off + 4 * sum(int(np.prod(s, dtype=np.int64)) for s in param_shapes(cfg).values())
    if len(data) != expected:
        raise CheckpointError(f"checkpoint holds {len(data)} bytes, config implies {expected}")
    params = {}
    for name, shape in param_shapes(cfg).items():
        size = int(np.prod(shape, dtype=np.int64))
        params[name] = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shape).astype(np.float64)
        off += 4 * size
    return cfg, params
