"""Pose, frustum and angle losses plus their equal / homoscedastic combinations.

Every loss reduces over the last axis only, so it works per sample on a
single vector and per row on a batch.  When none of the inputs is an
autodiff ``Var`` the result comes back as plain floats / arrays.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


class UnknownVariant(ValueError):
    pass


def _has_var(x):
    if isinstance(x, ad.Var):
        return True
    return isinstance(x, (list, tuple)) and any(_has_var(v) for v in x)


def _plain(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        out = fn(*args, **kwargs)
        if _has_var([*args, *kwargs.values()]):
            return out
        v = out.value
        return float(v) if v.ndim == 0 else v

    return wrapper


def _l1(a, b):
    return ad.sum_(ad.absolute(ad.as_var(a) - b), axis=-1)


@_plain
def pose_loss_layerwise(preds, gt, beta=1.0):
    """Sum over heads of |t_hat - t|_1 + beta * |q_hat - q|_1 on raw 7-vectors."""
    gt = ad.as_var(gt)
    total = 0.0
    for raw in preds:
        raw = ad.as_var(raw)
        total = total + _l1(raw[..., :3], gt[..., :3]) + beta * _l1(raw[..., 3:7], gt[..., 3:7])
    return ad.as_var(total)


@_plain
def predict_frustum_loss(d1_hat, d2_hat, d1, d2):
    return ad.absolute(ad.as_var(d1_hat) - d1) + ad.absolute(ad.as_var(d2_hat) - d2)


@_plain
def enforce_frustum_loss(e_a, e_b, d1, d2):
    dist = ad.norm(ad.as_var(e_a) - e_b, axis=-1)
    return ad.absolute(dist * -1.0 + d1) + ad.absolute(dist * -1.0 + d2)


@_plain
def triplet_loss(e_anchor, e_pos, e_neg, margin):
    e_anchor = ad.as_var(e_anchor)
    pos = ad.norm(e_anchor - e_pos, axis=-1)
    neg = ad.norm(e_anchor - e_neg, axis=-1)
    return ad.relu(pos - neg + margin)


def frustum_triplet_loss(e_anchor, e_easy, e_hard, margin):
    return triplet_loss(e_anchor, e_easy, e_hard, margin)


def angle_triplet_loss(e_anchor, e_easy, e_medium, margin):
    return triplet_loss(e_anchor, e_easy, e_medium, margin)


@_plain
def predict_angle_loss(alpha_hat, alpha):
    return ad.absolute(ad.as_var(alpha_hat) - alpha)


@_plain
def enforce_angle_loss(e_a, e_b, alpha):
    dist = ad.norm(ad.as_var(e_a) - e_b, axis=-1)
    return ad.absolute(dist * -1.0 + alpha)


@_plain
def combine_equal(l_pose, l_aux):
    return ad.as_var(l_pose) + l_aux


@_plain
def combine_homoscedastic(l_pose, l_aux, beta_hat, gamma_hat):
    """l_pose / exp(beta_hat) + beta_hat + l_aux / exp(gamma_hat) + gamma_hat."""
    beta_hat, gamma_hat = ad.as_var(beta_hat), ad.as_var(gamma_hat)
    return (ad.as_var(l_pose) * ad.exp(-beta_hat) + beta_hat
            + ad.as_var(l_aux) * ad.exp(-gamma_hat) + gamma_hat)


# -- variants ------------------------------------------------------------------

AUX_KINDS = ("PF", "EF", "PA", "EA", "ATL", "FTL")
HOMOSCEDASTIC_OK = ("PF", "EF", "PA", "EA")
VARIANT_LABELS = (
    "PL", "PL+EA", "PL+EA+H", "PL+EF", "PL+EF+H", "PL+PA", "PL+PA+H",
    "PL+PF", "PL+PF+H", "PL+ATL", "PL+FTL",
)

# which quadruplet members each auxiliary term pairs with the anchor
AUX_TIERS = {
    "PF": ("easy", "medium", "hard"),
    "EF": ("easy", "medium", "hard"),
    "PA": ("easy", "medium"),
    "EA": ("easy", "medium"),
    "ATL": ("easy", "medium"),
    "FTL": ("easy", "hard"),
}


@dataclass(frozen=True)
class Variant:
    aux: str | None = None
    homoscedastic: bool = False

    @property
    def label(self):
        return "+".join(["PL"] + ([self.aux] if self.aux else []) + (["H"] if self.homoscedastic else []))

    @classmethod
    def parse(cls, label):
        if label not in VARIANT_LABELS:
            raise UnknownVariant(f"unknown variant {label!r}; expected one of {', '.join(VARIANT_LABELS)}")
        parts = label.split("+")[1:]
        h = parts[-1:] == ["H"]
        if h:
            parts = parts[:-1]
        return cls(parts[0] if parts else None, h)


@dataclass(frozen=True)
class LossConfig:
    beta: float = 1.0
    margin: float = 0.2
    variant: str = "PL"
    dual_triplet: bool = False

    def __post_init__(self):
        if not (np.isfinite(self.beta) and self.beta > 0 and np.isfinite(self.margin) and self.margin > 0):
            raise ValueError("beta and margin must be finite and positive")
        Variant.parse(self.variant)
