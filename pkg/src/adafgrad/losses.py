"""Objective terms and their analytic gradients.

Every term is a pure function. The gradient companions return the value
together with the derivative with respect to the tensor the model's backward
pass continues through (region alignments, region features, or the replayed
slide embedding).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConsistencyError, ConfigurationError, DegenerateGradientError, DimensionError
from .prototypes import PrototypeBuffer


@dataclass
class LossWeights:
    """Weights and switches for the per-slide training objective.

    alpha/beta scale the prototype-contrastive and self-similarity terms,
    gamma the replay cross-entropy, lambda_ppgd the gradient-distillation
    term. tau_sim is the contrastive temperature. ce_weight scales the
    primary cross-entropy (1 in normal training; exposed so term gating and
    linearity can be exercised directly).

    include_positive_in_denominator restores the standard contrastive
    denominator; the default keeps the positive score out of it.
    ppgd_cosine_normalize compares stored and current gradients on the unit
    sphere; switching it off uses the raw dot product.
    """

    alpha: float = 0.01
    beta: float = 0.001
    gamma: float = 0.2
    lambda_ppgd: float = 0.1
    tau_sim: float = 15.0
    ce_weight: float = 1.0
    include_positive_in_denominator: bool = False
    ppgd_cosine_normalize: bool = True

    def __post_init__(self):
        if self.tau_sim <= 0:
            raise ConfigurationError(f"tau_sim must be > 0, got {self.tau_sim}")
        for name in ("alpha", "beta", "gamma", "lambda_ppgd", "ce_weight"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")


def cross_entropy(probs: np.ndarray, target: int) -> float:
    """Negative log-likelihood of the target class under ``probs``."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1:
        raise DimensionError(f"probs must be a vector, got shape {probs.shape}")
    if not 0 <= target < probs.shape[0]:
        raise IndexError(f"target {target} out of range for {probs.shape[0]} classes")
    return float(-np.log(probs[target]))


def cross_entropy_gradient(probs: np.ndarray, target: int):
    """(value, d value / d probs)."""
    value = cross_entropy(probs, target)
    grad = np.zeros_like(np.asarray(probs, dtype=np.float64))
    grad[target] = -1.0 / float(probs[target])
    return value, grad


def _logsumexp(rows: np.ndarray) -> np.ndarray:
    mx = rows.max(axis=1)
    return mx + np.log(np.exp(rows - mx[:, None]).sum(axis=1))


def _contrastive_parts(aligned_gz, buffer: PrototypeBuffer, target: int, w: LossWeights):
    gz = np.asarray(aligned_gz, dtype=np.float64)
    if gz.ndim != 2:
        raise DimensionError(f"aligned rows must be 2-D, got shape {gz.shape}")
    cls_mat = buffer.class_matrix()
    if cls_mat.shape[0] == 0:
        raise ConsistencyError("prototype buffer holds no class prototypes")
    if not 0 <= target < cls_mat.shape[0]:
        raise ConsistencyError(
            f"target class {target} not in prototype buffer of size {cls_mat.shape[0]}"
        )
    neg_mat = buffer.negative_matrix()
    if neg_mat.shape[0] and neg_mat.shape[1] != cls_mat.shape[1]:
        raise DimensionError("class and negative prototype widths differ")
    if gz.shape[1] != cls_mat.shape[1]:
        raise DimensionError(
            f"alignment width {gz.shape[1]} != prototype width {cls_mat.shape[1]}"
        )

    keep = np.ones(cls_mat.shape[0], dtype=bool)
    if not w.include_positive_in_denominator:
        keep[target] = False
    denom_protos = cls_mat[keep]
    if neg_mat.shape[0]:
        denom_protos = np.concatenate([denom_protos, neg_mat], axis=0)
    if denom_protos.shape[0] == 0:
        raise ConsistencyError(
            "contrastive denominator is empty: no negatives and no non-target classes"
        )
    pos_scores = w.tau_sim * gz @ cls_mat[target]          # [N_r]
    denom_scores = w.tau_sim * gz @ denom_protos.T         # [N_r, m]
    return gz, cls_mat, denom_protos, pos_scores, denom_scores


def infonce(aligned_gz, buffer: PrototypeBuffer, target: int, w: LossWeights) -> float:
    """Prototype-contrastive loss, averaged over regions.

    Per region: -log of exp(tau * <g, p_target>) over the summed scores of
    the denominator set (all other class prototypes plus all negatives; the
    positive joins the denominator only when the flag says so). Can be
    negative under the default denominator.
    """
    _, _, _, pos, denom = _contrastive_parts(aligned_gz, buffer, target, w)
    return float(np.mean(_logsumexp(denom) - pos))


def infonce_gradient(aligned_gz, buffer: PrototypeBuffer, target: int, w: LossWeights):
    """(value, d value / d aligned_gz) for the region-averaged contrastive loss."""
    gz, cls_mat, denom_protos, pos, denom = _contrastive_parts(aligned_gz, buffer, target, w)
    lse = _logsumexp(denom)
    value = float(np.mean(lse - pos))
    soft = np.exp(denom - lse[:, None])                    # [N_r, m]
    d_gz = (w.tau_sim / gz.shape[0]) * (soft @ denom_protos - cls_mat[target][None, :])
    return value, d_gz


def self_similarity(z, gz) -> float:
    """Squared Frobenius distance between the two region Gram matrices."""
    z = np.asarray(z, dtype=np.float64)
    gz = np.asarray(gz, dtype=np.float64)
    if z.ndim != 2 or gz.ndim != 2 or z.shape[0] != gz.shape[0]:
        raise DimensionError(f"row counts differ: z {z.shape} vs gz {gz.shape}")
    diff = gz @ gz.T - z @ z.T
    return float(np.sum(diff * diff))


def self_similarity_gradients(z, gz):
    """(value, d/dz, d/dgz); both Grams depend on their own rows only."""
    z = np.asarray(z, dtype=np.float64)
    gz = np.asarray(gz, dtype=np.float64)
    if z.ndim != 2 or gz.ndim != 2 or z.shape[0] != gz.shape[0]:
        raise DimensionError(f"row counts differ: z {z.shape} vs gz {gz.shape}")
    diff = gz @ gz.T - z @ z.T
    value = float(np.sum(diff * diff))
    d_gz = 4.0 * diff @ gz
    d_z = -4.0 * diff @ z
    return value, d_z, d_gz


def ovla(infonce_val: float, sim_val: float, w: LossWeights) -> float:
    """Weighted sum of the contrastive and self-similarity terms."""
    return w.alpha * infonce_val + w.beta * sim_val


def _ppgd_prepare(g_old, g_new, w: LossWeights):
    g_old = np.asarray(g_old, dtype=np.float64)
    g_new = np.asarray(g_new, dtype=np.float64)
    if g_old.shape != g_new.shape or g_old.ndim != 1:
        raise DimensionError(f"gradient shapes differ: {g_old.shape} vs {g_new.shape}")
    if w.ppgd_cosine_normalize:
        n_old = float(np.linalg.norm(g_old))
        n_new = float(np.linalg.norm(g_new))
        if n_old == 0.0 or n_new == 0.0:
            raise DegenerateGradientError("zero gradient vector under cosine comparison")
        return g_old, g_new, n_old, n_new
    return g_old, g_new, None, None


def ppgd(g_old, g_new, w: LossWeights) -> float:
    """Distillation penalty between a stored and a current head gradient.

    Cosine mode (default): 1 - cos(g_old, g_new), in [0, 2]. Raw mode:
    1 - <g_old, g_new>, unbounded.
    """
    g_old, g_new, n_old, n_new = _ppgd_prepare(g_old, g_new, w)
    if w.ppgd_cosine_normalize:
        return float(1.0 - np.dot(g_old / n_old, g_new / n_new))
    return float(1.0 - np.dot(g_old, g_new))


def ppgd_gradient(g_old, g_new, w: LossWeights):
    """(value, d value / d g_new); the stored gradient is a constant."""
    g_old, g_new, n_old, n_new = _ppgd_prepare(g_old, g_new, w)
    if w.ppgd_cosine_normalize:
        u_old = g_old / n_old
        u_new = g_new / n_new
        cos = float(np.dot(u_old, u_new))
        grad = -(u_old - cos * u_new) / n_new
        return 1.0 - cos, grad
    return float(1.0 - np.dot(g_old, g_new)), -g_old


def total_objective(ce: float, ovla_val: float, replay_ce: float, ppgd_val: float,
                    w: LossWeights) -> float:
    """Combine already-evaluated terms into the per-slide objective."""
    return ce + ovla_val + w.gamma * replay_ce + w.lambda_ppgd * ppgd_val
