"""Boundary, self-consistency and contrastive-consistency losses.

All losses take and return :class:`~gccm.autodiff.Tensor` values so they
can be differentiated; :class:`LossBreakdown` carries the scalar parts of
a combined objective together with the differentiable total.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .denoiser import DenoiserOutput
from .graphs import is_classification

PROB_FLOOR = 1e-12
LOG_PROB_FLOOR = float(np.log(PROB_FLOOR))


@dataclass
class LossBreakdown:
    boundary_t1: float
    boundary_t2: float
    consistency: float
    total: float
    lambda1: float
    lambda2: float
    tau: float | None = None
    loss: Tensor | None = field(default=None, repr=False, compare=False)

    def identity_gap(self) -> float:
        expect = self.lambda1 * (self.boundary_t1 + self.boundary_t2) + self.lambda2 * self.consistency
        return abs(self.total - expect)


def boundary_loss(y_hat: Tensor, y: np.ndarray, task: str, log_probs: Tensor | None = None) -> Tensor:
    """Cross-entropy (classification) or mean absolute error (regression).

    Probabilities are floored at 1e-12.  When ``log_probs`` is given it is
    used in place of ``log(y_hat)``, which avoids underflow in saturated
    rows.
    """
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if y_hat.shape != y.shape:
        raise ad.ShapeError(f"boundary_loss: prediction {y_hat.shape} vs target {y.shape}")
    if not is_classification(task):
        return ad.absolute(y_hat - Tensor(y)).mean()
    p = y_hat.data
    if np.any(p < -1e-12) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-9):
        raise ValueError("boundary_loss: prediction rows are not probability vectors")
    if log_probs is None:
        logp = ad.log(ad.clamp_min(y_hat, PROB_FLOOR))
    else:
        logp = ad.clamp_min(log_probs, LOG_PROB_FLOOR)
    return -(ad.row_sum(logp * Tensor(y))).mean()


def self_consistency_loss(y_hat_t1: Tensor, y_hat_t2: Tensor) -> Tensor:
    if y_hat_t1.shape != y_hat_t2.shape:
        raise ad.ShapeError(f"self_consistency_loss: shapes {y_hat_t1.shape} and {y_hat_t2.shape}")
    return ad.square(y_hat_t1 - y_hat_t2).mean()


def _directional_infonce(sim: Tensor, n: int) -> Tensor:
    # mean_i [ logsumexp_j sim_ij - sim_ii ]
    diag = (sim * Tensor(np.eye(n))).sum()
    return (ad.row_logsumexp(sim).sum() - diag) / float(n)


def contrastive_loss(z1: Tensor, z2: Tensor, tau: float) -> Tensor:
    """Symmetric InfoNCE over cosine similarities; row i of each view is a positive pair."""
    if z1.shape != z2.shape:
        raise ad.ShapeError(f"contrastive_loss: shapes {z1.shape} and {z2.shape}")
    if tau <= 0:
        raise ValueError("temperature must be positive")
    n = z1.shape[0]
    if n < 1:
        raise ValueError("contrastive_loss needs at least one instance")
    if np.any(np.linalg.norm(z1.data, axis=1) == 0) or np.any(np.linalg.norm(z2.data, axis=1) == 0):
        raise ValueError("contrastive_loss: zero-norm latent row, cosine similarity undefined")
    u1, u2 = ad.normalize_rows(z1), ad.normalize_rows(z2)
    sim = (u1 @ u2.T) * (1.0 / tau)
    forward = _directional_infonce(sim, n)
    backward = _directional_infonce(sim.T, n)
    return (forward + backward) * 0.5


def contrastive_lower_bound(n: int, tau: float) -> float:
    """-log(e^{1/tau} / (e^{1/tau} + (n - 1) e^{-1/tau})), evaluated stably."""
    return float(np.log1p((n - 1) * np.exp(-2.0 / tau)))


def _combine(b1: Tensor, b2: Tensor, c: Tensor, lambda1: float, lambda2: float, tau: float | None) -> LossBreakdown:
    total = (b1 + b2) * lambda1 + c * lambda2
    return LossBreakdown(b1.item(), b2.item(), c.item(), total.item(), lambda1, lambda2, tau, loss=total)


def pcl_objective(
    out_t1: DenoiserOutput, out_t2: DenoiserOutput, y: np.ndarray, lambda1: float, lambda2: float, task: str
) -> LossBreakdown:
    """Two boundary terms plus the MSE self-consistency term between predictions."""
    b1 = boundary_loss(out_t1.y_hat, y, task, out_t1.log_probs)
    b2 = boundary_loss(out_t2.y_hat, y, task, out_t2.log_probs)
    return _combine(b1, b2, self_consistency_loss(out_t1.y_hat, out_t2.y_hat), lambda1, lambda2, None)


def gccm_objective(
    out_t1: DenoiserOutput,
    out_t2: DenoiserOutput,
    y: np.ndarray,
    lambda1: float,
    lambda2: float,
    tau: float,
    task: str,
    index: np.ndarray | None = None,
) -> LossBreakdown:
    """Two boundary terms plus contrastive consistency between latents.

    ``index`` selects the rows of the latents that form the contrastive
    batch (the same rows in both views); by default every row is used.
    """
    b1 = boundary_loss(out_t1.y_hat, y, task, out_t1.log_probs)
    b2 = boundary_loss(out_t2.y_hat, y, task, out_t2.log_probs)
    z1, z2 = out_t1.z, out_t2.z
    if index is not None:
        z1, z2 = ad.take_rows(z1, index), ad.take_rows(z2, index)
    return _combine(b1, b2, contrastive_loss(z1, z2, tau), lambda1, lambda2, tau)
