"""Training objectives.

All terms are sums over pixels (and over the batch); the trainer divides by
the batch size only. Keeping the spatial sum un-normalized matches the usual
ELBO bookkeeping where the reconstruction and KL terms share units.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import GaussianParams
from .tensor import ShapeError, Tensor


@dataclass
class LossBreakdown:
    total: Tensor
    recon: Tensor
    kl: Tensor

    def values(self) -> dict[str, float]:
        return {"total": self.total.item(), "recon": self.recon.item(),
                "kl": self.kl.item()}


def masked_l2(lidar: Tensor, dense: Tensor) -> Tensor:
    """Squared error summed over pixels where the sparse target has a return.

    The indicator comes from the target's own data (lidar > 0), so invalid
    pixels contribute exactly zero to both the value and the gradient.
    """
    if lidar.shape != dense.shape:
        raise ShapeError(f"lidar {lidar.shape} and dense {dense.shape} differ")
    indicator = Tensor((lidar.data > 0.0).astype(np.float64))
    diff = T.sub(lidar, dense)
    return T.sum_all(T.mul(indicator, T.mul(diff, diff)))


def mask_l2(target_mask: Tensor, predicted: Tensor) -> Tensor:
    """Full-image squared error against the binary sparsity mask."""
    if target_mask.shape != predicted.shape:
        raise ShapeError(f"target {target_mask.shape} and prediction "
                         f"{predicted.shape} differ")
    diff = T.sub(target_mask, predicted)
    return T.sum_all(T.mul(diff, diff))


def mask_bce(target_mask: Tensor, predicted: Tensor, eps: float = 1e-7) -> Tensor:
    """Binary cross-entropy alternative to the L2 mask loss.

    Kept behind a flag: in practice it sharpens the mask toward 0/1 too
    aggressively and the composed frames lose plausible scanline structure.
    """
    if target_mask.shape != predicted.shape:
        raise ShapeError(f"target {target_mask.shape} and prediction "
                         f"{predicted.shape} differ")
    p = np.clip(predicted.data, eps, 1.0 - eps)
    t = target_mask.data
    value = -(t * np.log(p) + (1.0 - t) * np.log1p(-p)).sum()

    # d/dp [-(t log p + (1-t) log(1-p))] = (p - t) / (p (1 - p))
    def backward(g):
        return ((predicted, g * (p - t) / (p * (1.0 - p))),)

    return T._make(np.full((1, 1, 1, 1), value), (predicted,), "mask_bce", backward)


def kl_gauss(posterior: GaussianParams, prior: GaussianParams) -> Tensor:
    """KL(posterior || prior) for diagonal Gaussians, summed over all cells.

    With s = log sigma, each cell contributes
        s_prior - s_post + (exp(2(s_post - s_prior)) + (mu_post - mu_prior)^2 * exp(-2 s_prior)) / 2 - 1/2
    which never exponentiates a log directly and so stays finite for any s.
    The variance ratio is a single exp of the log difference rather than a
    product of two exps: identical parameters then give exactly zero instead
    of an ulp-sized residue per cell.
    """
    if posterior.mu.shape != prior.mu.shape:
        raise ShapeError("posterior and prior grids differ")
    log_ratio = T.sub(prior.log_sigma, posterior.log_sigma)
    var_ratio = T.exp(T.scale(log_ratio, -2.0))
    inv_var_prior = T.exp(T.scale(prior.log_sigma, -2.0))
    dmu = T.sub(posterior.mu, prior.mu)
    quad = T.add(var_ratio, T.mul(T.mul(dmu, dmu), inv_var_prior))
    cell = T.add_const(T.add(log_ratio, T.scale(quad, 0.5)), -0.5)
    return T.sum_all(cell)


def depth_loss(lidar: Tensor, dense: Tensor, posterior: GaussianParams,
               prior: GaussianParams, kl_weight: float = 1e-4) -> LossBreakdown:
    """Masked reconstruction plus weighted KL for the dense-depth network."""
    recon = masked_l2(lidar, dense)
    kl = kl_gauss(posterior, prior)
    total = T.add(recon, T.scale(kl, kl_weight))
    return LossBreakdown(total, recon, kl)


def mask_loss(target_mask: Tensor, predicted: Tensor, posterior: GaussianParams,
              prior: GaussianParams, kl_weight: float = 1e-4,
              use_bce: bool = False) -> LossBreakdown:
    """Mask reconstruction (L2 by default, BCE behind the flag) plus weighted KL."""
    recon = mask_bce(target_mask, predicted) if use_bce else mask_l2(target_mask, predicted)
    kl = kl_gauss(posterior, prior)
    total = T.add(recon, T.scale(kl, kl_weight))
    return LossBreakdown(total, recon, kl)
