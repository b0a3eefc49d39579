"""Cross-modal contrastive loss, the SimCLR NT-Xent baseline and a scalar reference.

For a batch of N pairs ``(x_i, y_i)`` the cross-modal term for anchor ``x_i`` is

    l_ixy = -log( exp(s(x_i, y_i)/t)
                  / (sum_{k != i} exp(s(x_i, x_k)/t) + sum_k exp(s(x_i, y_k)/t)) )

with ``s`` the cosine similarity; ``l_iyx`` swaps the roles of ``x`` and ``y``
and the per-pair loss is ``l_i = l_ixy + l_iyx``. Note that the cross-modal
sum in the denominator includes the positive itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

__all__ = [
    "LossConfig",
    "LossInputError",
    "cosine_similarity_matrix",
    "multimodal_nce",
    "ntxent",
    "loss_oracle",
]


class LossInputError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.1
    reduction: str = "mean"

    def __post_init__(self):
        if not self.temperature > 0:
            raise LossInputError(f"temperature must be > 0, got {self.temperature}")
        if self.reduction not in ("mean", "sum"):
            raise LossInputError(f"unknown reduction {self.reduction!r}")


def _as_tensor(a) -> torch.Tensor:
    return a if isinstance(a, torch.Tensor) else torch.as_tensor(np.asarray(a))


def cosine_similarity_matrix(a, b) -> torch.Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    na, nb = a.norm(dim=1, keepdim=True), b.norm(dim=1, keepdim=True)
    if (na == 0).any() or (nb == 0).any():
        raise LossInputError("cosine similarity of a zero vector is undefined")
    return (a / na) @ (b / nb).T


def _check_pair(x, y):
    if x.ndim != 2 or x.shape != y.shape:
        raise LossInputError(f"embeddings must share an N x D shape, got {tuple(x.shape)} and {tuple(y.shape)}")
    if x.shape[0] == 0:
        raise LossInputError("empty batch")
    if not (torch.isfinite(x).all() and torch.isfinite(y).all()):
        raise LossInputError("non-finite embedding")


def _directional(sxx, sxy, tau):
    # Rows: anchors. Intra-modal self-similarity is excluded, cross-modal kept whole.
    n = sxx.shape[0]
    self_mask = torch.eye(n, dtype=torch.bool, device=sxx.device)
    intra = sxx.masked_fill(self_mask, float("-inf")) / tau
    logits = torch.cat([intra, sxy / tau], dim=1)
    return torch.logsumexp(logits, dim=1) - torch.diagonal(sxy) / tau


def multimodal_nce(x, y, cfg: LossConfig = LossConfig()):
    """Return ``(reduced_loss, per_pair_losses)`` for embedding batches ``x`` and ``y``."""
    x, y = _as_tensor(x), _as_tensor(y)
    _check_pair(x, y)
    sxy = cosine_similarity_matrix(x, y)
    sxx = cosine_similarity_matrix(x, x)
    syy = cosine_similarity_matrix(y, y)
    l_xy = _directional(sxx, sxy, cfg.temperature)
    l_yx = _directional(syy, sxy.T, cfg.temperature)
    per_pair = l_xy + l_yx
    loss = per_pair.mean() if cfg.reduction == "mean" else per_pair.sum()
    return loss, per_pair


def ntxent(z1, z2, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """SimCLR loss over the 2N views, averaged over all 2N anchors."""
    z1, z2 = _as_tensor(z1), _as_tensor(z2)
    _check_pair(z1, z2)
    n = z1.shape[0]
    z = torch.cat([z1, z2], dim=0)
    sim = cosine_similarity_matrix(z, z) / cfg.temperature
    sim = sim.masked_fill(torch.eye(2 * n, dtype=torch.bool, device=z.device), float("-inf"))
    target = torch.cat([torch.arange(n, 2 * n), torch.arange(0, n)]).to(z.device)
    per_anchor = torch.logsumexp(sim, dim=1) - sim[torch.arange(2 * n), target]
    return per_anchor.mean() if cfg.reduction == "mean" else per_anchor.sum()


def loss_oracle(x, y, cfg: LossConfig = LossConfig()) -> float:
    """Plain double-loop evaluation of the cross-modal loss, no stabilization."""
    xs = np.asarray(x.detach() if isinstance(x, torch.Tensor) else x, dtype=np.float64).tolist()
    ys = np.asarray(y.detach() if isinstance(y, torch.Tensor) else y, dtype=np.float64).tolist()
    if len(xs) == 0 or len(xs) != len(ys):
        raise LossInputError("batches must be nonempty and equally sized")
    tau = cfg.temperature

    def sim(u, v):
        dot = sum(a * b for a, b in zip(u, v))
        nu = math.sqrt(sum(a * a for a in u))
        nv = math.sqrt(sum(b * b for b in v))
        if nu == 0 or nv == 0:
            raise LossInputError("zero vector")
        return dot / (nu * nv)

    def term(a, b, i):
        num = math.exp(sim(a[i], b[i]) / tau)
        den = 0.0
        for k in range(len(a)):
            if k != i:
                den += math.exp(sim(a[i], a[k]) / tau)
        for k in range(len(b)):
            den += math.exp(sim(a[i], b[k]) / tau)
        return -math.log(num / den)

    total = 0.0
    for i in range(len(xs)):
        total += term(xs, ys, i) + term(ys, xs, i)
    return total / len(xs) if cfg.reduction == "mean" else total
