"""Training objectives: cross-view InfoNCE, neighbour-supervised BCE and DEC alignment."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndcore as nd
from .graphio import PairGraph

NS_CLAMP = 1e-7


@dataclass
class LossBreakdown:
    l_infonce: float
    l_ns: float
    l_clu: float
    total: float
    gamma: float

    @property
    def l_r(self) -> float:
        return self.l_infonce + self.l_ns

    def as_dict(self) -> dict:
        return {"l_infonce": self.l_infonce, "l_ns": self.l_ns, "l_clu": self.l_clu, "total": self.total}


def similarity(a, b) -> nd.Tensor:
    """θ(i, j) = â_i · b̂_j for unit-row embeddings."""
    return nd.as_tensor(a) @ nd.transpose(b)


def _infonce_direction(anchor: nd.Tensor, other: nd.Tensor, temperature: float) -> nd.Tensor:
    n = anchor.shape[0]
    off_diag = 1.0 - np.eye(n)
    inv_t = 1.0 / temperature
    # θ ≤ 1, so subtracting 1/τ before exp is an exact, overflow-free shift
    cross = similarity(anchor, other) * inv_t - inv_t
    within = similarity(anchor, anchor) * inv_t - inv_t
    denom = nd.sum(nd.exp(cross), axis=1) + nd.sum(nd.exp(within) * off_diag, axis=1)
    positive = nd.sum(cross * np.eye(n), axis=1)
    return nd.sum(nd.log(denom) - positive)


def infonce(z1, z2, temperature: float = 1.0) -> nd.Tensor:
    z1, z2 = nd.as_tensor(z1), nd.as_tensor(z2)
    n = z1.shape[0]
    total = _infonce_direction(z1, z2, temperature) + _infonce_direction(z2, z1, temperature)
    return total * (1.0 / (2 * n))


def neighbor_supervised(z1, z2, pairs: PairGraph | np.ndarray) -> nd.Tensor:
    a = pairs.dense() if isinstance(pairs, PairGraph) else np.asarray(pairs, dtype=np.float64)
    s = similarity(z1, z2)
    n = s.shape[0]
    prob = nd.clamp((s + 1.0) * 0.5, NS_CLAMP, 1.0 - NS_CLAMP)
    bce = nd.log(prob) * (-a) - nd.log(1.0 - prob) * (1.0 - a)
    return nd.sum(bce) * (1.0 / (n * n))


def soft_assignment(z, centers) -> nd.Tensor:
    """Student-t (ν = 1) kernel between rows and centers, normalised per row."""
    z, centers = nd.as_tensor(z), nd.as_tensor(centers)
    diff = nd.unsqueeze(z, 1) - nd.unsqueeze(centers, 0)  # n x k x d
    kernel = nd.reciprocal(nd.sum(nd.square(diff), axis=2) + 1.0)
    return kernel / nd.sum(kernel, axis=1, keepdims=True)


def target_distribution(q) -> np.ndarray:
    q = q.values if isinstance(q, nd.Tensor) else np.asarray(q, dtype=np.float64)
    weight = q ** 2 / q.sum(axis=0)
    return weight / weight.sum(axis=1, keepdims=True)


def kl_divergence(p: np.ndarray, q: nd.Tensor) -> nd.Tensor:
    """Mean over rows of KL(p_i || q_i); p is a constant."""
    n = p.shape[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return (nd.Tensor(plogp.sum()) - nd.sum(nd.log(q) * p)) * (1.0 / n)


def clustering_alignment(states, centers, p_cache) -> nd.Tensor:
    """½ Σ_views KL(P_e || Q_e), with Q_e from the view's fused embedding and centers."""
    terms = [kl_divergence(p, soft_assignment(s.Z_G, c)) for s, c, p in zip(states, centers, p_cache)]
    return (terms[0] + terms[1]) * 0.5


@dataclass
class LossSwitches:
    infonce: bool = True
    ns: bool = True
    clu: bool = True


def total_loss(states, pairs: PairGraph | np.ndarray, centers, gamma: float, p_cache,
               temperature: float = 1.0, switches: LossSwitches | None = None):
    """Returns (differentiable total, LossBreakdown)."""
    switches = switches or LossSwitches()
    s1, s2 = states
    l_inf = infonce(s1.Z_hat, s2.Z_hat, temperature)
    l_ns = neighbor_supervised(s1.Z_hat, s2.Z_hat, pairs)
    l_clu = clustering_alignment(states, centers, p_cache)
    total = nd.Tensor(0.0)
    if switches.infonce:
        total = total + l_inf
    if switches.ns:
        total = total + l_ns
    if switches.clu:
        total = total + l_clu * gamma
    breakdown = LossBreakdown(l_inf.item(), l_ns.item(), l_clu.item(), total.item(), gamma)
    return total, breakdown
