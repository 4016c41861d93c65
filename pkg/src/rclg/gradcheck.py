"""Finite-difference verification of the full training objective's gradients."""
from __future__ import annotations

import numpy as np

from . import ndcore as nd
from .clusterers import kmeans
from .graphio import AttributedGraph, adjacency_pair_graph
from .losses import soft_assignment, target_distribution, total_loss
from .model import Hyperparams, ModelParams, forward

FD_STEP = 1e-5


def random_instance(seed: int = 0, n: int = 8, d_in: int = 5, hidden: int = 6, l: int = 2, k: int = 2,
                    heads: int = 2):
    rng = np.random.default_rng(seed)
    iu = np.triu_indices(n, 1)
    mask = rng.random(len(iu[0])) < 0.4
    g = AttributedGraph(n, np.stack([iu[0][mask], iu[1][mask]], 1), rng.standard_normal((n, d_in)))
    hp = Hyperparams(hidden=hidden, l=l, k=k, heads=heads, epochs=1)
    params = ModelParams.init(d_in, hp, rng)
    for view in (1, 2):
        params[f"C{view}"] = rng.standard_normal((k, hidden))
    # non-trivial LayerNorm affines exercise the gain/bias paths
    for name in ("lnL.gain", "lnL.bias", "lnG.gain", "lnG.bias"):
        params[name] = params[name].values + 0.3 * rng.standard_normal(hidden)
    return g, hp, params


def objective(g, hp, params, pairs, p_cache, rng) -> nd.Tensor:
    states = forward(g, params, hp, rng, epoch=0)
    loss, _ = total_loss(states, pairs, (params["C1"], params["C2"]), hp.gamma, p_cache, hp.temperature)
    return loss


def check_gradients(g: AttributedGraph, hp: Hyperparams, params: ModelParams, seed: int = 0,
                    step: float = FD_STEP) -> dict[str, float]:
    """Max relative error between autodiff and central differences, per parameter group.

    Relative error of an entry is |a - f| / max(|a|, |f|, 1e-8), where a is the
    analytic and f the finite-difference derivative; entries whose derivative
    is numerically zero on both sides (|a|, |f| < 1e-10) are skipped.
    """
    rng = nd.RngStream(seed, "noise")
    pairs = adjacency_pair_graph(g)
    states = forward(g, params, hp, rng, epoch=0)
    p_cache = [target_distribution(soft_assignment(s.Z_G.values, params[f"C{v}"].values))
               for v, s in zip((1, 2), states)]

    loss = objective(g, hp, params, pairs, p_cache, rng)
    names = params.names()
    analytic = dict(zip(names, nd.gradient(loss, params.values())))

    errors: dict[str, float] = {}
    for group, members in params.groups().items():
        worst = 0.0
        for name in members:
            base = params[name].values.copy()
            for idx in np.ndindex(base.shape):
                shifted = []
                for sign in (1.0, -1.0):
                    trial = base.copy()
                    trial[idx] += sign * step
                    params[name] = trial
                    shifted.append(objective(g, hp, params, pairs, p_cache, rng).item())
                params[name] = base
                fd = (shifted[0] - shifted[1]) / (2 * step)
                a = analytic[name][idx]
                if max(abs(a), abs(fd)) < 1e-10:
                    continue
                worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), 1e-8))
        errors[group] = worst
    return errors


def kmeans_centers(z: np.ndarray, k: int, seed: int = 0) -> np.ndarray:
    centers, _ = kmeans(z, k, np.random.default_rng(seed))
    return centers.centers
