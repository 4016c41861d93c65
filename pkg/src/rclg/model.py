"""Dual-view noisy encoder with local (multi-hop) and global (prototype) attention fusion."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp

from . import ndcore as nd
from .graphio import AttributedGraph, normalized_adjacency, propagate


@dataclass
class Hyperparams:
    alpha: float = 0.01
    beta: float = 0.2
    gamma: float = 10.0
    l: int = 6
    hidden: int = 256
    heads: int = 4
    T: int = 5
    lr: float = 5e-4
    epochs: int = 500
    k: int = 7
    temperature: float = 1.0
    encoder_depth: int = 1
    freeze_centers: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        checks = [
            (self.alpha >= 0, "alpha must be >= 0"),
            (0.0 <= self.beta <= 1.0, "beta must be in [0,1]"),
            (self.gamma >= 0, "gamma must be >= 0"),
            (self.l >= 1, "l must be >= 1"),
            (self.hidden >= 1, "hidden must be >= 1"),
            (self.heads >= 1 and self.hidden % self.heads == 0, "hidden must be divisible by heads"),
            (self.T >= 1, "T must be >= 1"),
            (self.lr > 0, "lr must be > 0"),
            (self.epochs >= 0, "epochs must be >= 0"),
            (self.k >= 1, "k must be >= 1"),
            (self.temperature > 0, "temperature must be > 0"),
            (self.encoder_depth >= 1, "encoder_depth must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def replace(self, **changes) -> Hyperparams:
        return Hyperparams(**{**asdict(self), **changes})


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class ModelParams:
    """Named trainable tensors. Iteration order is fixed for reproducible optimisation."""

    def __init__(self, tensors: dict[str, nd.Tensor]):
        self.tensors = tensors

    @classmethod
    def init(cls, d_in: int, hp: Hyperparams, rng: np.random.Generator) -> ModelParams:
        t: dict[str, nd.Tensor] = {}
        h = hp.hidden
        for view in (1, 2):
            for layer in range(hp.encoder_depth):
                fan_in = d_in if layer == 0 else h
                t[f"enc{view}.W{layer}"] = nd.Tensor(glorot(rng, fan_in, h), requires_grad=True)
                t[f"enc{view}.b{layer}"] = nd.Tensor(np.zeros(h), requires_grad=True)
        t["W_qL"] = nd.Tensor(glorot(rng, h, h), requires_grad=True)
        t["lnL.gain"] = nd.Tensor(np.ones(h), requires_grad=True)
        t["lnL.bias"] = nd.Tensor(np.zeros(h), requires_grad=True)
        t["W_qG"] = nd.Tensor(glorot(rng, h, h), requires_grad=True)
        t["lnG.gain"] = nd.Tensor(np.ones(h), requires_grad=True)
        t["lnG.bias"] = nd.Tensor(np.zeros(h), requires_grad=True)
        # filled by the first center refresh
        t["C1"] = nd.Tensor(np.zeros((hp.k, h)), requires_grad=True)
        t["C2"] = nd.Tensor(np.zeros((hp.k, h)), requires_grad=True)
        return cls(t)

    def __getitem__(self, name: str) -> nd.Tensor:
        return self.tensors[name]

    def __setitem__(self, name: str, values) -> None:
        self.tensors[name] = nd.Tensor(np.array(values, dtype=np.float64), requires_grad=True)

    def names(self) -> list[str]:
        return list(self.tensors)

    def values(self) -> list[nd.Tensor]:
        return list(self.tensors.values())

    def centers(self, view: int) -> nd.Tensor:
        return self.tensors[f"C{view}"]

    def copy(self) -> ModelParams:
        return ModelParams({k: nd.Tensor(v.values.copy(), requires_grad=True)
                            for k, v in self.tensors.items()})

    def groups(self) -> dict[str, list[str]]:
        """Parameter groups as reported by gradient checks."""
        out: dict[str, list[str]] = {}
        for name in self.tensors:
            out.setdefault(name.split(".")[0] if name.startswith("enc") else name, []).append(name)
        return out

    def to_npz(self, path) -> None:
        np.savez(path, **{k: v.values for k, v in self.tensors.items()})

    @classmethod
    def from_npz(cls, path) -> ModelParams:
        with np.load(path) as data:
            return cls({k: nd.Tensor(data[k], requires_grad=True) for k in data.files})


@dataclass
class ViewState:
    Z: nd.Tensor
    H: list[nd.Tensor]
    Z_L: nd.Tensor
    Z_G: nd.Tensor
    Z_hat: nd.Tensor
    attn_local: np.ndarray
    attn_global: np.ndarray | None
    zero_rows: int = 0
    S_shape: tuple = field(default=())


def noise_draw(rng: nd.RngStream, epoch: int, view: int, shape) -> np.ndarray:
    return rng.generator(epoch, view).standard_normal(shape)


def encode_view(X, view: int, params: ModelParams, hp: Hyperparams, rng: nd.RngStream | None,
                epoch: int = 0) -> nd.Tensor:
    x = nd.as_tensor(X)
    w0 = params[f"enc{view}.W0"]
    if x.shape[1] != w0.shape[0]:
        raise nd.ShapeError(f"encode_view: features have {x.shape[1]} columns, encoder expects {w0.shape[0]}")
    z = x @ w0 + params[f"enc{view}.b0"]
    for layer in range(1, hp.encoder_depth):
        z = nd.relu(z) @ params[f"enc{view}.W{layer}"] + params[f"enc{view}.b{layer}"]
    if hp.alpha > 0 and rng is not None:
        z = z + hp.alpha * noise_draw(rng, epoch, view, z.shape)
    return z


def local_fusion(Z, adj: sp.spmatrix, params: ModelParams, hp: Hyperparams, mode: str = "attention"):
    """Attention over the propagated layers Â^t Z, t = 1..l; returns (Z_L, weights, H)."""
    Z = nd.as_tensor(Z)
    H = propagate(adj, Z, hp.l)
    S = nd.stack(H, axis=1)  # n x l x hidden
    n = Z.shape[0]
    if mode == "attention":
        pooled = nd.max(S, axis=1)
        q = pooled @ params["W_qL"]
        scores = nd.sum(nd.unsqueeze(q, 1) * S, axis=2) * (1.0 / math.sqrt(hp.hidden))
        weights = nd.softmax_rows(scores)
    elif mode == "mean":
        weights = nd.Tensor(np.full((n, hp.l), 1.0 / hp.l))
    else:
        raise ValueError(f"unknown local fusion mode {mode!r}")
    fused = nd.sum(nd.unsqueeze(weights, 2) * S, axis=1)
    z_l = nd.layer_norm(fused + Z, params["lnL.gain"], params["lnL.bias"])
    return z_l, weights.values, H


def global_fusion(Z_L, centers, params: ModelParams, hp: Hyperparams, mode: str = "attention"):
    """Multi-head attention from nodes to cluster prototypes; returns (Z_G, weights)."""
    Z_L, centers = nd.as_tensor(Z_L), nd.as_tensor(centers)
    if centers.shape != (hp.k, hp.hidden):
        raise nd.ShapeError(f"global_fusion: centers have shape {centers.shape}, expected {(hp.k, hp.hidden)}")
    n, h, dh = Z_L.shape[0], hp.heads, hp.head_dim
    kv = nd.swapaxes(nd.reshape(centers, (hp.k, h, dh)), 0, 1)  # h x k x dh
    if mode == "attention":
        q = nd.swapaxes(nd.reshape(Z_L @ params["W_qG"], (n, h, dh)), 0, 1)  # h x n x dh
        scores = nd.matmul(q, nd.swapaxes(kv, 1, 2)) * (1.0 / math.sqrt(dh))  # h x n x k
        weights = nd.softmax_rows(scores)
    elif mode == "uniform":
        weights = nd.Tensor(np.full((h, n, hp.k), 1.0 / hp.k))
    else:
        raise ValueError(f"unknown global fusion mode {mode!r}")
    heads_out = nd.matmul(weights, kv)  # h x n x dh
    g = nd.reshape(nd.swapaxes(heads_out, 0, 1), (n, hp.hidden))
    z_g = nd.layer_norm(g * hp.beta + Z_L * (1.0 - hp.beta), params["lnG.gain"], params["lnG.bias"])
    return z_g, np.swapaxes(weights.values, 0, 1)


def forward_view(X, adj, view: int, params: ModelParams, hp: Hyperparams, rng, epoch: int,
                 local_mode: str = "attention", global_mode: str = "attention") -> ViewState:
    z = encode_view(X, view, params, hp, rng, epoch)
    z_l, attn_l, H = local_fusion(z, adj, params, hp, mode=local_mode)
    if global_mode == "off":
        z_g, attn_g = z_l, None
    else:
        z_g, attn_g = global_fusion(z_l, params.centers(view), params, hp, mode=global_mode)
    z_hat, zero_rows = nd.l2_normalize_rows(z_g)
    return ViewState(z, H, z_l, z_g, z_hat, attn_l, attn_g, zero_rows, (z.shape[0], hp.l, hp.hidden))


def forward(g: AttributedGraph, params: ModelParams, hp: Hyperparams, rng: nd.RngStream | None,
            epoch: int = 0, adj2: sp.spmatrix | None = None, local_mode: str = "attention",
            global_mode: str = "attention") -> tuple[ViewState, ViewState]:
    """Both views over the same features; view 2 may use an alternative adjacency."""
    adj = normalized_adjacency(g)
    X = nd.Tensor(g.features)
    s1 = forward_view(X, adj, 1, params, hp, rng, epoch, local_mode, global_mode)
    s2 = forward_view(X, adj if adj2 is None else adj2, 2, params, hp, rng, epoch, local_mode, global_mode)
    return s1, s2
