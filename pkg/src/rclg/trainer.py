"""Training loop, ablation variants and the experiment drivers built on top of it."""
from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import ndcore as nd
from .clusterers import final_assignment, refresh_centers, refresh_due
from .graphio import (AttributedGraph, AugmentationSpec, PairGraph, adjacency_pair_graph, augment,
                      betweenness_ranking, knn_pair_graph, normalized_adjacency, random_pair_graph,
                      remove_top_betweenness)
from .losses import LossBreakdown, LossSwitches, soft_assignment, target_distribution, total_loss
from .metrics import MetricsReport, evaluate
from .model import Hyperparams, ModelParams, forward

log = logging.getLogger(__name__)

VARIANTS = ("full", "no-attn", "no-local-global", "no-global", "no-lr", "no-infonce", "no-ns")
PAIR_STRATEGIES = ("adjacency", "random", "knn")
CLUSTER_ALGOS = ("kmeans", "spectral")
SENSITIVITY_PARAMS = ("alpha", "beta", "l")
COMPARISON_AXES = ("augmentation", "pairs", "cluster_algo")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    hp: Hyperparams = field(default_factory=Hyperparams)
    ablation: str = "full"
    pair_strategy: str = "adjacency"
    augmentation: AugmentationSpec = field(default_factory=AugmentationSpec)
    cluster_algo: str = "kmeans"
    seed: int = 0
    eval_every: int = 25
    d_in: int | None = None
    knn_k: int = 10
    nmi_normalizer: str = "arithmetic"

    def __post_init__(self):
        if self.ablation not in VARIANTS:
            raise ValueError(f"ablation must be one of {VARIANTS}")
        if self.pair_strategy not in PAIR_STRATEGIES:
            raise ValueError(f"pair_strategy must be one of {PAIR_STRATEGIES}")
        if self.cluster_algo not in CLUSTER_ALGOS:
            raise ValueError(f"cluster_algo must be one of {CLUSTER_ALGOS}")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.eval_every < 0:
            raise ValueError("eval_every must be >= 0")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["hp"] = asdict(self.hp)
        out["augmentation"] = asdict(self.augmentation)
        return out


@dataclass
class EpochLog:
    epoch: int
    losses: LossBreakdown
    metrics: MetricsReport | None = None
    wall_time_ms: float = 0.0


@dataclass
class Pipeline:
    local_mode: str = "attention"
    global_mode: str = "attention"
    switches: LossSwitches = field(default_factory=LossSwitches)


@dataclass
class TrainResult:
    params: ModelParams
    logs: list[EpochLog]
    report: MetricsReport | None
    embedding: np.ndarray
    assignment: np.ndarray

    def __iter__(self):
        return iter((self.params, self.logs, self.report))


def apply_ablation(variant: str) -> Pipeline:
    if variant == "full":
        return Pipeline()
    if variant == "no-attn":
        return Pipeline("mean", "uniform")
    if variant == "no-local-global":
        return Pipeline("mean", "off")
    if variant == "no-global":
        return Pipeline("attention", "off")
    if variant == "no-lr":
        return Pipeline(switches=LossSwitches(infonce=False, ns=False))
    if variant == "no-infonce":
        return Pipeline(switches=LossSwitches(infonce=False))
    if variant == "no-ns":
        return Pipeline(switches=LossSwitches(ns=False))
    raise ValueError(f"unknown ablation variant {variant!r}; expected one of {VARIANTS}")


class Adam:
    def __init__(self, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def reset(self, name: str) -> None:
        for state in (self.m, self.v, self.t):
            state.pop(name, None)

    def step(self, params: ModelParams, grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            t = self.t.get(name, 0) + 1
            m = self.b1 * self.m.get(name, 0.0) + (1 - self.b1) * g
            v = self.b2 * self.v.get(name, 0.0) + (1 - self.b2) * g * g
            self.m[name], self.v[name], self.t[name] = m, v, t
            m_hat = m / (1 - self.b1 ** t)
            v_hat = v / (1 - self.b2 ** t)
            params[name] = params[name].values - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _pair_graph(g: AttributedGraph, cfg: TrainConfig, rng: nd.RngStream) -> PairGraph:
    if cfg.pair_strategy == "random":
        return random_pair_graph(g.n, g.num_edges, rng.child("pairs").generator())
    return adjacency_pair_graph(g)


def _view2_adjacency(g: AttributedGraph, spec: AugmentationSpec, rng: nd.RngStream, epoch: int, cached):
    if spec.strategy == "noise":
        return None
    if spec.strategy == "diffusion":
        if cached is None:
            cached = normalized_adjacency(augment(g, spec, rng.generator(0)))
        return cached
    return normalized_adjacency(augment(g, spec, rng.generator(epoch)))


def _mean_embedding(states) -> np.ndarray:
    return (states[0].Z_G.values + states[1].Z_G.values) / 2.0


def evaluate_model(g: AttributedGraph, params: ModelParams, cfg: TrainConfig, pipeline: Pipeline,
                   key: int = 0):
    """Noise-free forward pass, k-means readout and (when labels exist) metrics."""
    states = forward(g, params, cfg.hp, None, 0, local_mode=pipeline.local_mode,
                     global_mode=pipeline.global_mode)
    assign = final_assignment(states, cfg.hp, nd.RngStream(cfg.seed, "final"), key=key)
    report = None
    if g.labels is not None:
        report = evaluate(assign.y, g.labels, cfg.nmi_normalizer)
    return states, assign, report


def train(g: AttributedGraph, cfg: TrainConfig, on_epoch=None) -> TrainResult:
    hp = cfg.hp
    if cfg.augmentation.strategy != "noise" and hp.alpha != 0:
        hp = hp.replace(alpha=0.0)
        cfg = replace(cfg, hp=hp)
    if g.n < hp.k:
        raise ValueError(f"graph has {g.n} nodes but k={hp.k}")
    pipeline = apply_ablation(cfg.ablation)
    root = nd.RngStream(cfg.seed, "root")
    noise_rng, cluster_rng, aug_rng = root.child("noise"), root.child("clustering"), root.child("augmentation")

    params = ModelParams.init(g.features.shape[1], hp, root.child("init").generator())
    opt = Adam(hp.lr)
    pairs = _pair_graph(g, cfg, root)
    p_cache = None
    diffusion_adj = None
    logs: list[EpochLog] = []

    def run_forward(epoch, adj2):
        return forward(g, params, hp, noise_rng, epoch, adj2=adj2, local_mode=pipeline.local_mode,
                       global_mode=pipeline.global_mode)

    if hp.epochs == 0:
        states = run_forward(0, None)
        refresh_centers(states, params, hp, 0, cfg.cluster_algo, cluster_rng)

    for epoch in range(hp.epochs):
        start = time.perf_counter()
        try:
            adj2 = _view2_adjacency(g, cfg.augmentation, aug_rng, epoch, diffusion_adj)
            if cfg.augmentation.strategy == "diffusion":
                diffusion_adj = adj2
            refreshed = refresh_due(epoch, hp.T)
            if refreshed:
                states = run_forward(epoch, adj2)
                refresh_centers(states, params, hp, epoch, cfg.cluster_algo, cluster_rng)
                opt.reset("C1")
                opt.reset("C2")
                if cfg.pair_strategy == "knn":
                    pairs = knn_pair_graph(_mean_embedding(states), min(cfg.knn_k, g.n - 1))
            states = run_forward(epoch, adj2)
            centers = (params["C1"], params["C2"])
            if refreshed:
                p_cache = [target_distribution(soft_assignment(s.Z_G.values, c.values))
                           for s, c in zip(states, centers)]
            loss, breakdown = total_loss(states, pairs, centers, hp.gamma, p_cache, hp.temperature,
                                         pipeline.switches)
        except nd.NonFiniteError as err:
            raise TrainingError(f"epoch {epoch}: non-finite values in {err.op}") from err
        for name in ("l_infonce", "l_ns", "l_clu", "total"):
            if not np.isfinite(getattr(breakdown, name)):
                raise TrainingError(f"epoch {epoch}: non-finite loss component {name}")

        names = params.names()
        grads = dict(zip(names, nd.gradient(loss, params.values())))
        if hp.freeze_centers:
            grads.pop("C1")
            grads.pop("C2")
        opt.step(params, grads)

        report = None
        if g.labels is not None and cfg.eval_every and (epoch + 1) % cfg.eval_every == 0:
            _, _, report = evaluate_model(g, params, cfg, pipeline, key=epoch + 1)
        elapsed = max((time.perf_counter() - start) * 1000.0, 1e-6)
        entry = EpochLog(epoch, breakdown, report, elapsed)
        logs.append(entry)
        if on_epoch is not None:
            on_epoch(entry)

    states, assign, report = evaluate_model(g, params, cfg, pipeline)
    return TrainResult(params, logs, report, _mean_embedding(states), assign.y)


# --
# Experiment drivers


@dataclass
class RunSpec:
    label: str
    graph: AttributedGraph
    cfg: TrainConfig


@dataclass
class RunOutcome:
    label: str
    cfg: TrainConfig
    result: TrainResult


def _execute(spec: RunSpec) -> RunOutcome:
    return RunOutcome(spec.label, spec.cfg, train(spec.graph, spec.cfg))


def run_many(specs: list[RunSpec], jobs: int = 1) -> list[RunOutcome]:
    """Run independent trainings; results keep the order of ``specs``."""
    if jobs <= 1 or len(specs) <= 1:
        return [_execute(s) for s in specs]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_execute, specs))


def betweenness_removals(g: AttributedGraph, counts, recompute: bool = False) -> list[AttributedGraph]:
    """Graphs with the top-m betweenness edges removed, scores computed once on ``g``."""
    if max(counts, default=0) > g.num_edges:
        raise ValueError(f"cannot remove {max(counts)} edges from a graph with {g.num_edges}")
    if recompute:
        return [remove_top_betweenness(g, m, recompute=True) for m in counts]
    ranked = betweenness_ranking(g)
    out = []
    for m in counts:
        drop = set(ranked[:m])
        out.append(g.with_edges([e for e in map(tuple, g.edges.tolist()) if e not in drop]))
    return out


def run_robustness(g: AttributedGraph, cfg: TrainConfig, removal_counts, jobs: int = 1,
                   recompute: bool = False) -> list[tuple[int, MetricsReport]]:
    graphs = betweenness_removals(g, removal_counts, recompute)
    specs = [RunSpec(f"removed-{m}", h, cfg) for m, h in zip(removal_counts, graphs)]
    return [(m, o.result.report) for m, o in zip(removal_counts, run_many(specs, jobs))]


def sensitivity_config(cfg: TrainConfig, param: str, value) -> TrainConfig:
    if param not in SENSITIVITY_PARAMS:
        raise ValueError(f"param must be one of {SENSITIVITY_PARAMS}")
    value = int(value) if param == "l" else float(value)
    seed = nd.derive_seed(cfg.seed, param, value)
    return replace(cfg, hp=cfg.hp.replace(**{param: value}), seed=seed)


def run_sensitivity(g: AttributedGraph, cfg: TrainConfig, param: str, values, jobs: int = 1):
    specs = [RunSpec(f"{param}={v}", g, sensitivity_config(cfg, param, v)) for v in values]
    return [(v, o.result.report) for v, o in zip(values, run_many(specs, jobs))]


def comparison_config(cfg: TrainConfig, axis: str, option: str) -> TrainConfig:
    if axis == "augmentation":
        return replace(cfg, augmentation=replace(cfg.augmentation, strategy=option))
    if axis == "pairs":
        if option not in PAIR_STRATEGIES:
            raise ValueError(f"pair option must be one of {PAIR_STRATEGIES}")
        return replace(cfg, pair_strategy=option)
    if axis == "cluster_algo":
        if option not in CLUSTER_ALGOS:
            raise ValueError(f"cluster_algo option must be one of {CLUSTER_ALGOS}")
        return replace(cfg, cluster_algo=option)
    raise ValueError(f"axis must be one of {COMPARISON_AXES}")


def run_comparison(g: AttributedGraph, cfg: TrainConfig, axis: str, options, jobs: int = 1):
    specs = [RunSpec(opt, g, comparison_config(cfg, axis, opt)) for opt in options]
    return [(opt, o.result.report) for opt, o in zip(options, run_many(specs, jobs))]


def run_ablation(g: AttributedGraph, cfg: TrainConfig, variants=VARIANTS, jobs: int = 1):
    specs = [RunSpec(v, g, replace(cfg, ablation=v)) for v in variants]
    return [(v, o.result.report) for v, o in zip(variants, run_many(specs, jobs))]
