"""Command-line entry point: ``rclg <subcommand> [flags]``.

Exit codes: 0 success, 1 invalid input, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import tempfile
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import ndcore as nd
from .gradcheck import check_gradients, random_instance
from .graphio import (AugmentationSpec, DatasetError, dataset_checksum, generate_sbm, load_dataset,
                      write_dataset)
from .model import Hyperparams, ModelParams, forward
from .trainer import (CLUSTER_ALGOS, COMPARISON_AXES, PAIR_STRATEGIES, SENSITIVITY_PARAMS, VARIANTS,
                      RunSpec, TrainConfig, TrainingError, betweenness_removals, comparison_config,
                      run_many, sensitivity_config, train)

log = logging.getLogger("rclg")

GRADCHECK_TOL = 1e-4


class ValidationError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


# (flag, config key, type, domain, help); defaults come from TrainConfig/Hyperparams
HP_FLAGS = [
    ("--alpha", "alpha", float, ">= 0", "noise coefficient"),
    ("--beta", "beta", float, "[0,1]", "global fusion coefficient"),
    ("--gamma", "gamma", float, ">= 0", "clustering-loss weight"),
    ("--l", "l", int, ">= 1", "propagation steps"),
    ("--hidden", "hidden", int, ">= 1, divisible by --heads", "embedding width"),
    ("--heads", "heads", int, ">= 1", "global attention heads"),
    ("--T", "T", int, ">= 1", "center refresh interval (epochs)"),
    ("--lr", "lr", float, "> 0", "Adam learning rate"),
    ("--epochs", "epochs", int, ">= 0", "training epochs"),
    ("--k", "k", int, ">= 1", "cluster count (default: number of classes in the dataset)"),
    ("--temperature", "temperature", float, "> 0", "InfoNCE temperature"),
    ("--encoder-depth", "encoder_depth", int, ">= 1", "affine layers per view encoder"),
]
CFG_FLAGS = [
    ("--ablation", "ablation", str, "|".join(VARIANTS), "model variant"),
    ("--pairs", "pair_strategy", str, "|".join(PAIR_STRATEGIES), "pair graph for the neighbour loss"),
    ("--cluster-algo", "cluster_algo", str, "|".join(CLUSTER_ALGOS), "prototype clustering algorithm"),
    ("--eval-every", "eval_every", int, ">= 0 (0 disables)", "metric evaluation interval"),
    ("--knn-k", "knn_k", int, ">= 1", "neighbours for --pairs knn"),
    ("--nmi-normalizer", "nmi_normalizer", str, "arithmetic|geometric|min|max", "NMI normaliser"),
]
AUG_FLAGS = [
    ("--augmentation", "strategy", str, "noise|drop|add|diffusion", "view-2 augmentation"),
    ("--drop-frac", "drop_frac", float, "[0,1]", "edge drop fraction"),
    ("--add-frac", "add_frac", float, "[0,1]", "edge add fraction"),
    ("--teleport", "teleport", float, "(0,1)", "PPR restart probability"),
    ("--diffusion-topk", "diffusion_topk", int, ">= 1", "diffusion entries kept per row"),
]


def _defaults() -> dict:
    cfg = TrainConfig()
    return {**asdict(cfg.hp), **{k: v for k, v in asdict(cfg).items() if k not in ("hp", "augmentation")},
            **asdict(cfg.augmentation)}


def _add_training_flags(p: argparse.ArgumentParser) -> None:
    defaults = _defaults()
    p.add_argument("--data", required=True, help="dataset directory (meta.json, edges.tsv, features.tsv)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="flat JSON file of config fields; flags override it")
    p.add_argument("--seed", type=int, help="RNG seed, >= 0 (default: $RCLG_SEED or 0)")
    for group in (HP_FLAGS, CFG_FLAGS, AUG_FLAGS):
        for flag, key, typ, domain, text in group:
            default = "dataset classes" if key == "k" else defaults[key]
            p.add_argument(flag, dest=key, type=typ, help=f"{text}; domain {domain} (default: {default})")
    p.add_argument("--freeze-centers", dest="freeze_centers", action="store_const", const=True,
                   help="keep prototypes fixed between refreshes (default: False)")
    p.add_argument("--row-normalize", action="store_true", help="row-normalise features at load (default: False)")
    p.add_argument("--save-embeddings", action="store_true", help="also write embeddings.csv (default: False)")
    p.add_argument("--save-params", action="store_true", help="also write params.npz (default: False)")
    p.add_argument("--jobs", type=int, default=1, help="parallel runs for multi-run commands, >= 1 (default: 1)")


def build_parser() -> Parser:
    parser = Parser(prog="rclg", description="Contrastive graph clustering with local/global attention fusion.")
    parser.add_argument("--version", action="version", version=f"rclg {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=Parser)

    p = sub.add_parser("train", help="train once and report metrics")
    _add_training_flags(p)

    p = sub.add_parser("ablate", help="train each model variant")
    _add_training_flags(p)
    p.add_argument("--variants", default=",".join(VARIANTS), help=f"comma list from {','.join(VARIANTS)}")

    p = sub.add_parser("robustness", help="retrain after removing top-betweenness edges")
    _add_training_flags(p)
    p.add_argument("--removals", help="comma list of edge counts to remove")
    p.add_argument("--fractions", help="comma list of edge fractions in [0,1] (alternative to --removals)")
    p.add_argument("--recompute", action="store_true", help="recompute betweenness after every removal")

    p = sub.add_parser("sweep", help="one run per value of a hyperparameter")
    _add_training_flags(p)
    p.add_argument("--param", required=True, choices=SENSITIVITY_PARAMS, help="alpha|beta|l")
    p.add_argument("--values", required=True, help="comma list of values")

    p = sub.add_parser("compare", help="augmentation / pair strategy / clusterer comparison")
    _add_training_flags(p)
    p.add_argument("--axis", required=True, choices=COMPARISON_AXES, help="|".join(COMPARISON_AXES))
    p.add_argument("--options", required=True, help="comma list of options for the axis")

    p = sub.add_parser("export-embeddings", help="write view-averaged embeddings as CSV")
    _add_training_flags(p)
    p.add_argument("--params", help="params.npz from a previous run (default: train first)")

    p = sub.add_parser("gradcheck", help="finite-difference check of the full objective")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="RNG seed (default: $RCLG_SEED or 0)")
    p.add_argument("--nodes", type=int, default=8, help="graph size, >= 2 (default: 8)")
    p.add_argument("--d-in", type=int, default=5, help="input feature width (default: 5)")
    p.add_argument("--hidden", type=int, default=6, help="embedding width (default: 6)")
    p.add_argument("--l", type=int, default=2, help="propagation steps (default: 2)")
    p.add_argument("--k", type=int, default=2, help="cluster count (default: 2)")
    p.add_argument("--heads", type=int, default=2, help="attention heads (default: 2)")

    p = sub.add_parser("gen-sbm", help="write a stochastic block model dataset directory")
    p.add_argument("--out", required=True, help="dataset directory to create")
    p.add_argument("--seed", type=int, help="RNG seed (default: $RCLG_SEED or 0)")
    p.add_argument("--blocks", default="30,30,30", help="comma list of block sizes (default: 30,30,30)")
    p.add_argument("--p-in", type=float, default=0.3, help="within-block edge probability in [0,1] (default: 0.3)")
    p.add_argument("--p-out", type=float, default=0.02, help="cross-block edge probability in [0,1] (default: 0.02)")
    p.add_argument("--feature-dim", type=int, default=16, help="feature width, >= 1 (default: 16)")
    p.add_argument("--feature-sep", type=float, default=1.5, help="block mean offset (default: 1.5)")
    return parser


# --
# Config resolution


def _split(text: str, cast=str) -> list:
    try:
        return [cast(x.strip()) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ValidationError(f"could not parse list {text!r}") from None


def resolve_seed(args) -> int:
    if args.seed is not None:
        seed = args.seed
    else:
        env = os.environ.get("RCLG_SEED")
        try:
            seed = int(env) if env else 0
        except ValueError:
            raise ValidationError(f"RCLG_SEED must be an integer, got {env!r}") from None
    if seed < 0:
        raise ValidationError("--seed must be >= 0")
    return seed


def resolve_config(args, graph) -> TrainConfig:
    values = _defaults()
    file_values = {}
    if args.config:
        try:
            file_values = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as err:
            raise ValidationError(f"--config: cannot read {args.config}: {err}") from None
        if not isinstance(file_values, dict):
            raise ValidationError("--config must hold a flat JSON object")
        unknown = set(file_values) - set(values)
        if unknown:
            raise ValidationError(f"--config: unknown field(s) {sorted(unknown)}")
        values.update(file_values)
    for group in (HP_FLAGS, CFG_FLAGS, AUG_FLAGS):
        for _, key, *_ in group:
            if getattr(args, key, None) is not None:
                values[key] = getattr(args, key)
    if args.freeze_centers:
        values["freeze_centers"] = True
    if args.seed is not None or "seed" not in file_values:
        values["seed"] = resolve_seed(args)
    if args.k is None and "k" not in file_values:
        if graph.labels is None:
            raise ValidationError("--k is required for datasets without labels.tsv")
        values["k"] = graph.num_classes
    hp_keys = asdict(Hyperparams()).keys()
    aug_keys = asdict(AugmentationSpec()).keys()
    cfg_keys = asdict(TrainConfig()).keys() - {"hp", "augmentation", "d_in"}
    try:
        hp = Hyperparams(**{k: values[k] for k in hp_keys})
        aug = AugmentationSpec(**{k: values[k] for k in aug_keys})
        cfg = TrainConfig(hp=hp, augmentation=aug, **{k: values[k] for k in cfg_keys})
    except (TypeError, ValueError) as err:
        raise ValidationError(str(err)) from None
    if cfg.nmi_normalizer not in ("arithmetic", "geometric", "min", "max"):
        raise ValidationError("nmi_normalizer must be one of arithmetic|geometric|min|max")
    if graph.n < hp.k:
        raise ValidationError(f"k={hp.k} exceeds the number of nodes ({graph.n})")
    if args.jobs < 1:
        raise ValidationError("--jobs must be >= 1")
    return replace(cfg, d_in=int(graph.features.shape[1]))


def config_hash(cfg: TrainConfig) -> str:
    return hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()


def make_manifest(command: str, cfg: TrainConfig | None, args, dataset: dict | None, extra=None) -> dict:
    flags = {k: v for k, v in sorted(vars(args).items()) if k not in ("out", "command")}
    manifest = {
        "command": command,
        "flags": flags,
        "config": cfg.to_dict() if cfg else None,
        "config_hash": config_hash(cfg) if cfg else None,
        "seed": cfg.seed if cfg else resolve_seed(args),
        "dataset": dataset,
        "epoch_log": "epochs.csv",
        "version": __version__,
    }
    if extra:
        manifest.update(extra)
    return manifest


# --
# Output


def atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _csv(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def report_dict(report) -> dict | None:
    if report is None:
        return None
    out = report.as_dict()
    out["matching"] = {str(k): int(v) for k, v in sorted(report.matching.items())}
    out["confusion"] = report.confusion.tolist() if report.confusion is not None else None
    return out


def epochs_csv(logs) -> str:
    rows = []
    for entry in logs:
        m = entry.metrics
        rows.append([entry.epoch, repr(entry.losses.l_infonce), repr(entry.losses.l_ns),
                     repr(entry.losses.l_clu), repr(entry.losses.total),
                     f"{m.acc:.6f}" if m else "", f"{m.nmi:.6f}" if m else "", f"{m.f1:.6f}" if m else ""])
    return _csv(["epoch", "l_infonce", "l_ns", "l_clu", "total", "acc", "nmi", "f1"], rows)


def runtime_csv(logs) -> str:
    return _csv(["epoch", "wall_time_ms"], [[e.epoch, f"{e.wall_time_ms:.3f}"] for e in logs])


def embeddings_csv(z: np.ndarray) -> str:
    header = ["node"] + [f"z{j}" for j in range(z.shape[1])]
    return _csv(header, [[i] + [f"{x:.9g}" for x in row] for i, row in enumerate(z)])


def emit_results(manifest: dict, result, out_dir: Path, save_embeddings: bool = False,
                 save_params: bool = False) -> list[Path]:
    out_dir = Path(out_dir)
    metrics = report_dict(result.report)
    files = {
        "manifest.json": _json({**manifest, "metrics": metrics}),
        "metrics.json": _json({"manifest": manifest, "metrics": metrics,
                               "nmi_normalizer": manifest["config"]["nmi_normalizer"]}),
        "epochs.csv": epochs_csv(result.logs),
        "runtime.csv": runtime_csv(result.logs),
    }
    if save_embeddings:
        files["embeddings.csv"] = embeddings_csv(result.embedding)
    written = []
    for name, text in files.items():
        atomic_write(out_dir / name, text)
        written.append(out_dir / name)
    if save_params:
        fd, tmp = tempfile.mkstemp(dir=out_dir, suffix=".npz")
        os.close(fd)
        result.params.to_npz(tmp)
        os.replace(tmp, out_dir / "params.npz")
        written.append(out_dir / "params.npz")
    return written


def emit_table(manifest: dict, key: str, outcomes, out_dir: Path) -> None:
    rows, table = [], []
    for value, outcome in outcomes:
        r = outcome.result.report
        label = outcome.label
        sub = out_dir / _safe(label)
        emit_results({**manifest, "run": label, "config": outcome.cfg.to_dict(),
                      "config_hash": config_hash(outcome.cfg), "seed": outcome.cfg.seed}, outcome.result, sub)
        metrics = r.as_dict() if r else {"acc": None, "nmi": None, "f1": None}
        table.append({key: value, "run": label, **metrics})
        rows.append([value, label] + [("" if metrics[m] is None else f"{metrics[m]:.6f}") for m in ("acc", "nmi", "f1")])
    atomic_write(out_dir / "summary.csv", _csv([key, "run", "acc", "nmi", "f1"], rows))
    atomic_write(out_dir / "metrics.json", _json({"manifest": manifest, "results": table}))
    logs = [f"{_safe(t['run'])}/epochs.csv" for t in table]
    atomic_write(out_dir / "epochs.csv", _csv(["run", "epoch_log"], [[t["run"], p] for t, p in zip(table, logs)]))
    atomic_write(out_dir / "manifest.json", _json({**manifest, "results": table, "runs": logs}))


def _safe(label: str) -> str:
    return "".join(c if c.isalnum() or c in "-_.=" else "_" for c in str(label))


def _print_report(label: str, report) -> None:
    if report is None:
        print(f"{label}: no labels, metrics unavailable")
    else:
        print(f"{label}: ACC {100 * report.acc:.2f}%  NMI {100 * report.nmi:.2f}%  F1 {100 * report.f1:.2f}%")


# --
# Commands


def _load(args):
    try:
        graph = load_dataset(args.data, row_normalize=args.row_normalize)
    except (DatasetError, OSError, KeyError, json.JSONDecodeError) as err:
        raise ValidationError(f"--data: {err}") from None
    info = {"name": graph.name, "checksum": dataset_checksum(args.data), "num_nodes": graph.n,
            "num_edges": graph.num_edges}
    return graph, info


def cmd_train(args) -> int:
    graph, info = _load(args)
    cfg = resolve_config(args, graph)
    result = train(graph, cfg)
    emit_results(make_manifest("train", cfg, args, info), result, Path(args.out),
                 args.save_embeddings, args.save_params)
    _print_report(graph.name, result.report)
    return 0


def cmd_ablate(args) -> int:
    graph, info = _load(args)
    cfg = resolve_config(args, graph)
    variants = _split(args.variants)
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise ValidationError(f"--variants: unknown {bad}; valid {','.join(VARIANTS)}")
    specs = [RunSpec(v, graph, replace(cfg, ablation=v)) for v in variants]
    outcomes = run_many(specs, args.jobs)
    emit_table(make_manifest("ablate", cfg, args, info), "variant", zip(variants, outcomes), Path(args.out))
    for v, o in zip(variants, outcomes):
        _print_report(v, o.result.report)
    return 0


def cmd_robustness(args) -> int:
    graph, info = _load(args)
    cfg = resolve_config(args, graph)
    if bool(args.removals) == bool(args.fractions):
        raise ValidationError("give exactly one of --removals or --fractions")
    if args.removals:
        counts = _split(args.removals, int)
    else:
        fracs = _split(args.fractions, float)
        if any(not 0.0 <= f <= 1.0 for f in fracs):
            raise ValidationError("--fractions must be in [0,1]")
        counts = [int(np.floor(f * graph.num_edges)) for f in fracs]
    if any(m < 0 or m > graph.num_edges for m in counts):
        raise ValidationError(f"--removals must be in [0, {graph.num_edges}]")
    graphs = betweenness_removals(graph, counts, args.recompute)
    specs = [RunSpec(f"removed-{m}", h, cfg) for m, h in zip(counts, graphs)]
    outcomes = run_many(specs, args.jobs)
    emit_table(make_manifest("robustness", cfg, args, info), "removed", zip(counts, outcomes), Path(args.out))
    for m, o in zip(counts, outcomes):
        _print_report(f"removed {m}", o.result.report)
    return 0


def cmd_sweep(args) -> int:
    graph, info = _load(args)
    cfg = resolve_config(args, graph)
    values = _split(args.values, int if args.param == "l" else float)
    try:
        specs = [RunSpec(f"{args.param}={v}", graph, sensitivity_config(cfg, args.param, v)) for v in values]
    except ValueError as err:
        raise ValidationError(f"--values: {err}") from None
    outcomes = run_many(specs, args.jobs)
    emit_table(make_manifest("sweep", cfg, args, info), args.param, zip(values, outcomes), Path(args.out))
    for v, o in zip(values, outcomes):
        _print_report(f"{args.param}={v}", o.result.report)
    return 0


def cmd_compare(args) -> int:
    graph, info = _load(args)
    cfg = resolve_config(args, graph)
    options = _split(args.options)
    try:
        specs = [RunSpec(opt, graph, comparison_config(cfg, args.axis, opt)) for opt in options]
    except ValueError as err:
        raise ValidationError(f"--options: {err}") from None
    outcomes = run_many(specs, args.jobs)
    emit_table(make_manifest("compare", cfg, args, info), args.axis, zip(options, outcomes), Path(args.out))
    for opt, o in zip(options, outcomes):
        _print_report(opt, o.result.report)
    return 0


def cmd_export(args) -> int:
    graph, info = _load(args)
    cfg = resolve_config(args, graph)
    manifest = make_manifest("export-embeddings", cfg, args, info)
    if args.params:
        try:
            params = ModelParams.from_npz(args.params)
            states = forward(graph, params, cfg.hp, None, 0)
        except (OSError, KeyError, ValueError) as err:
            raise ValidationError(f"--params: {err}") from None
        z = (states[0].Z_G.values + states[1].Z_G.values) / 2.0
    else:
        result = train(graph, cfg)
        emit_results(manifest, result, Path(args.out))
        z = result.embedding
    atomic_write(Path(args.out) / "embeddings.csv", embeddings_csv(z))
    if args.params:
        atomic_write(Path(args.out) / "manifest.json", _json(manifest))
    print(f"wrote {len(z)} x {z.shape[1]} embeddings")
    return 0


def cmd_gradcheck(args) -> int:
    seed = resolve_seed(args)
    if args.nodes < 2 or args.k < 1 or args.k > args.nodes:
        raise ValidationError("--nodes must be >= 2 and --k in [1, nodes]")
    try:
        g, hp, params = random_instance(seed, args.nodes, args.d_in, args.hidden, args.l, args.k, args.heads)
    except ValueError as err:
        raise ValidationError(str(err)) from None
    errors = check_gradients(g, hp, params, seed=seed)
    ok = all(e < GRADCHECK_TOL for e in errors.values())
    payload = {"manifest": make_manifest("gradcheck", None, args, None), "step": 1e-5, "tolerance": GRADCHECK_TOL,
               "max_relative_error": {k: float(v) for k, v in errors.items()}, "passed": ok}
    atomic_write(Path(args.out) / "gradcheck.json", _json(payload))
    for k, v in errors.items():
        print(f"{k:10s} {v:.3e}")
    return 0 if ok else 2


def cmd_gen_sbm(args) -> int:
    seed = resolve_seed(args)
    blocks = _split(args.blocks, int)
    if not blocks or any(b < 1 for b in blocks):
        raise ValidationError("--blocks must be positive integers")
    if not (0 <= args.p_in <= 1 and 0 <= args.p_out <= 1):
        raise ValidationError("--p-in and --p-out must be in [0,1]")
    if args.feature_dim < 1:
        raise ValidationError("--feature-dim must be >= 1")
    g = generate_sbm(blocks, args.p_in, args.p_out, args.feature_dim, args.feature_sep,
                     nd.RngStream(seed, "sbm").generator(), name=f"sbm-{seed}")
    write_dataset(g, args.out)
    print(f"wrote {g.n} nodes, {g.num_edges} edges to {args.out}")
    return 0


COMMANDS = {
    "train": cmd_train, "ablate": cmd_ablate, "robustness": cmd_robustness, "sweep": cmd_sweep,
    "compare": cmd_compare, "export-embeddings": cmd_export, "gradcheck": cmd_gradcheck, "gen-sbm": cmd_gen_sbm,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help()
            return 1
        return COMMANDS[args.command](args)
    except ValidationError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (TrainingError, OSError, RuntimeError, FloatingPointError) as err:
        print(f"runtime failure: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
