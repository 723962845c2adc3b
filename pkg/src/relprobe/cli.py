"""Command line entry point for the relational probing pipeline.

Subcommands cover the full experiment loop: synthetic data generation,
training, checkpoint evaluation, per-day graph export, finite-difference
verification and reference baselines. Everything is driven by a JSON
config file; unknown keys are rejected so that typos in sweep configs
fail loudly instead of silently falling back to defaults.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, gradcheck, load_checkpoint, save_checkpoint
from .encoders import load_articles, load_prices
from .gat import NodeBatch, init_gat, predict
from .graph_builder import ThresholdConfig, build_day_graph, export_graph
from .metrics import majority_baseline
from .relation_head import HeadVariant, apply_head, init_relation_head
from .synth import PlantedWorld, generate
from .trainer import (
    TrainConfig,
    build_dataset,
    evaluate_split,
    prepare_model,
    train,
    weighted_ce,
    write_log_csv,
)

log = logging.getLogger("relprobe")


class ConfigError(ValueError):
    """Raised when the experiment config is malformed."""


@dataclasses.dataclass
class ExperimentPaths:
    prices: str = ""
    articles: str = ""
    hidden_states: str | None = None
    checkpoint: str | None = None
    out: str = "runs"


@dataclasses.dataclass
class ExperimentConfig:
    seed: int = 13423
    paths: ExperimentPaths = dataclasses.field(default_factory=ExperimentPaths)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    world: PlantedWorld = dataclasses.field(default_factory=PlantedWorld)


def _build_section(cls, raw, where):
    """Instantiate a dataclass from a dict, rejecting unknown keys."""
    if not isinstance(raw, dict):
        raise ConfigError(f"config section '{where}' must be an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in '{where}': {', '.join(unknown)}")
    coerced = {}
    for key, value in raw.items():
        if isinstance(value, list):
            value = tuple(value)
        coerced[key] = value
    return cls(**coerced)


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("top-level config must be a JSON object")
    allowed = {"seed", "paths", "train", "world"}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    cfg = ExperimentConfig(seed=int(raw.get("seed", 13423)))
    cfg.paths = _build_section(ExperimentPaths, raw.get("paths", {}), "paths")
    cfg.train = _build_section(TrainConfig, raw.get("train", {}), "train")
    cfg.world = _build_section(PlantedWorld, raw.get("world", {}), "world")
    return cfg


def _run_dir(cfg: ExperimentConfig, subcommand, seed) -> Path:
    """Deterministic per-run directory: out/<subcommand>/seed-<seed>."""
    run = Path(cfg.paths.out) / subcommand / f"seed-{seed}"
    run.mkdir(parents=True, exist_ok=True)
    return run


def _write_json(path, payload):
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _train_config(cfg: ExperimentConfig, seed) -> TrainConfig:
    return dataclasses.replace(cfg.train, seed=seed)


def _load_splits(cfg: ExperimentConfig, tcfg: TrainConfig):
    for name in ("prices", "articles"):
        p = getattr(cfg.paths, name)
        if not p or not Path(p).exists():
            raise ConfigError(f"paths.{name} missing or does not exist: {p!r}")
    panel = load_prices(cfg.paths.prices)
    articles = load_articles(cfg.paths.articles)
    return build_dataset(panel, articles, tcfg)


def _restore_from_checkpoint(model, path):
    state = load_checkpoint(path)
    for name, p in model.named_params(trainable_only=False).items():
        if name not in state:
            raise ConfigError(f"checkpoint {path} is missing parameter '{name}'")
        p.data = np.array(state[name], dtype=p.data.dtype)


def _metrics_payload(model, splits, tcfg):
    out = {}
    for split_name, idx in (("val", splits.val), ("test", splits.test)):
        bundle, loss = evaluate_split(model, splits, idx)
        section = bundle.to_dict()
        section["loss"] = loss
        out[split_name] = section
    return out


# --- subcommands ---------------------------------------------------------------

def cmd_generate(cfg: ExperimentConfig, seed) -> dict:
    run = _run_dir(cfg, "generate", seed)
    data = generate(cfg.world, seed=seed, out_dir=run)
    log.info("wrote synthetic world to %s", run)
    return {"n_days": len(data.dates), "n_edges": len(data.truth_edges),
            "out": str(run)}


def cmd_train(cfg: ExperimentConfig, seed) -> dict:
    run = _run_dir(cfg, "train", seed)
    tcfg = _train_config(cfg, seed)
    splits = _load_splits(cfg, tcfg)
    result = train(tcfg, splits, hidden_state_dir=cfg.paths.hidden_states)
    save_checkpoint(run / "best.rpck", result.best_params)
    write_log_csv(run / "log.csv", result.log_rows)

    model = prepare_model(tcfg, splits, hidden_state_dir=cfg.paths.hidden_states)
    _restore_from_checkpoint(model, run / "best.rpck")
    payload = _metrics_payload(model, splits, tcfg)
    payload["best_lr"] = result.best_lr
    payload["best_epoch"] = result.best_epoch
    _write_json(run / "metrics.json", payload)
    log.info("best lr %g epoch %d val macro F1 %.4f", result.best_lr,
             result.best_epoch, result.best_val_macro_f1)
    return payload


def cmd_evaluate(cfg: ExperimentConfig, seed) -> dict:
    if not cfg.paths.checkpoint:
        raise ConfigError("evaluate requires paths.checkpoint")
    run = _run_dir(cfg, "evaluate", seed)
    tcfg = _train_config(cfg, seed)
    splits = _load_splits(cfg, tcfg)
    model = prepare_model(tcfg, splits, hidden_state_dir=cfg.paths.hidden_states)
    _restore_from_checkpoint(model, cfg.paths.checkpoint)
    payload = _metrics_payload(model, splits, tcfg)
    _write_json(run / "metrics.json", payload)
    return payload


def cmd_build_graphs(cfg: ExperimentConfig, seed) -> dict:
    run = _run_dir(cfg, "build-graphs", seed)
    tcfg = _train_config(cfg, seed)
    splits = _load_splits(cfg, tcfg)
    model = prepare_model(tcfg, splits, hidden_state_dir=cfg.paths.hidden_states)
    if cfg.paths.checkpoint:
        _restore_from_checkpoint(model, cfg.paths.checkpoint)
    graph_dir = run / "graphs"
    graph_dir.mkdir(exist_ok=True)
    n_edges = 0
    with ad.no_grad():
        for day in splits.days:
            graph = model.day_graph(day)
            n_edges += int(graph.adjacency.sum())
            export_graph(graph, graph_dir / f"{day.date}.csv",
                         tickers=splits.tickers)
    payload = {"n_days": len(splits.days), "n_edges": n_edges,
               "out": str(graph_dir)}
    _write_json(run / "metrics.json", payload)
    return payload


def cmd_baseline(cfg: ExperimentConfig, seed) -> dict:
    """Co-occurrence graph training plus the majority-class reference row."""
    run = _run_dir(cfg, "baseline", seed)
    tcfg = dataclasses.replace(_train_config(cfg, seed), baseline="cooccurrence")
    splits = _load_splits(cfg, tcfg)
    result = train(tcfg, splits)
    save_checkpoint(run / "best.rpck", result.best_params)
    write_log_csv(run / "log.csv", result.log_rows)
    model = prepare_model(tcfg, splits)
    _restore_from_checkpoint(model, run / "best.rpck")
    payload = {"cooccurrence": _metrics_payload(model, splits, tcfg)}

    test_labels = np.concatenate(
        [splits.days[i].labels[splits.days[i].labeled_mask]
         for i in splits.test])
    payload["majority"] = {"test": majority_baseline(test_labels).to_dict()}
    _write_json(run / "metrics.json", payload)
    return payload


def _gradcheck_cases():
    """Small-shape finite-difference checks covering every trainable path."""
    from . import encoders as enc
    from .encoders import Article
    from .trainer import LabeledDay

    rng = np.random.default_rng(5)
    cases = []

    encoder = enc.init_toy_encoder(vocab_size=12, d=6, l_max=8, rng=rng)
    article = Article(article_id="a", date="2020-01-01",
                      tokens=[1, 4, 2, 7], tickers=[0, 1])
    named = encoder.named()

    def f_encoder(*ts):
        p = enc.ToyEncoderParams(*ts)
        return enc.encode_article(p, article).states.sum()

    cases.append(("encoder", f_encoder, list(named.values()),
                  list(named.keys())))

    lstm = enc.init_lstm(p=3, d_p=4, rng=rng)
    windows = rng.standard_normal((2, 3, 3))
    lnamed = lstm.named()

    def f_lstm(*ts):
        p = enc.LSTMParams(*ts)
        return enc.encode_nodes(p, windows).sum()

    cases.append(("lstm", f_lstm, list(lnamed.values()), list(lnamed.keys())))

    for variant in HeadVariant:
        head = init_relation_head(n=4, d=6, d_p=5, rng=rng)
        h = Tensor(rng.standard_normal((5, 6)), requires_grad=True)
        hnamed = head.named()

        def f_head(*ts, _variant=variant):
            from .relation_head import RelationHeadParams
            p = RelationHeadParams(*ts[:-1])
            return apply_head(_variant, p, ts[-1], mentioned=[0, 2]).sum()

        cases.append((f"head.{variant.value}", f_head,
                      list(hnamed.values()) + [h],
                      list(hnamed.keys()) + ["h"]))

    interactions = [Tensor(rng.standard_normal((4, 4)), requires_grad=True)
                    for _ in range(2)]

    def f_graph(*ts):
        g = build_day_graph(list(ts), ThresholdConfig(tau=0.3))
        return g.weights.sum()

    cases.append(("graph", f_graph, interactions, ["i0", "i1"]))

    gat = init_gat(d_in=4, hidden=4, n_layers=2, rng=rng)
    adjacency = rng.random((3, 3)) > 0.5
    np.fill_diagonal(adjacency, False)
    weights = Tensor(rng.random((3, 3)) * adjacency, requires_grad=True)
    feats = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    gnamed = gat.named()
    day = LabeledDay(date="2020-01-02", windows=np.zeros((3, 1, 3)),
                     labels=np.array([0, 1, 2]),
                     labeled_mask=np.array([True, True, True]), articles=[])

    def f_gat_loss(*ts):
        from .gat import GATLayer, GATParams
        from .graph_builder import DailyGraph
        layers = [GATLayer(w=ts[0], a=ts[1]), GATLayer(w=ts[2], a=ts[3])]
        p = GATParams(layers=layers, w_out=ts[4], b_out=ts[5])
        graph = DailyGraph(date="", attr=ts[7], adjacency=adjacency,
                           weights=ts[7], n_articles=1)
        probs = predict(p, NodeBatch(features=ts[6], graph=graph))
        return weighted_ce(probs, day.labels, day.labeled_mask, (5, 1, 5))

    cases.append(("gat+loss", f_gat_loss,
                  list(gnamed.values()) + [feats, weights],
                  list(gnamed.keys()) + ["features", "weights"]))
    return cases


def cmd_gradcheck(cfg: ExperimentConfig, seed) -> dict:
    run = _run_dir(cfg, "gradcheck", seed)
    report_lines = []
    all_passed = True
    for name, f, tensors, names in _gradcheck_cases():
        report = gradcheck(f, tensors, step=1e-5, tol=1e-4, names=names)
        status = "PASS" if report.passed else "FAIL"
        worst = max((e.max_rel_err for e in report.entries), default=0.0)
        line = f"{status} {name} max_rel_err={worst:.3e}"
        report_lines.append(line)
        print(line)
        if not report.passed:
            all_passed = False
            report_lines.append(str(report))
    (run / "gradcheck.txt").write_text("\n".join(report_lines) + "\n")
    if not all_passed:
        raise SystemExit("gradcheck failed; see report")
    return {"passed": True, "n_cases": len(report_lines)}


# --- aggregation ------------------------------------------------------------------

def _mean_payloads(payloads):
    """Element-wise mean over identically shaped nested metric dicts."""
    first = payloads[0]
    if isinstance(first, dict):
        return {k: _mean_payloads([p[k] for p in payloads]) for k in first}
    if isinstance(first, (int, float)) and not isinstance(first, bool):
        return float(np.mean(payloads))
    if isinstance(first, list):
        return np.mean(np.asarray(payloads, dtype=np.float64), axis=0).tolist()
    if all(p == first for p in payloads):
        return first
    return list(payloads)


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "build-graphs": cmd_build_graphs,
    "gradcheck": cmd_gradcheck,
    "baseline": cmd_baseline,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="relprobe",
        description="relational probing pipeline over news and prices")
    parser.add_argument("subcommand", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="JSON experiment config")
    parser.add_argument("--runs", type=int, default=1,
                        help="repeat with seeds seed..seed+K-1 and average")
    parser.add_argument("--out", default=None,
                        help="override the config output directory")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = os.environ.get("RELPROBE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.out is not None:
            cfg.paths.out = args.out
        if args.runs < 1:
            raise ConfigError("--runs must be >= 1")
        command = COMMANDS[args.subcommand]
        payloads = []
        for i in range(args.runs):
            payloads.append(command(cfg, cfg.seed + i))
        if args.runs > 1:
            aggregate = _mean_payloads(payloads)
            agg_path = (Path(cfg.paths.out) / args.subcommand
                        / f"aggregate-seed-{cfg.seed}-runs-{args.runs}.json")
            _write_json(agg_path, aggregate)
            print(json.dumps(aggregate, sort_keys=True))
        else:
            print(json.dumps(payloads[0], sort_keys=True))
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
