"""Experiment orchestration CLI.

Subcommands: generate | train | extract | evaluate | run. Exit codes:
0 success, 1 usage or config error, 2 runtime error, 3 timeout. Every
artifact carries the config hash; evaluate refuses to mix hashes without
--force. Reports write CSV tables with figures rendered next to them.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np

from . import attribution as attrib
from . import baselines, metrics, report, sim
from .autodiff import EXACT, lrp_epsilon
from .graphs import LaggedGraph, dumps_canonical
from .model import (ConfigError, ModelConfig, NetworkPredictor, TrainConfig,
                    load_checkpoint, new_model, save_checkpoint)
from .timeouts import StageTimeout
from .train import DivergenceError, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_TIMEOUT = 3

CONFIG_VERSION = 1

SIM_DEFAULTS = {
    "p": 10, "L": 5, "expected_in_degree": 3.0, "T": 50_000,
    "mechanism": "linear",
    "noise": {"family": "gaussian", "variance_mode": "equal", "sigma2": 1.0,
              "var_range": [0.5, 5.0], "student_dof": 5.0},
    "segments": 1, "drift_mode": "resample", "rewire_fraction": 0.2,
    "transition_prob": 0.3, "variable_lag": False, "n_latent": 0, "burn_in": 200,
    "graph_sampling": "exact_in_degree",
}
MODEL_DEFAULTS = {"backbone": "transformer", "d_model": 64, "n_heads": 4,
                  "n_layers": 4, "use_domain_embedding": False}
TRAIN_DEFAULTS = {"lr": 1e-3, "batch_size": 256, "epochs": 3, "weight_decay": 0.0,
                  "max_steps": None}
ATTR_DEFAULTS = {"mode": "lrp", "epsilon": 1e-6, "aggregation": "mean_abs_relevance",
                 "sample_budget": 2000, "stat": "scores"}
BASELINE_DEFAULTS = {"pairwise_granger": True, "multivariate_granger": True,
                     "random_guess": True, "alpha": 0.05, "bonferroni": False}
EVAL_DEFAULTS = {"regime_mode": "per_regime"}


class UsageError(ValueError):
    pass


class ArtifactMismatch(RuntimeError):
    pass


def _merge(defaults: dict, given: dict, section: str) -> dict:
    out = dict(defaults)
    for k, v in given.items():
        if k not in defaults:
            raise UsageError(f"unknown key {k!r} in config section {section!r}")
        out[k] = v
    return out


class ExperimentConfig:
    def __init__(self, raw: dict):
        if not isinstance(raw, dict):
            raise UsageError("config must be a JSON object")
        if raw.get("version") != CONFIG_VERSION:
            raise UsageError(f"config version must be {CONFIG_VERSION}")
        self.name = raw.get("name", "experiment")
        self.sim = _merge(SIM_DEFAULTS, raw.get("sim", {}), "sim")
        self.sim["noise"] = _merge(SIM_DEFAULTS["noise"], self.sim.get("noise", {}), "sim.noise")
        self.model = _merge(MODEL_DEFAULTS, raw.get("model", {}), "model")
        self.train = _merge(TRAIN_DEFAULTS, raw.get("train", {}), "train")
        self.attribution = _merge(ATTR_DEFAULTS, raw.get("attribution", {}), "attribution")
        self.binarize_rule = raw.get("binarize", {}).get("rule", "topk_row=3")
        self.baselines = _merge(BASELINE_DEFAULTS, raw.get("baselines", {}), "baselines")
        self.eval = _merge(EVAL_DEFAULTS, raw.get("eval", {}), "eval")
        self.seeds = list(raw.get("seeds", [0, 1, 2]))
        if not self.seeds:
            raise UsageError("config needs a non-empty seeds list")
        if self.attribution["stat"] not in ("scores", "rank_mean", "rank_mean_over_std"):
            raise UsageError(f"unknown attribution stat {self.attribution['stat']!r}")
        attrib.parse_rule(self.binarize_rule)  # validate early
        self.resolved = {
            "version": CONFIG_VERSION, "name": self.name, "sim": self.sim,
            "model": self.model, "train": self.train, "attribution": self.attribution,
            "binarize": {"rule": self.binarize_rule}, "baselines": self.baselines,
            "eval": self.eval, "seeds": self.seeds,
        }
        self.hash = hashlib.sha256(
            dumps_canonical(self.resolved).encode()).hexdigest()[:16]

    def noise_spec(self) -> sim.NoiseSpec:
        n = self.sim["noise"]
        return sim.NoiseSpec(family=n["family"], variance_mode=n["variance_mode"],
                             sigma2=n["sigma2"], var_range=tuple(n["var_range"]),
                             student_dof=n["student_dof"])

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            p=self.sim["p"], L=self.sim["L"], backbone=self.model["backbone"],
            d_model=self.model["d_model"], n_heads=self.model["n_heads"],
            n_layers=self.model["n_layers"],
            use_domain_embedding=self.model["use_domain_embedding"],
            n_domains=self.sim["segments"],
        )

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(lr=self.train["lr"], batch_size=self.train["batch_size"],
                           epochs=self.train["epochs"], weight_decay=self.train["weight_decay"],
                           max_steps=self.train["max_steps"], seed=seed)

    def backward_mode(self):
        if self.attribution["mode"] == "lrp":
            return lrp_epsilon(self.attribution["epsilon"])
        if self.attribution["mode"] == "exact":
            return EXACT
        raise UsageError(f"unknown attribution mode {self.attribution['mode']!r}")


def load_config(path_or_name: str) -> ExperimentConfig:
    path = Path(path_or_name)
    if path.exists():
        text = path.read_text()
    else:
        pkg_file = resources.files("lagcause.configs").joinpath(path_or_name + ".json")
        if not pkg_file.is_file():
            raise UsageError(f"config {path_or_name!r} is neither a file nor a preset")
        text = pkg_file.read_text()
    try:
        return ExperimentConfig(json.loads(text))
    except json.JSONDecodeError as exc:
        raise UsageError(f"config is not valid JSON: {exc}") from exc


def preset_names() -> list[str]:
    files = resources.files("lagcause.configs")
    return sorted(f.name[:-5] for f in files.iterdir() if f.name.endswith(".json"))


# ---------------------------------------------------------------------------
# Stages


def _split_lengths(T: int, segments: int) -> list[int]:
    base, rem = divmod(T, segments)
    return [base + (1 if k < rem else 0) for k in range(segments)]


def build_schedule(cfg: ExperimentConfig, rng: np.random.Generator) -> sim.RegimeSchedule:
    s = cfg.sim
    p, L, T = s["p"], s["L"], s["T"]
    lengths = _split_lengths(T, s["segments"])
    schedule = sim.sample_schedule(
        p, L, s["expected_in_degree"], s["mechanism"], lengths, rng,
        drift_mode=s["drift_mode"], rewire_fraction=s["rewire_fraction"],
        transition_prob=s["transition_prob"], variable_lag=s["variable_lag"],
        sampling=s["graph_sampling"])
    if s["mechanism"] == "linear":
        for seg in schedule.segments:
            seg.graph = sim.linear_weight_graph(seg.graph, seg.mechanisms)
    if s["n_latent"]:
        schedule = sim.add_latents(schedule, s["n_latent"], rng)
    return schedule


def _write_graph(graph: LaggedGraph, path: Path, config_hash: str):
    doc = graph.to_dict()
    doc["config_hash"] = config_hash
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_canonical(doc))


def stage_generate(cfg: ExperimentConfig, seed: int, out: Path) -> sim.TimeSeriesDataset:
    rng = np.random.default_rng(seed)
    schedule = build_schedule(cfg, rng)
    ds = sim.simulate(schedule, cfg.noise_spec(), cfg.sim["T"],
                      burn_in=cfg.sim["burn_in"], rng=rng, seed=seed)
    out.mkdir(parents=True, exist_ok=True)
    bin_path, meta_path = sim.save_dataset(ds, out / "series.bin")
    meta = json.loads(meta_path.read_text())
    meta["config_hash"] = cfg.hash
    meta_path.write_text(dumps_canonical(meta))
    _write_graph(schedule.union_graph(), out / "truth.json", cfg.hash)
    if len(schedule.segments) > 1:
        for k, seg in enumerate(schedule.segments):
            _write_graph(seg.graph, out / f"truth_regime{k}.json", cfg.hash)
    return ds


def stage_train(cfg: ExperimentConfig, seed: int, ds: sim.TimeSeriesDataset,
                out: Path, deadline: float | None = None):
    model = new_model(cfg.model_config(), seed=seed)
    tc = cfg.train_config(seed)
    try:
        log = train(model, ds, tc, deadline=deadline)
    except DivergenceError as exc:
        if exc.log is not None:  # leave the loss trace for post-mortems
            out.mkdir(parents=True, exist_ok=True)
            exc.log.save_csv(out / "training_log.csv")
        raise
    save_checkpoint(model, out / "checkpoint.bin", train_config=tc, seed=seed,
                    extra_meta={"config_hash": cfg.hash, "stopped": log.stopped})
    log.save_csv(out / "training_log.csv")
    report.save_loss_curve(log.steps, log.losses, out / "loss_curve.png")
    return model, log


def stage_extract(cfg: ExperimentConfig, model, ds: sim.TimeSeriesDataset, out: Path,
                  seed: int, figures: bool = True,
                  with_rank_stats: bool = False, with_interventions: bool = False,
                  with_attention: bool = False, deadline: float | None = None):
    predictor = NetworkPredictor(model)
    mode = cfg.backward_mode()
    rule = attrib.parse_rule(cfg.binarize_rule)
    budget = cfg.attribution["sample_budget"]
    agg = cfg.attribution["aggregation"]
    out.mkdir(parents=True, exist_ok=True)

    scores = attrib.aggregate(predictor, ds, mode=mode, aggregation=agg,
                              sample_budget=budget, seed=seed, deadline=deadline)
    scores.meta = dict(scores.meta or {}, config_hash=cfg.hash)
    scores.save(out / "scores.json")
    stat_tensor = scores.scores
    if cfg.attribution["stat"] != "scores" or with_rank_stats:
        rs = attrib.rank_stats(predictor, ds, sample_budget=budget, seed=seed, mode=mode)
        rs_doc = {k: [float(x) for x in v.ravel()] for k, v in rs.items()}
        rs_doc["dims"] = list(rs["mean_rank"].shape)
        rs_doc["config_hash"] = cfg.hash
        (out / "rank_stats.json").write_text(dumps_canonical(rs_doc))
        if cfg.attribution["stat"] == "rank_mean":
            stat_tensor = rs["mean_rank"]
        elif cfg.attribution["stat"] == "rank_mean_over_std":
            stat_tensor = rs["mean_over_std"]
        if figures:
            truth = ds.schedule.union_graph()
            report.save_rank_uncertainty(rs, truth, out / "rank_uncertainty.png")
    pred = attrib.binarize(stat_tensor, rule)
    _write_graph(pred, out / "graph_pred.json", cfg.hash)

    per_regime_preds = None
    if len(ds.schedule.segments) > 1:
        per_regime_preds = []
        for k in range(len(ds.schedule.segments)):
            sc_k = attrib.aggregate(predictor, ds, mode=mode, aggregation=agg,
                                    sample_budget=budget, seed=seed, regime=k)
            g_k = attrib.binarize(sc_k, rule)
            _write_graph(g_k, out / f"graph_pred_regime{k}.json", cfg.hash)
            per_regime_preds.append(g_k)

    if with_interventions:
        effect = attrib.intervention_effect(predictor, ds, delta=1.0,
                                            sample_budget=min(budget, 500), seed=seed)
        doc = {"dims": list(effect.shape), "data": [float(x) for x in effect.ravel()],
               "delta": 1.0, "config_hash": cfg.hash}
        (out / "intervention_effect.json").write_text(dumps_canonical(doc))
    if with_attention and cfg.model["backbone"] == "transformer":
        att = attrib.raw_attention_scores(predictor, ds, sample_budget=budget, seed=seed)
        att.meta = dict(att.meta or {}, config_hash=cfg.hash)
        att.save(out / "scores_attention.json")
        _write_graph(attrib.binarize(att, rule), out / "graph_pred_attention.json", cfg.hash)
    if figures:
        truth = ds.schedule.union_graph()
        report.save_score_heatmap(scores, truth, out / "scores_heatmap.png")
        report.save_edge_strength_histogram(scores, out / "edge_hist.csv",
                                            out / "edge_hist.png")
    return scores, pred, per_regime_preds


def _check_hashes(docs: list[dict], force: bool):
    hashes = {d["config_hash"] for d in docs if isinstance(d, dict) and "config_hash" in d}
    if len(hashes) > 1 and not force:
        raise ArtifactMismatch(
            f"artifacts carry different config hashes {sorted(hashes)}; rerun with --force to override")


def stage_evaluate(pred_path: Path, truth_path: Path, out: Path, force: bool = False) -> metrics.MetricsReport:
    for path in (pred_path, truth_path):
        if not Path(path).exists():
            raise FileNotFoundError(f"input file not found: {path}")
    pred_doc = json.loads(Path(pred_path).read_text())
    truth_doc = json.loads(Path(truth_path).read_text())
    _check_hashes([pred_doc, truth_doc], force)
    pred = LaggedGraph.from_dict(pred_doc)
    truth = LaggedGraph.from_dict(truth_doc)
    rep = metrics.structural_metrics(pred, truth,
                                     meta={"pred": str(pred_path), "truth": str(truth_path)})
    out.mkdir(parents=True, exist_ok=True)
    rep.save(out / "metrics.json")
    return rep


# ---------------------------------------------------------------------------
# Full pipeline


def _method_rows_for_seed(cfg: ExperimentConfig, seed: int, seed_dir: Path,
                          timeout_secs: float | None, figures: bool) -> list[dict]:
    def deadline():
        return time.monotonic() + timeout_secs if timeout_secs else None

    rows: list[dict] = []
    ds = stage_generate(cfg, seed, seed_dir)
    truth_union = ds.schedule.union_graph()
    multi = len(ds.schedule.segments) > 1
    regime_mode = cfg.eval["regime_mode"] if multi else "pooled"

    def evaluate_method(name: str, graph, per_regime=None, scores=None):
        if graph is None:
            rows.append({"method": name, "seed": seed, "precision": None,
                         "recall": None, "f1": None, "shd": None})
            return
        if multi and regime_mode == "per_regime":
            preds = per_regime if per_regime is not None else [graph] * len(ds.schedule.segments)
            rep = metrics.regime_metrics(preds, ds.schedule, mode="per_regime",
                                         meta={"config_hash": cfg.hash, "seed": seed})
        else:
            rep = metrics.structural_metrics(graph, truth_union,
                                             meta={"config_hash": cfg.hash, "seed": seed})
        if scores is not None and truth_union.n_edges and \
                truth_union.n_edges < cfg.sim["p"] ** 2 * cfg.sim["L"]:
            rep.auroc, rep.auprc = metrics.score_metrics(scores, truth_union)
        rep.save(seed_dir / f"metrics_{name}.json")
        rows.append({"method": name, "seed": seed, "precision": rep.precision,
                     "recall": rep.recall, "f1": rep.f1, "shd": rep.shd})

    # Transformer pipeline
    try:
        model, _ = stage_train(cfg, seed, ds, seed_dir, deadline=deadline())
        scores, pred, per_regime = stage_extract(cfg, model, ds, seed_dir, seed,
                                                 figures=figures, deadline=deadline())
        evaluate_method("dot", pred, per_regime, scores=scores)
    except StageTimeout:
        evaluate_method("dot", None)

    gcfg = baselines.GrangerConfig(max_lag=cfg.sim["L"], alpha=cfg.baselines["alpha"],
                                   bonferroni=cfg.baselines["bonferroni"])
    if cfg.baselines["pairwise_granger"]:
        try:
            g = baselines.pairwise_granger(ds, gcfg, deadline=deadline())
            _write_graph(g, seed_dir / "graph_pw_granger.json", cfg.hash)
            evaluate_method("pw_granger", g)
        except StageTimeout:
            evaluate_method("pw_granger", None)
    if cfg.baselines["multivariate_granger"]:
        try:
            g = baselines.multivariate_granger(ds, gcfg)
            _write_graph(g, seed_dir / "graph_mv_granger.json", cfg.hash)
            evaluate_method("mv_granger", g)
        except StageTimeout:
            evaluate_method("mv_granger", None)
    if cfg.baselines["random_guess"]:
        g = baselines.random_guess(cfg.sim["p"], cfg.sim["L"],
                                   cfg.sim["expected_in_degree"],
                                   np.random.default_rng(seed + 7919))
        _write_graph(g, seed_dir / "graph_random.json", cfg.hash)
        evaluate_method("random_guess", g)
    return rows


def _run_seed_task(resolved: dict, seed: int, seed_dir: str,
                   timeout_secs: float | None, figures: bool) -> list[dict]:
    """Top-level seed worker; picklable for process pools."""
    cfg = ExperimentConfig(resolved)
    try:
        return _method_rows_for_seed(cfg, seed, Path(seed_dir), timeout_secs, figures)
    except StageTimeout:
        return []


def cmd_run(cfg: ExperimentConfig, out: Path, timeout_secs: float | None,
            figures: bool = True, threads: int = 1) -> int:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(dumps_canonical(cfg.resolved))
    all_rows: list[dict] = []
    timed_out_seeds = 0
    if threads > 1 and len(cfg.seeds) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=min(threads, len(cfg.seeds))) as pool:
            futures = [pool.submit(_run_seed_task, cfg.resolved, seed,
                                   str(out / f"seed_{seed}"), timeout_secs, figures)
                       for seed in cfg.seeds]
            for fut in futures:  # collect in seed order for a stable summary
                rows = fut.result()
                if not rows:
                    timed_out_seeds += 1
                all_rows.extend(rows)
    else:
        for seed in cfg.seeds:
            seed_dir = out / f"seed_{seed}"
            try:
                all_rows.extend(_method_rows_for_seed(cfg, seed, seed_dir,
                                                      timeout_secs, figures))
            except StageTimeout:
                timed_out_seeds += 1
    all_rows.sort(key=lambda r: (r["method"], r["seed"]))
    report.write_summary_csv(all_rows, out / "summary.csv")
    if figures:
        fig_rows = report.summary_rows_for_figure(all_rows)
        if fig_rows:
            report.save_f1_bars(fig_rows, out / "f1_summary.png",
                                title=f"{cfg.name}: F1 by method")
    done = [r for r in all_rows if r.get("f1") is not None]
    if not done:
        return EXIT_TIMEOUT if timed_out_seeds or all_rows else EXIT_RUNTIME
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def make_parser() -> _Parser:
    parser = _Parser(prog="lagcause",
                     description="Simulate lagged causal systems, train forecasters, "
                                 "and recover the causal graph from attributions.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", required=True,
                            help="path to a config JSON or a preset name")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--threads", type=int, default=1)
        sp.add_argument("--timeout-secs", type=float, default=None)
        sp.add_argument("--force", action="store_true")
        sp.add_argument("--no-figures", action="store_true")

    common(sub.add_parser("generate", help="simulate a dataset and its truth graphs"))
    sp = sub.add_parser("train", help="train a predictor on a generated dataset")
    common(sp)
    sp.add_argument("--data", required=True, help="path to series.bin")
    sp = sub.add_parser("extract", help="attribution scores and binarized graph")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--rule", default=None, help="e.g. topk_row=3, topk_global=15")
    sp.add_argument("--rank-stats", action="store_true")
    sp.add_argument("--interventions", action="store_true")
    sp.add_argument("--attention", action="store_true")
    sp = sub.add_parser("evaluate", help="score a predicted graph against a truth graph")
    common(sp, config=False)
    sp.add_argument("--pred", required=True)
    sp.add_argument("--truth", required=True)
    common(sub.add_parser("run", help="full pipeline over all config seeds"))
    sub.add_parser("presets", help="list shipped preset configs")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "presets":
            for name in preset_names():
                print(name)
            return EXIT_OK
        out = Path(args.out)
        figures = not args.no_figures
        if args.command == "evaluate":
            rep = stage_evaluate(Path(args.pred), Path(args.truth), out, force=args.force)
            print(f"precision={rep.precision:.4f} recall={rep.recall:.4f} "
                  f"f1={rep.f1:.4f} shd={rep.shd:.1f}")
            return EXIT_OK
        cfg = load_config(args.config)
        if args.command == "generate":
            seed = cfg.seeds[0] if args.seed is None else args.seed
            stage_generate(cfg, seed, out)
            print(f"wrote dataset and truth graphs to {out}")
            return EXIT_OK
        if args.command == "train":
            seed = cfg.seeds[0] if args.seed is None else args.seed
            ds = sim.load_dataset(Path(args.data))
            deadline = time.monotonic() + args.timeout_secs if args.timeout_secs else None
            _, log = stage_train(cfg, seed, ds, out, deadline=deadline)
            print(f"trained {len(log.steps)} steps, final loss {log.final_loss():.6f} "
                  f"({log.stopped})")
            return EXIT_OK
        if args.command == "extract":
            seed = cfg.seeds[0] if args.seed is None else args.seed
            ds = sim.load_dataset(Path(args.data))
            model, manifest = load_checkpoint(Path(args.checkpoint))
            if not args.force and manifest.get("config_hash") not in (None, cfg.hash):
                raise ArtifactMismatch(
                    "checkpoint was produced under a different config; use --force")
            if args.rule:
                cfg.binarize_rule = args.rule
                attrib.parse_rule(args.rule)
            _, pred, _ = stage_extract(cfg, model, ds, out, seed, figures=figures,
                                       with_rank_stats=args.rank_stats,
                                       with_interventions=args.interventions,
                                       with_attention=args.attention)
            print(f"predicted graph with {pred.n_edges} edges -> {out/'graph_pred.json'}")
            return EXIT_OK
        if args.command == "run":
            code = cmd_run(cfg, out, args.timeout_secs, figures=figures,
                           threads=args.threads)
            print(f"summary written to {out/'summary.csv'}")
            return code
        raise UsageError(f"unknown command {args.command!r}")
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (sim.DensityError, sim.PreconditionError, ConfigError,
            attrib.BinarizationError, metrics.EvaluationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StageTimeout as exc:
        print(f"timeout: {exc}", file=sys.stderr)
        return EXIT_TIMEOUT
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (FileNotFoundError, ArtifactMismatch, sim.UnstableSystemError,
            baselines.RankDeficiencyError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
