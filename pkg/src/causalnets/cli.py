"""Command-line pipeline: ``causalnets <subcommand> ...``.

Typical sequence::

    causalnets simulate --out obs.csv
    causalnets gp-fit --input obs.csv --out run/gp
    causalnets train causality --gp run/gp --out run/causality
    causalnets train lag --gp run/gp --out run/lag
    causalnets graph probabilistic --gp run/gp --causality-model run/causality/model.json \\
        --lag-model run/lag/model.json --out run/graphs

Exit codes: 0 success, 2 input error, 3 training error, 4 missing artifact,
1 anything else.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, autoenc, deepwide, gp, graphs
from .config import ConfigError, RunConfig, load_config
from .data import ParseError, SchemaError, TimeGrid, group_by_compound, load_observations, write_observations
from .detectors import (
    CausalityDetector,
    CurriculumSchedule,
    LagDetector,
    TrainingDivergence,
    calibration_from_scores,
    roc_from_scores,
    stage_seed,
    train_causality,
    train_lag,
)
from .nn import FormatError
from .synth import LabeledPairSet, RatioPool, SynthConfig, build_labeled_set, build_lag_set

logger = logging.getLogger("causalnets")

EXIT_OK, EXIT_OTHER, EXIT_INPUT, EXIT_TRAINING, EXIT_MISSING = 0, 1, 2, 3, 4
CALIBRATION_THRESHOLDS = (0.01, 0.025, 0.05, 0.1, 0.2)
VALIDATION_STREAM = 1000


class MissingArtifact(FileNotFoundError):
    pass


# -- io helpers ---------------------------------------------------------------

def _dump(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _write_csv(path, header, rows) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _require(path, what) -> Path:
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"{what} not found: {path}")
    return path


def _outdir(path) -> Path:
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _metadata(cfg: RunConfig, command: str, **extra) -> dict:
    return {"command": command, "version": __version__, "config": cfg.to_dict(), **extra}


def _grid(cfg):
    return TimeGrid(cfg["gp"]["t_max_hours"], cfg["gp"]["grid_size"])


def _load_gp(directory, cfg):
    d = _require(directory, "GP output directory")
    models = {}
    for rec in gp.load_json(_require(d / "gp_models.json", "GP models")):
        m = gp.model_from_dict(rec)
        models[m.compound_id, m.condition] = m
    summaries = {}
    for rec in gp.load_json(_require(d / "summaries.json", "GP summaries")):
        s = gp.GPSummary.from_dict(rec)
        summaries[s.compound_id, s.condition] = s
    ratios = {r["compound_id"]: gp.RatioSeries.from_dict(r) for r in gp.load_json(d / "ratios.json")}
    return models, summaries, ratios


def _scores(summaries, grid, k):
    ids = sorted({c for c, _ in summaries})
    return {c: gp.sd_band_score(summaries[c, "treated"], summaries[c, "control"], k, grid)
            for c in ids if (c, "treated") in summaries and (c, "control") in summaries}


def _write_ranking(scores, path, top_n=None):
    order = gp.rank_compounds(scores, top_n)
    _write_csv(path, ["rank", "compound_id", "score"], [[i, c, repr(scores[c])] for i, c in enumerate(order, 1)])


def _gene_subset(summaries, cfg):
    """Top compounds by SD-band score that pass the band filter (score > 0)."""
    scores = _scores(summaries, _grid(cfg), cfg["graph"]["k"])
    return [c for c in gp.rank_compounds(scores) if scores[c] > 0][:cfg["graph"]["top_n"]], scores


def _synth_config(cfg, mixin=0, seed=None):
    s = cfg["synth"]
    return SynthConfig(cfg["gp"]["grid_size"], s["window"], mixin, s["mode"], s["set_size"], s["split_fraction"],
                       cfg.seed if seed is None else seed)


def _schedule(cfg):
    t = cfg["training"]
    return CurriculumSchedule(tuple(t["stages"]), t["epochs_per_stage"], t["batch_size"])


# -- subcommands --------------------------------------------------------------

def cmd_simulate(args, cfg):
    from .simulate import simulate_experiment

    exp = simulate_experiment(n_genes=args.genes, seed=cfg.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_observations(exp.observations, out)
    _dump({"edges": [list(e) for e in exp.edges], "seed": cfg.seed, "genes": args.genes},
          out.with_suffix(".truth.json"))


def cmd_gp_fit(args, cfg):
    path = Path(args.input or cfg["paths"]["input"])
    if not path.is_file():
        raise FileNotFoundError(f"input file not found: {path}")
    groups = group_by_compound(load_observations(path))
    g = cfg["gp"]
    models = gp.fit_experiment(groups, g["signal_variance"] or None, g["length_scale"], g["subsample"], cfg.seed,
                               cfg.workers)
    grid = _grid(cfg)
    summaries, ratios = gp.summarize_experiment(models, grid)
    out = _outdir(args.out)
    gp.save_json([gp.model_to_dict(m) for _, m in sorted(models.items())], out / "gp_models.json")
    gp.save_json([s.to_dict() for _, s in sorted(summaries.items())], out / "summaries.json")
    gp.save_json([r.to_dict() for _, r in sorted(ratios.items())], out / "ratios.json")
    for k in (1, 2):
        _write_ranking(_scores(summaries, grid, k), out / f"ranking_k{k}.csv")
    signal = next(iter(models.values())).params.signal_variance if models else None
    digest = hashlib.sha256(path.read_bytes()).hexdigest()
    _dump(_metadata(cfg, "gp-fit", input=path.name, input_sha256=digest, groups=len(groups), models=len(models),
                    signal_variance=signal), out / "metadata.json")


def cmd_rank(args, cfg):
    _, summaries, _ = _load_gp(args.gp, cfg)
    _write_ranking(_scores(summaries, _grid(cfg), args.k), args.out, args.top)


def cmd_synth_data(args, cfg):
    models, _, _ = _load_gp(args.gp, cfg)
    pool = RatioPool(models, _grid(cfg))
    config = _synth_config(cfg, args.mixin)
    build = build_labeled_set if args.kind == "causality" else build_lag_set
    train, test = build(config, pool)
    out = _outdir(args.out)
    train.save(out / "train")
    test.save(out / "test")


def cmd_train(args, cfg):
    models, _, _ = _load_gp(args.gp, cfg)
    pool = RatioPool(models, _grid(cfg))
    config = _synth_config(cfg)
    schedule = _schedule(cfg)
    t = cfg["training"]
    out = _outdir(args.out)
    if args.which == "causality":
        det, reports = train_causality(schedule, config, pool, cfg.seed, t["conv_window"], t["filters"])
        rows = [[r.stage, r.mixin, c["threshold"], c["tp"], c["fp"], c["tn"], c["fn"]]
                for r in reports for c in r.confusion]
        _write_csv(out / "roc.csv", ["stage", "m", "threshold", "tp", "fp", "tn", "fn"], rows)
        extra = {}
    else:
        det, reports = train_lag(schedule, config, pool, cfg.seed, t["conv_window"], t["filters"], t["hidden"])
        last = len(schedule.stages) - 1
        _, held_out = build_lag_set(config.with_(mixin=schedule.stages[-1], seed=stage_seed(cfg.seed, last)), pool)
        calib = calibration_from_scores(det.predict(held_out.first, held_out.second), held_out.labels,
                                        CALIBRATION_THRESHOLDS)
        _write_csv(out / "calibration.csv", ["threshold", "direction_precision", "coverage"],
                   [[repr(c.threshold), repr(c.direction_precision), repr(c.coverage)] for c in calib])
        extra = {"calibration": [c.to_dict() for c in calib]}
    schedule_info = {"stages": list(schedule.stages), "epochs_per_stage": schedule.epochs_per_stage,
                     "batch_size": schedule.batch_size, "set_size": config.set_size}
    det.save(out / "model.json", {"seed": cfg.seed, **schedule_info})
    _dump({"schedule": schedule_info, "stages": [r.to_dict() for r in reports], **extra}, out / "reports.json")
    _dump(_metadata(cfg, f"train {args.which}", schedule=schedule_info), out / "metadata.json")


def _load_detector(cls, path):
    try:
        return cls.load(_require(path, "model file"))
    except (FormatError, KeyError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: unreadable model ({exc})") from None


def cmd_validate(args, cfg):
    models, _, _ = _load_gp(args.gp, cfg)
    pool = RatioPool(models, _grid(cfg))
    n = cfg["training"]["validation_pairs"]
    config = _synth_config(cfg, args.mixin, stage_seed(cfg.seed, VALIDATION_STREAM)).with_(set_size=n)
    out = _outdir(args.out)
    if args.which == "causality":
        det = _load_detector(CausalityDetector, args.model)
        a, b = build_labeled_set(config, pool)
        held = LabeledPairSet(np.concatenate([a.first, b.first]), np.concatenate([a.second, b.second]),
                              np.concatenate([a.labels, b.labels]))
        report = roc_from_scores(det.predict(held.first, held.second), held.labels)
        report.mixin = args.mixin
        _dump(report.to_dict(), out / "validation.json")
    else:
        det = _load_detector(LagDetector, args.model)
        a, b = build_lag_set(config, pool)
        first, second = np.concatenate([a.first, b.first]), np.concatenate([a.second, b.second])
        labels = np.concatenate([a.labels, b.labels])
        scores = det.predict(first, second)
        calib = calibration_from_scores(scores, labels, CALIBRATION_THRESHOLDS)
        _dump({"m": args.mixin, "mse": float(np.mean((scores - labels) ** 2)),
               "calibration": [c.to_dict() for c in calib]}, out / "validation.json")


def _save_graph(graph, out, stem):
    graphs.export_dot(graph, out / f"{stem}.dot")
    graphs.export_json(graph, out / f"{stem}.json")
    return stem


def _graph_probabilistic(args, cfg, out, summaries, ratios):
    if not args.causality_model:
        raise MissingArtifact("probabilistic synthesis needs --causality-model")
    causal = _load_detector(CausalityDetector, args.causality_model)
    lag = _load_detector(LagDetector, args.lag_model) if args.lag_model else None
    calibration = []
    if lag is not None:
        reports = Path(args.lag_model).with_name("reports.json")
        if reports.exists():
            calibration = [_calibration(c) for c in json.loads(reports.read_text()).get("calibration", [])]
    subset, scores = _gene_subset(summaries, cfg)
    g = cfg["graph"]
    written = []
    for cutoff in sorted(set(g["cutoffs"]) | {g["probability_cutoff"]}):
        sc = graphs.SynthesisConfig(subset, cutoff, g["lag_threshold"], g["window_policy"], causal.window)
        graph = graphs.synth_undirected(causal, ratios, sc, scores)
        written.append(_save_graph(graph, out, f"undirected_p{cutoff:g}"))
        if lag is not None:
            directed = graphs.refine_directed(graph, lag, ratios, sc, calibration)
            written.append(_save_graph(directed, out, f"directed_p{cutoff:g}"))
    return {"graphs": written, "gene_subset": len(subset), "calibration_thresholds": [c.threshold for c in calibration]}


def _calibration(d):
    from .detectors import LagCalibration

    return LagCalibration(d["threshold"], d["direction_precision"], d["coverage"])


def _graph_autoenc(args, cfg, out, summaries, ratios):
    a = cfg["autoenc"]
    if len(ratios) < 20:
        raise ValueError("autoencoder synthesis needs at least 20 ratio series")
    models = autoenc.train_autoencoders(ratios, a["windows"], a["feature_dims"], cfg.seed, a["max_epochs"],
                                        a["batch_size"])
    scores = []
    for m in models:
        if m.error:
            continue
        occ = autoenc.extract_occurrences(m, ratios, a["occurrence_cap"], cfg.seed)
        for n in a["witnesses"]:
            threshold = autoenc.solve_threshold(occ, n, a["target_edges"][0])
            cons = autoenc.consistency(autoenc.match_occurrences(occ, threshold))
            scores.append(autoenc.ModelScore(m.window, m.feature_dim, n, m.val_mse, cons, threshold, model=m))
    ranked = autoenc.rank_models(scores, a["top_models"]) if scores else []
    autoenc.write_ranking_csv(ranked, out / "autoenc_ranking.csv")
    written = []
    for s in ranked:
        if not s.selected:
            continue
        for target in a["target_edges"]:
            graph, _, _ = autoenc.autoenc_graph(s.model, ratios, s.n, target, a["occurrence_cap"], cfg.seed)
            written.append(_save_graph(graph, out, f"autoenc_w{s.window}_f{s.feature_dim}_n{s.n}_e{target}"))
    return {"graphs": written, "models": len(models), "failed": sum(1 for m in models if m.error)}


def _graph_deepwide(args, cfg, out, summaries, ratios):
    d = cfg["deepwide"]
    if not ratios:
        return {"graphs": []}
    subset, _ = _gene_subset(summaries, cfg)
    dataset = deepwide.build_change_dataset(ratios)
    reports, nets = [], {}
    for depth in d["depths"]:
        for width in d["widths"]:
            spec = deepwide.DeepWideSpec(depth, width)
            weights, report = deepwide.train_deepwide(spec, dataset, d["epochs"], d["batch_size"], cfg.seed)
            reports.append(report)
            nets[depth, width] = weights
    ranked = deepwide.rank_deepwide_models(reports)
    deepwide.write_ranking_csv(ranked, out / "deepwide_ranking.csv")
    written = []
    for r in ranked[:d["top_models"]]:
        for degree in d["max_degree"]:
            for genes in d["max_genes"]:
                ec = deepwide.ExtractionConfig(degree, genes, tuple(subset))
                graph = deepwide.extract_graph(nets[r.depth, r.width], dataset.genes, ec, ratios)
                written.append(_save_graph(graph, out, f"deepwide_d{r.depth}_w{r.width}_deg{degree}_g{genes}"))
    return {"graphs": written, "reports": [r.to_dict() for r in ranked]}


def cmd_graph(args, cfg):
    _, summaries, ratios = _load_gp(args.gp, cfg)
    out = _outdir(args.out)
    handler = {"probabilistic": _graph_probabilistic, "autoenc": _graph_autoenc, "deepwide": _graph_deepwide}
    info = handler[args.method](args, cfg, out, summaries, ratios)
    _dump(_metadata(cfg, f"graph {args.method}", **info), out / f"metadata_{args.method}.json")


def cmd_compare_ref(args, cfg):
    graph = graphs.import_json(_require(args.graph, "graph file"))
    profiles = Path(args.profiles or cfg["paths"]["profiles"])
    if not profiles.is_file():
        raise FileNotFoundError(f"profile file not found: {profiles}")
    ids, matrix = graphs.load_profiles(profiles)
    threshold = args.threshold if args.threshold is not None else cfg["graph"]["reference_threshold"]
    ref = graphs.build_correlation_reference(ids, matrix, threshold)
    result = graphs.compare_to_reference(graph, ref)
    result.update({"threshold": threshold, "reference_edges": len(ref.edges), "note": ref.note})
    _dump(result, args.out)


# -- entry point --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="causalnets", description="Causal network synthesis from expression time series.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--config", help="INI configuration file")
    p.add_argument("--seed", type=int, help="random seed (default from config, else 0)")
    p.add_argument("--scale", choices=("desk", "paper"), default="desk", help="size profile")
    p.add_argument("--workers", type=int, help="parallelism cap; 1 is fully sequential")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one configuration value")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="write a synthetic observation CSV")
    s.add_argument("--out", required=True)
    s.add_argument("--genes", type=int, default=60)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("gp-fit", help="fit GPs, write summaries, ratios and rankings")
    s.add_argument("--input")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gp_fit)

    s = sub.add_parser("rank", help="rank compounds by SD-band score")
    s.add_argument("--gp", required=True)
    s.add_argument("--k", type=float, default=2.0)
    s.add_argument("--top", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_rank)

    s = sub.add_parser("synth-data", help="write a synthetic labeled pair set")
    s.add_argument("kind", choices=("causality", "lag"))
    s.add_argument("--gp", required=True)
    s.add_argument("--mixin", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("train", help="curriculum training of a detector")
    s.add_argument("which", choices=("causality", "lag"))
    s.add_argument("--gp", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("validate", help="evaluate a detector on a fresh held-out set")
    s.add_argument("which", choices=("causality", "lag"))
    s.add_argument("--model", required=True)
    s.add_argument("--gp", required=True)
    s.add_argument("--mixin", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("graph", help="synthesize causal graphs")
    s.add_argument("method", choices=("probabilistic", "autoenc", "deepwide"))
    s.add_argument("--gp", required=True)
    s.add_argument("--causality-model")
    s.add_argument("--lag-model")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_graph)

    s = sub.add_parser("compare-ref", help="compare a graph with a correlation reference")
    s.add_argument("--graph", required=True)
    s.add_argument("--profiles")
    s.add_argument("--threshold", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_compare_ref)
    return p


def _overrides(items):
    result = {}
    for item in items:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot:
            raise ConfigError(f"bad override {item!r}; expected SECTION.KEY=VALUE")
        result[section.strip(), name.strip()] = value
    return result


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.scale, args.seed, args.workers, _overrides(args.set))
        args.func(args, cfg)
    except MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (TrainingDivergence, autoenc.AutoencoderDivergence, deepwide.DeepWideDivergence) as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (FileNotFoundError, ParseError, SchemaError, ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001
        logger.debug("unhandled error", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_OTHER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
