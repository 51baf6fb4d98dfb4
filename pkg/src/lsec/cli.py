"""Command-line pipeline: generate | split | analyze | train | evaluate |
export-embeddings | ablate.

Runs are configured by a JSON manifest with sections `data`, `split`,
`model`, `train`, `analysis`, plus `output_dir` and `repeat_count`; unknown
keys are rejected so a typo cannot silently fall back to a default. The
effective (defaults-applied) manifest is echoed into the output directory of
every run. Exit codes: 0 success, 1 usage error, 2 data error, 3
runtime/numeric error.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from . import datagen, influence, model as model_mod, trainer as trainer_mod
from .datagen import GenConfig, SplitSpec, SplitResult
from .errors import ConfigError, ContractError, LsecError, ParseError
from .graph import load_tripartite_dir, save_snapshot
from .model import ModelConfig
from .trainer import ABLATION_GRID, TrainConfig, Trainer

logger = logging.getLogger("lsec")

ANALYSIS_DEFAULTS = {
    "n_mc": None,  # defaults to 10x the buy-edge count
    "n_pairs": 100_000,
    "seed": 0,
    "settings": ["S1", "S2"],
    "user_levels": list(influence.DEFAULT_USER_LEVELS),
    "item_levels": list(influence.DEFAULT_ITEM_LEVELS),
}


def worker_count() -> int:
    """Parallelism cap from LSEC_THREADS (default 1)."""
    try:
        return max(1, int(os.environ.get("LSEC_THREADS", "1")))
    except ValueError:
        return 1


def _check_keys(section: dict, allowed, name: str) -> None:
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in manifest section {name!r}: {sorted(unknown)}")


def _build_dataclass(cls, section: dict, name: str):
    fields = {f.name for f in dataclasses.fields(cls)}
    _check_keys(section, fields, name)
    kwargs = dict(section)
    for key in ("layer_dims", "relations", "tasks"):
        if key in kwargs and isinstance(kwargs[key], list):
            kwargs[key] = tuple(kwargs[key])
    return cls(**kwargs)


@dataclasses.dataclass
class RunManifest:
    data: dict
    split: SplitSpec
    model: ModelConfig
    train: TrainConfig
    analysis: dict
    output_dir: str | None = None
    repeat_count: int = 5

    def effective_dict(self) -> dict:
        return {
            "data": self.data,
            "split": dataclasses.asdict(self.split),
            "model": self.model.to_dict(),
            "train": {
                k: v for k, v in dataclasses.asdict(self.train).items() if k != "model"
            },
            "analysis": self.analysis,
            "output_dir": self.output_dir,
            "repeat_count": self.repeat_count,
        }


def manifest_from_dict(doc: dict) -> RunManifest:
    _check_keys(doc, ("data", "split", "model", "train", "analysis",
                      "output_dir", "repeat_count"), "<root>")
    data = doc.get("data", {})
    _check_keys(data, ("dir", "generate"), "data")
    if "dir" in data and "generate" in data:
        raise ConfigError("manifest data section must have either 'dir' or 'generate', not both")
    if "generate" in data:
        gen = _build_dataclass(GenConfig, data["generate"], "data.generate").validate()
        data = {"generate": dataclasses.asdict(gen)}
    split = _build_dataclass(SplitSpec, doc.get("split", {}), "split").validate()
    mcfg = _build_dataclass(ModelConfig, doc.get("model", {}), "model").validate()
    tsec = dict(doc.get("train", {}))
    _check_keys(tsec, {f.name for f in dataclasses.fields(TrainConfig)} - {"model"}, "train")
    tcfg = TrainConfig(model=mcfg, **tsec).validate()
    analysis = dict(ANALYSIS_DEFAULTS)
    asec = doc.get("analysis", {})
    _check_keys(asec, ANALYSIS_DEFAULTS, "analysis")
    analysis.update(asec)
    repeat = doc.get("repeat_count", 5)
    if not isinstance(repeat, int) or repeat < 1:
        raise ConfigError("repeat_count must be a positive integer")
    return RunManifest(data=data, split=split, model=mcfg, train=tcfg,
                       analysis=analysis, output_dir=doc.get("output_dir"),
                       repeat_count=repeat)


def load_manifest(path: str | None) -> RunManifest:
    doc = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise ParseError(f"{path}: invalid JSON ({e})") from None
    return manifest_from_dict(doc)


def _json_dump(obj, path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_graph(manifest: RunManifest):
    data = manifest.data
    if "dir" in data:
        return load_tripartite_dir(data["dir"])
    if "generate" in data:
        cfg = _build_dataclass(GenConfig, data["generate"], "data.generate")
        return datagen.generate(cfg)
    raise ConfigError("manifest data section needs 'dir' or 'generate'")


def _prepare_split(manifest: RunManifest) -> SplitResult:
    return datagen.chronological_split(_load_graph(manifest), manifest.split)


def _echo_manifest(manifest: RunManifest, out_dir: str) -> None:
    _json_dump(manifest.effective_dict(), os.path.join(out_dir, "effective_manifest.json"))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    manifest = load_manifest(args.manifest)
    gen = manifest.data.get("generate")
    cfg = _build_dataclass(GenConfig, gen, "data.generate") if gen else GenConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    graph = datagen.generate(cfg.validate())
    datagen.write_tsv(graph, args.out)
    if args.snapshot:
        save_snapshot(graph, args.snapshot)
    _json_dump(dataclasses.asdict(cfg), os.path.join(args.out, "gen_config.json"))
    logger.info("generated %d buy / %d follow / %d sell edges into %s",
                graph.buy.n_edges, graph.follow.n_edges, graph.sell.n_edges, args.out)
    return 0


def cmd_split(args) -> int:
    manifest = load_manifest(args.manifest)
    graph = load_tripartite_dir(args.data)
    split = datagen.chronological_split(graph, manifest.split)
    datagen.write_split(split, args.out)
    _echo_manifest(manifest, args.out)
    logger.info("split report: %s", split.report)
    return 0


def cmd_analyze(args) -> int:
    manifest = load_manifest(args.manifest)
    params = dict(manifest.analysis)
    if args.setting:
        params["settings"] = args.setting
    if args.seed is not None:
        params["seed"] = args.seed
    if args.n_mc is not None:
        params["n_mc"] = args.n_mc
    if args.n_pairs is not None:
        params["n_pairs"] = args.n_pairs
    graph = load_tripartite_dir(args.data)
    report = influence.analysis_report(
        graph, n_mc=params["n_mc"], n_pairs=params["n_pairs"], seed=params["seed"],
        settings=tuple(params["settings"]),
        user_levels=tuple(params["user_levels"]), item_levels=tuple(params["item_levels"]),
    )
    os.makedirs(args.out, exist_ok=True)
    _json_dump(report, os.path.join(args.out, "analysis.json"))
    text = influence.format_report(report)
    with open(os.path.join(args.out, "analysis.txt"), "w", encoding="utf-8") as fh:
        fh.write(text)
    sys.stdout.write(text)
    return 0


def _train_once(split: SplitResult, tcfg: TrainConfig, out_dir: str) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    t = Trainer(split, tcfg)
    params, history = t.fit()
    model_mod.save_checkpoint(params, os.path.join(out_dir, "checkpoint.bin"))
    _json_dump(history.to_dict(), os.path.join(out_dir, "history.json"))
    val = t.validate_metrics(params).to_dict()
    test = t.test_metrics(params).to_dict()
    _json_dump(val, os.path.join(out_dir, "metrics_val.json"))
    _json_dump(test, os.path.join(out_dir, "metrics_test.json"))
    return test


def cmd_train(args) -> int:
    manifest = load_manifest(args.manifest)
    out_dir = args.out or manifest.output_dir
    if not out_dir:
        raise ConfigError("no output directory (set --out or manifest output_dir)")
    tcfg = manifest.train
    if args.seed is not None:
        tcfg = dataclasses.replace(tcfg, seed=args.seed)
    split = _prepare_split(manifest)
    os.makedirs(out_dir, exist_ok=True)
    _echo_manifest(manifest, out_dir)
    test = _train_once(split, tcfg, out_dir)
    logger.info("test metrics: %s", test)
    return 0


def cmd_evaluate(args) -> int:
    manifest = load_manifest(args.manifest)
    if args.data:
        manifest.data = {"dir": args.data}
    split = _prepare_split(manifest)
    params = model_mod.load_checkpoint(args.checkpoint)
    trainer = Trainer(split, dataclasses.replace(manifest.train, model=params.config))
    metrics = trainer.test_metrics(params) if args.split == "test" else \
        trainer.validate_metrics(params)
    _json_dump(metrics.to_dict(), args.out)
    sys.stdout.write(json.dumps(metrics.to_dict(), indent=2, sort_keys=True) + "\n")
    return 0


def cmd_export_embeddings(args) -> int:
    manifest = load_manifest(args.manifest)
    if args.data:
        manifest.data = {"dir": args.data}
    graph = _load_graph(manifest)
    params = model_mod.load_checkpoint(args.checkpoint)
    model_mod.export_embeddings(params, graph, args.out)
    return 0


def _grid_label(relations, tasks) -> str:
    return "rel" + "-".join(map(str, relations)) + "_tasks" + "-".join(map(str, tasks))


def cmd_ablate(args) -> int:
    manifest = load_manifest(args.manifest)
    out_dir = args.out or manifest.output_dir
    if not out_dir:
        raise ConfigError("no output directory (set --out or manifest output_dir)")
    os.makedirs(out_dir, exist_ok=True)
    _echo_manifest(manifest, out_dir)
    split = _prepare_split(manifest)

    jobs = []
    for relations, tasks in ABLATION_GRID:
        mcfg = dataclasses.replace(manifest.model, relations=relations, tasks=tasks)
        for rep in range(manifest.repeat_count):
            tcfg = dataclasses.replace(manifest.train, model=mcfg,
                                       seed=manifest.train.seed + rep)
            run_dir = os.path.join(out_dir, f"{_grid_label(relations, tasks)}_seed{tcfg.seed}")
            jobs.append((relations, tasks, tcfg, run_dir))

    results: dict[tuple, list[dict]] = {}
    max_workers = worker_count()
    if max_workers > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=max_workers) as pool:
            futures = {pool.submit(_train_once, split, tcfg, run_dir): (rel, tk)
                       for rel, tk, tcfg, run_dir in jobs}
            for fut, key in futures.items():
                results.setdefault(key, []).append(fut.result())
    else:
        for rel, tk, tcfg, run_dir in jobs:
            results.setdefault((rel, tk), []).append(_train_once(split, tcfg, run_dir))

    summary = {}
    lines = [f"{'relations':<12}{'tasks':<10}{'auc':>16}{'recall@10':>18}{'recall@50':>18}"]
    for relations, tasks in ABLATION_GRID:
        runs = results[(relations, tasks)]
        entry = {}
        for metric, getter in (
            ("auc", lambda m: m["auc"]),
            ("mrr", lambda m: m["mrr"]),
            ("ndcg10", lambda m: m["ndcg"]["10"]),
            ("ndcg50", lambda m: m["ndcg"]["50"]),
            ("recall10", lambda m: m["recall"]["10"]),
            ("recall50", lambda m: m["recall"]["50"]),
        ):
            vals = np.array([getter(m) for m in runs])
            entry[metric] = {"mean": float(vals.mean()), "std": float(vals.std())}
        summary[_grid_label(relations, tasks)] = entry
        lines.append(
            f"{','.join(map(str, relations)):<12}{','.join(map(str, tasks)):<10}"
            f"{entry['auc']['mean']:>8.4f}±{entry['auc']['std']:<7.4f}"
            f"{entry['recall10']['mean']:>10.4f}±{entry['recall10']['std']:<7.4f}"
            f"{entry['recall50']['mean']:>10.4f}±{entry['recall50']['std']:<7.4f}"
        )
    _json_dump(summary, os.path.join(out_dir, "ablation_summary.json"))
    table = "\n".join(lines) + "\n"
    with open(os.path.join(out_dir, "ablation_summary.txt"), "w", encoding="utf-8") as fh:
        fh.write(table)
    sys.stdout.write(table)
    return 0


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------


class _UsageError(LsecError):
    exit_code = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); keep our codes
        raise _UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lsec", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic TSV dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--manifest")
    g.add_argument("--seed", type=int)
    g.add_argument("--snapshot", help="also write a binary graph snapshot")
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("split", help="chronological train/val/test split")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--manifest")
    s.set_defaults(func=cmd_split)

    a = sub.add_parser("analyze", help="streamer-influence report")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--manifest")
    a.add_argument("--setting", action="append", choices=["S1", "S2"])
    a.add_argument("--seed", type=int)
    a.add_argument("--n-mc", type=int, dest="n_mc")
    a.add_argument("--n-pairs", type=int, dest="n_pairs")
    a.set_defaults(func=cmd_analyze)

    t = sub.add_parser("train", help="train one model from a manifest")
    t.add_argument("--manifest", required=True)
    t.add_argument("--out")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="metrics for a checkpoint on a split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data")
    e.add_argument("--manifest")
    e.add_argument("--split", choices=["val", "test"], default="test")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    x = sub.add_parser("export-embeddings", help="labeled embedding TSV")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--data")
    x.add_argument("--manifest")
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export_embeddings)

    b = sub.add_parser("ablate", help="relations/tasks grid, repeated")
    b.add_argument("--manifest", required=True)
    b.add_argument("--out")
    b.set_defaults(func=cmd_ablate)
    return p


def dispatch(argv) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except LsecError as e:
        print(f"error: code={e.exit_code} msg={e}", file=sys.stderr)
        return e.exit_code
    except FileNotFoundError as e:
        print(f"error: code=2 msg={e}", file=sys.stderr)
        return 2
    except Exception as e:  # numeric and other runtime failures
        print(f"error: code=3 msg={e}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
