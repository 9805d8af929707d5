"""Command-line entry point: preprocess, synth, train, evaluate, ablate, recommend.

Settings come from defaults, then an optional YAML config file, then
``VLOGREC_*`` environment variables (paths only), then flags.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import re
import sys
from dataclasses import asdict
from pathlib import Path

import yaml

from . import data as data_mod
from .data import TEST, VAL, PositiveRuleConfig, read_dataset, read_raw_log, write_dataset
from .errors import DataIOError, InvalidConfigError, NotFoundError, VlogRecError
from .evaluation import DEFAULT_KS, comparison_table, evaluate, recommend, run_ablation_suite
from .model import ModelContext, TrainConfig
from .training import TrainState, load_checkpoint, save_checkpoint, train

log = logging.getLogger("vlogrec")

DEFAULTS = {
    "seed": 2023,
    "paths": {"raw": None, "dataset": None, "checkpoint": None, "reports": None},
    "rules": asdict(PositiveRuleConfig()),
    "train": {k: v for k, v in TrainConfig().to_dict().items() if k != "seed"},
    "eval": {"ks": list(DEFAULT_KS)},
    "synth": {
        "n_users": 500,
        "n_vloggers": 40,
        "videos_per_vlogger": 25,
        "affinity": 0.9,
        "noise": 0.0,
        "interactions_per_user": 40,
        "preferred_per_user": 5,
    },
}
ENV_PATHS = {
    "raw": "VLOGREC_RAW",
    "dataset": "VLOGREC_DATASET",
    "checkpoint": "VLOGREC_CHECKPOINT",
    "reports": "VLOGREC_REPORTS",
}


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads exponent floats without a dot, such as ``1e-3``."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:[0-9][0-9_]*)(?:\.[0-9_]*)?[eE][-+]?[0-9]+$"),
    list("-+0123456789"),
)


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _set_dotted(tree: dict, dotted: str, raw_value: str) -> None:
    keys = dotted.split(".")
    node = tree
    for k in keys[:-1]:
        node = node.setdefault(k, {})
    node[keys[-1]] = yaml.load(raw_value, Loader=_Loader)


def load_run_config(path: str | None, overrides=(), env=None) -> dict:
    env = os.environ if env is None else env
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                loaded = yaml.load(fh, Loader=_Loader) or {}
        except OSError as exc:
            raise DataIOError(str(exc)) from exc
        except yaml.YAMLError as exc:
            raise InvalidConfigError(f"{path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise InvalidConfigError(f"{path}: top level must be a mapping")
        cfg = _merge(cfg, loaded)
    for key, var in ENV_PATHS.items():
        if env.get(var):
            cfg["paths"][key] = env[var]
    for item in overrides:
        if "=" not in item:
            raise InvalidConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        _set_dotted(cfg, k, v)
    return cfg


def train_config(run: dict) -> TrainConfig:
    return TrainConfig.from_dict({**run["train"], "seed": run["seed"]})


def rules_config(run: dict) -> PositiveRuleConfig:
    try:
        return PositiveRuleConfig(**run["rules"])
    except TypeError as exc:
        raise InvalidConfigError(f"rules: {exc}") from exc


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def _require(run: dict, key: str, flag: str) -> str:
    value = run["paths"].get(key)
    if not value:
        raise InvalidConfigError(f"missing {key} path (use {flag} or paths.{key} in the config)")
    return value


def _write_manifest(directory: Path, payload: dict) -> None:
    (directory / "manifest.json").write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n", encoding="utf-8")


# --- commands ------------------------------------------------------------------


def cmd_preprocess(run: dict, args) -> int:
    raw = _require(run, "raw", "--raw")
    out = Path(_require(run, "dataset", "--out"))
    rules = rules_config(run)
    ds = data_mod.preprocess(read_raw_log(raw), rules)
    write_dataset(out, ds)
    _write_manifest(out, {"rules": asdict(rules), "config_digest": _digest(asdict(rules)),
                          "users": ds.n_users, "videos": ds.n_videos, "vloggers": ds.n_vloggers,
                          "user_video": int(len(ds.uv)), "user_vlogger": int(len(ds.up))})
    print(f"users {ds.n_users} videos {ds.n_videos} vloggers {ds.n_vloggers} "
          f"user-video {len(ds.uv)} user-vlogger {len(ds.up)}")
    return 0


def cmd_synth(run: dict, args) -> int:
    out = Path(_require(run, "dataset", "--out"))
    s = run["synth"]
    records = data_mod.generate_synthetic_records(seed=run["seed"], **s)
    out.mkdir(parents=True, exist_ok=True)
    if run["paths"].get("raw"):
        data_mod.write_raw_log(run["paths"]["raw"], records)
    ds = data_mod.preprocess(records, rules_config(run))
    write_dataset(out, ds)
    _write_manifest(out, {"synth": s, "seed": run["seed"], "rules": run["rules"],
                          "config_digest": _digest({"synth": s, "seed": run["seed"], "rules": run["rules"]})})
    print(f"users {ds.n_users} videos {ds.n_videos} vloggers {ds.n_vloggers} "
          f"user-video {len(ds.uv)} user-vlogger {len(ds.up)}")
    return 0


def cmd_train(run: dict, args) -> int:
    ds = read_dataset(_require(run, "dataset", "--dataset"))
    ckpt = _require(run, "checkpoint", "--checkpoint")
    cfg = train_config(run)
    log_path = args.log or (str(Path(ckpt).with_suffix(".log.jsonl")))
    result = train(ds, cfg, log_path=log_path)
    state = result.state
    best = TrainState(result.params, state.m, state.v, state.step, state.epoch,
                      state.best_recall, state.since_improvement)
    save_checkpoint(best, ckpt, cfg.to_dict())
    print(f"epochs {state.epoch} best_epoch {result.best_epoch} best_val_recall@10 {state.best_recall:.4f} "
          f"config_digest {cfg.digest()}")
    return 0


def _load_model(run: dict):
    ds = read_dataset(_require(run, "dataset", "--dataset"))
    state, stored = load_checkpoint(_require(run, "checkpoint", "--checkpoint"))
    cfg = TrainConfig.from_dict(stored)
    graph = ds.train_graph()
    # validate shapes against this dataset
    load_checkpoint(run["paths"]["checkpoint"], counts=graph.counts, d=cfg.d)
    ctx = ModelContext.build(graph, cfg)
    return ds, state.params, ctx, cfg


def _report_paths(run: dict, split_name: str) -> tuple[Path, Path]:
    reports = Path(run["paths"].get("reports") or ".")
    reports.mkdir(parents=True, exist_ok=True)
    return reports / f"metrics_{split_name}.txt", reports / f"metrics_{split_name}.json"


def cmd_evaluate(run: dict, args) -> int:
    ds, params, ctx, cfg = _load_model(run)
    split = {"test": TEST, "val": VAL, "validation": VAL}[args.split]
    report = evaluate(params, ctx, cfg, ds, split, tuple(run["eval"]["ks"]))
    txt, js = _report_paths(run, report.split)
    txt.write_text(report.to_text(), encoding="utf-8")
    js.write_text(report.to_json() + "\n", encoding="utf-8")
    sys.stdout.write(report.to_text())
    return 0


def cmd_ablate(run: dict, args) -> int:
    ds = read_dataset(_require(run, "dataset", "--dataset"))
    cfg = train_config(run)
    rows = run_ablation_suite(ds, cfg, tuple(run["eval"]["ks"]), include_lightgcn=not args.no_lightgcn)
    table = comparison_table(rows)
    reports = Path(run["paths"].get("reports") or ".")
    reports.mkdir(parents=True, exist_ok=True)
    (reports / "ablation.tsv").write_text(f"# config_digest\t{cfg.digest()}\n" + table, encoding="utf-8")
    sys.stdout.write(table)
    return 0


def cmd_recommend(run: dict, args) -> int:
    ds, params, ctx, cfg = _load_model(run)
    try:
        user = ds.user_ids.index(args.user)
    except ValueError:
        raise NotFoundError(f"unknown user id {args.user!r}") from None
    for video, score in recommend(params, ctx, cfg, ds, user, args.k):
        print(f"{ds.video_ids[video]}\t{score!r}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vlogrec", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config entry, e.g. train.lr=0.01")
        return p

    p = common(sub.add_parser("preprocess", help="raw behavior log -> processed dataset"))
    p.add_argument("--raw")
    p.add_argument("--out", dest="dataset")
    p.add_argument("--rules", choices=["wechat", "takatak"], help="threshold preset")
    p.set_defaults(func=cmd_preprocess)

    p = common(sub.add_parser("synth", help="generate a planted synthetic dataset"))
    p.add_argument("--out", dest="dataset")
    p.add_argument("--raw-out", dest="raw", help="also write the raw behavior log")
    p.set_defaults(func=cmd_synth)

    p = common(sub.add_parser("train", help="train and write a checkpoint"))
    p.add_argument("--dataset")
    p.add_argument("--checkpoint")
    p.add_argument("--log", help="per-epoch JSON lines log (default: next to the checkpoint)")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("evaluate", help="Recall@K / NDCG@K of a checkpoint"))
    p.add_argument("--dataset")
    p.add_argument("--checkpoint")
    p.add_argument("--reports")
    p.add_argument("--split", default="test", choices=["test", "val", "validation"])
    p.set_defaults(func=cmd_evaluate)

    p = common(sub.add_parser("ablate", help="train and compare the ablation variants"))
    p.add_argument("--dataset")
    p.add_argument("--reports")
    p.add_argument("--no-lightgcn", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = common(sub.add_parser("recommend", help="top-K unwatched videos for one user"))
    p.add_argument("--dataset")
    p.add_argument("--checkpoint")
    p.add_argument("--user", required=True, help="raw user id")
    p.add_argument("-k", "--k", type=int, default=10)
    p.set_defaults(func=cmd_recommend)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        overrides = list(args.set)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        if getattr(args, "rules", None):
            preset = PositiveRuleConfig.takatak() if args.rules == "takatak" else PositiveRuleConfig.wechat()
            overrides += [f"rules.{k}={v}" for k, v in asdict(preset).items()]
        run = load_run_config(args.config, overrides)
        for key in ("raw", "dataset", "checkpoint", "reports"):
            if getattr(args, key, None):
                run["paths"][key] = getattr(args, key)
        return args.func(run, args)
    except VlogRecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (TypeError, ValueError) as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return InvalidConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
