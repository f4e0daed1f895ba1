"""Command-line entry point: generate | train | eval | gradcheck | ablate.

Config files are INI documents with sections ``[data]``, ``[train]`` and
``[run]``; nested fields use dotted keys (``tenc.model_dim = 64``) and
values are parsed as JSON where possible.  Command-line flags override the
file, and the merged effective config is written to the output directory.

Exit codes: 0 success, 1 validation error, 2 runtime error, 3 acceptance
check failed.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from . import ablation as ab
from . import evalkit as ek
from . import gradsuite
from . import synthdata as sd
from . import trainer as tr

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_ACCEPTANCE = 0, 1, 2, 3


class ValidationError(ValueError):
    pass


@dataclass
class RunOptions:
    n_train: int = 200
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2])
    variants: List[str] = field(default_factory=lambda: ["full", *ab.DIRECTIONAL])
    tasks: List[str] = field(default_factory=lambda: list(ek.TASKS))
    regimes: List[str] = field(default_factory=lambda: list(ek.REGIMES))


@dataclass
class RunConfig:
    data: sd.GeneratorConfig
    train: tr.TrainConfig
    run: RunOptions

    def to_dict(self) -> dict:
        return {"data": self.data.to_dict(), "train": self.train.to_dict(), "run": dict(self.run.__dict__)}

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _set_dotted(d: dict, key: str, value) -> None:
    parts = key.split(".")
    for p in parts[:-1]:
        d = d.setdefault(p, {})
    d[parts[-1]] = value


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def read_config_file(path) -> Dict[str, dict]:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    if not parser.read(path):
        raise ValidationError(f"cannot read config file {path}")
    out: Dict[str, dict] = {}
    for section in parser.sections():
        if section not in ("data", "train", "run"):
            raise ValidationError(f"unknown config section [{section}]")
        tree: dict = {}
        for key, raw in parser.items(section):
            _set_dotted(tree, key, _parse_value(raw))
        out[section] = tree
    return out


def build_config(file_values: Optional[Dict[str, dict]] = None, overrides: Optional[Dict[str, dict]] = None) -> RunConfig:
    values = _merge(file_values or {}, overrides or {})
    defaults = RunConfig(sd.GeneratorConfig(), tr.TrainConfig(), RunOptions())
    base = defaults.to_dict()
    try:
        data = _merge(base["data"], values.get("data", {}))
        train = _merge(base["train"], values.get("train", {}))
        run = _merge(base["run"], values.get("run", {}))
        cfg = RunConfig(sd.GeneratorConfig(**data), tr.config_from_dict(train), RunOptions(**run))
    except TypeError as exc:
        raise ValidationError(f"unknown config key: {exc}") from exc
    for t in cfg.run.tasks:
        if t not in ek.TASKS:
            raise ValidationError(f"unknown task {t!r}")
    for r in cfg.run.regimes:
        ek.check_regime(r)
    if cfg.train.num_predicates != cfg.data.labels.num_predicates or cfg.train.num_object_classes != cfg.data.labels.num_object_classes:
        raise ValidationError("train label-space sizes must match data.labels")
    if cfg.train.grid != cfg.data.grid:
        raise ValidationError("train.grid must equal data.grid")
    return cfg


def _flatten(d: dict, prefix: str = "") -> Dict[str, object]:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def write_effective_config(cfg: RunConfig, path) -> None:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section, values in cfg.to_dict().items():
        parser[section] = {k: json.dumps(v) for k, v in sorted(_flatten(values).items())}
    with open(path, "w") as fh:
        parser.write(fh)


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out: Path, cfg: RunConfig, command: str, files: Sequence[str], extra: Optional[dict] = None) -> None:
    manifest = {
        "command": command,
        "config_hash": cfg.digest(),
        "config": cfg.to_dict(),
        "files": {f: _sha256(out / f) for f in files},
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def _load_dataset(path) -> List[sd.VideoSample]:
    if path is None:
        raise ValidationError("--dataset is required")
    if not Path(path).exists():
        raise ValidationError(f"dataset {path} does not exist")
    return sd.load(path)


def cmd_generate(cfg: RunConfig, out: Path, args) -> int:
    videos = sd.generate(cfg.data)
    sd.save(videos, out / "dataset.jsonl")
    write_effective_config(cfg, out / "config.ini")
    write_manifest(out, cfg, "generate", ["dataset.jsonl", "config.ini"], {"videos": len(videos), "data_hash": cfg.data.digest()})
    print(f"wrote {len(videos)} videos to {out / 'dataset.jsonl'}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, out: Path, args) -> int:
    videos = _load_dataset(args.dataset)
    train_videos = videos[: cfg.run.n_train]
    if args.resume:
        state = tr.load_checkpoint(args.resume)
        # epochs only bounds the loop, so a run may be resumed with a larger target
        if {**state.cfg.to_dict(), "epochs": 0} != {**cfg.train.to_dict(), "epochs": 0}:
            raise ValidationError("checkpoint was trained with a different config")
        state.cfg = state.model.cfg = cfg.train
        trainer = tr.Trainer(cfg.train, train_videos, state=state)
    else:
        trainer = tr.Trainer(cfg.train, train_videos)

    def on_epoch(row, state):
        print(" ".join(f"{k}={row[k]:.6g}" if isinstance(row[k], float) else f"{k}={row[k]}" for k in tr.METRIC_COLUMNS), flush=True)
        (out / "metrics.csv").write_text(tr.metrics_csv(state.metrics))

    state = trainer.fit(on_epoch=on_epoch)
    (out / "metrics.csv").write_text(tr.metrics_csv(state.metrics))
    tr.save_checkpoint(state, out / "checkpoint.pt")
    state.store.save(out / "correlation_store.json")
    write_effective_config(cfg, out / "config.ini")
    write_manifest(out, cfg, "train", ["metrics.csv", "correlation_store.json", "config.ini"], {"epochs": state.epoch})
    return EXIT_OK


def cmd_eval(cfg: RunConfig, out: Path, args) -> int:
    videos = _load_dataset(args.dataset)
    train_videos = videos[: cfg.run.n_train]
    test_videos = videos[cfg.run.n_train:] if args.split == "test" else videos
    if not test_videos:
        raise ValidationError("no videos to evaluate (dataset has no test split; use --split all)")
    counts = sd.predicate_histogram(train_videos, cfg.train.num_predicates)
    gts = ek.gt_frames(test_videos)
    reports, meta = [], {}
    if args.predictions:
        preds = ek.load_predictions(args.predictions)
        if len(preds) != len(gts):
            raise ValidationError(f"prediction file has {len(preds)} frames, ground truth has {len(gts)}")
        for task in cfg.run.tasks:
            for regime in cfg.run.regimes:
                reports.append(ek.evaluate(preds, gts, cfg.train.num_predicates, task, regime, counts))
    else:
        if not args.checkpoint:
            raise ValidationError("eval needs --checkpoint or --predictions")
        state = tr.load_checkpoint(args.checkpoint)
        meta = {"checkpoint_epoch": state.epoch, "untrained": state.epoch == 0}
        if state.epoch == 0:
            print("warning: checkpoint has not completed any epoch", file=sys.stderr)
        with open(out / "predictions.jsonl", "w") as fh:
            for task in cfg.run.tasks:
                for regime in cfg.run.regimes:
                    preds = []
                    for i, v in enumerate(test_videos):
                        frames = tr.infer(state, v, task, regime, index=i)
                        preds.extend(frames)
                        line = ek.predictions_to_json(frames)
                        line.update({"task": task, "regime": regime, "video": i})
                        fh.write(json.dumps(line) + "\n")
                    reports.append(ek.evaluate(preds, gts, state.cfg.num_predicates, task, regime, counts))
    ek.write_reports(reports, out / "report.json", out / "report.csv", out / "per_class.csv")
    write_effective_config(cfg, out / "config.ini")
    files = ["report.json", "report.csv", "per_class.csv", "config.ini"]
    write_manifest(out, cfg, "eval", files, meta)
    for r in reports:
        print(f"{r.task} {r.regime}: " + " ".join(f"R@{k}={r.recall[k]:.4f} mR@{k}={r.mean_recall[k]:.4f}" for k in sorted(r.recall)))
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, out: Path, args) -> int:
    seed = cfg.train.seed
    reports = gradsuite.run_suite(seed=seed, inject_fault=args.inject_fault)
    payload = {name: r.to_dict() for name, r in reports.items()}
    (out / "gradcheck.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
    write_effective_config(cfg, out / "config.ini")
    write_manifest(out, cfg, "gradcheck", ["gradcheck.json", "config.ini"])
    ok = True
    for name, r in reports.items():
        print(f"{'PASS' if r.passed else 'FAIL'} {name} max_rel_error={r.max_rel_error:.3e}")
        for p, e in sorted(r.per_parameter_errors.items()):
            print(f"    {p}: {e:.3e}")
        ok &= r.passed
    return EXIT_OK if ok else EXIT_ACCEPTANCE


def cmd_ablate(cfg: RunConfig, out: Path, args) -> int:
    result = ab.run_ablation(cfg.train, cfg.data, cfg.run.seeds, cfg.run.variants, cfg.run.n_train, log=print)
    ab.write_ablation(result, out)
    write_effective_config(cfg, out / "config.ini")
    write_manifest(out, cfg, "ablate", ["ablation_runs.csv", "ablation_summary.csv", "ablation_check.json", "config.ini"])
    ok, lines = ab.directional_check(result, [v for v in ab.DIRECTIONAL if v in cfg.run.variants])
    for line in lines:
        print(line)
    return EXIT_OK if ok else EXIT_ACCEPTANCE


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flocode", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI config file")
        p.add_argument("--seed", type=int, help="seed for data generation and training")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--task", help="task, or comma list for eval")
        p.add_argument("--regime", help="with | no, or comma list for eval")
        p.add_argument("--ablate", help="comma list of components to remove: " + ",".join(tr.ABLATABLE))
        p.add_argument("--epochs", type=int)
        if name in ("train", "eval"):
            p.add_argument("--dataset", help="JSON-lines dataset")
        if name == "train":
            p.add_argument("--resume", help="checkpoint to continue from")
        if name == "eval":
            p.add_argument("--checkpoint")
            p.add_argument("--predictions", help="evaluate a prediction file instead of a checkpoint")
            p.add_argument("--split", choices=("test", "all"), default="test")
        if name == "gradcheck":
            p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
        if name == "ablate":
            p.add_argument("--seeds", help="comma list of seeds")
            p.add_argument("--variants", help="comma list from " + ",".join(ab.VARIANTS))
    return parser


def _csv(text: str) -> List[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def overrides_from_args(args) -> Dict[str, dict]:
    o: Dict[str, dict] = {"data": {}, "train": {}, "run": {}}
    if args.seed is not None:
        o["data"]["seed"] = args.seed
        o["train"]["seed"] = args.seed
    if args.task:
        tasks = [t.upper() for t in _csv(args.task)]
        o["run"]["tasks"] = tasks
        o["train"]["task"] = tasks[0]
    if args.regime:
        regimes = _csv(args.regime)
        o["run"]["regimes"] = regimes
        o["train"]["regime"] = regimes[0]
    if args.ablate is not None:
        o["train"]["ablate"] = _csv(args.ablate)
    if args.epochs is not None:
        o["train"]["epochs"] = args.epochs
    if getattr(args, "seeds", None):
        o["run"]["seeds"] = [int(s) for s in _csv(args.seeds)]
    if getattr(args, "variants", None):
        o["run"]["variants"] = _csv(args.variants)
    return o


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    tr.configure_threads()
    try:
        file_values = read_config_file(args.config) if args.config else {}
        cfg = build_config(file_values, overrides_from_args(args))
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
    except (ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        return COMMANDS[args.command](cfg, out, args)
    except (ValidationError, sd.SchemaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - surface as runtime failure
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
