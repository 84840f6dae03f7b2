"""Command-line entry point: ``itcrwkv <subcommand> [options]``.

Every subcommand takes ``--config FILE`` (``key = value`` lines); explicit
flags override the file, the file overrides built-in defaults.  The effective
settings and library versions are written to ``manifest.txt`` in the output
directory.

Exit codes: 0 success, 1 invalid input or failed check, 2 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .bench import BENCH_KINDS, check_kinds, run_bench
from .container import FORMAT_VERSION
from .heatmap import ImportanceMapConfig, render_importance, write_field_csv, write_ppm
from .kvfile import coerce, read_kv, write_kv
from .model import forward_model
from .oracles import oracle_suite
from .synth import SynthConfig, dataset_config, load_dataset, save_dataset, split
from .train import (CHECKPOINT_VERSION, TrainConfig, TrainingDiverged, checkpoint_path, evaluate,
                    load_checkpoint, save_checkpoint, train, write_history_csv, write_summary)
from . import tensor as T

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
SPLITS = ("train", "val", "test")


class UsageError(Exception):
    pass


class CheckFailed(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# settings: defaults <- config file <- flags


def _int_list(text: str) -> list[int]:
    return [int(v) for v in str(text).replace(",", " ").split()]


def _str_list(text: str) -> list[str]:
    return [v for v in str(text).replace(",", " ").split()]


@dataclasses.dataclass
class GenSettings:
    out: str = "data"
    n_train: int = 800
    n_val: int = 200
    n_test: int = 200


@dataclasses.dataclass
class TrainSettings:
    data: str = "data"
    out: str = "run"
    resume: str = ""


@dataclasses.dataclass
class EvalSettings:
    checkpoint: str = "run/checkpoint.bin"
    data: str = "data/test.bin"
    out: str = "eval"


@dataclasses.dataclass
class BenchSettings:
    kinds: str = "rwkv,self_attention,mean_pool"
    n: str = "64,128,256,512,1024,2048,4096"
    d: int = 64
    heads: int = 4
    depth: int = 1
    reps: int = 30
    warmup: int = 5
    seed: int = 0
    out: str = "bench"


@dataclasses.dataclass
class OracleSettings:
    n: int = 64
    trials: int = 50
    d: str = "1,4,8"
    seed: int = 0
    out: str = "oracle"


@dataclasses.dataclass
class HeatmapSettings:
    checkpoint: str = "run/checkpoint.bin"
    data: str = "data/test.bin"
    index: int = 0
    out: str = "heatmap"


@dataclasses.dataclass
class AblateSettings:
    data: str = "data"
    out: str = "ablate"
    fusions: str = "gated,average,add,film,concat"
    depths: str = "1,2,4"


# subcommand -> (settings classes in lookup order)
GROUPS = {
    "gen": (GenSettings, SynthConfig),
    "train": (TrainSettings, TrainConfig),
    "eval": (EvalSettings,),
    "bench": (BenchSettings,),
    "oracle-check": (OracleSettings,),
    "heatmap": (HeatmapSettings, ImportanceMapConfig),
    "ablate": (AblateSettings, TrainConfig),
}


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_flags(p: argparse.ArgumentParser, classes) -> None:
    seen = set()
    for cls in classes:
        for f in dataclasses.fields(cls):
            if f.name in seen:
                continue
            seen.add(f.name)
            default = f.default
            if isinstance(default, bool):
                p.add_argument(_flag(f.name), dest=f.name, default=None,
                               type=lambda v, d=default: coerce(v, d), metavar="BOOL")
            elif isinstance(default, (int, float)) and not isinstance(default, bool):
                p.add_argument(_flag(f.name), dest=f.name, default=None, type=type(default))
            else:
                p.add_argument(_flag(f.name), dest=f.name, default=None)


def resolve(command: str, args: argparse.Namespace) -> list:
    """Build each settings object for ``command`` from defaults, config file and flags."""
    from_file = read_kv(args.config) if args.config else {}
    known = {f.name for cls in GROUPS[command] for f in dataclasses.fields(cls)}
    unknown = sorted(set(from_file) - known)
    if unknown:
        raise UsageError(f"{args.config}: unknown key(s) for '{command}': {', '.join(unknown)}")
    out = []
    for cls in GROUPS[command]:
        obj = cls()
        changes = {}
        for f in dataclasses.fields(cls):
            default = getattr(obj, f.name)
            if getattr(args, f.name, None) is not None:
                changes[f.name] = getattr(args, f.name)
            elif f.name in from_file:
                changes[f.name] = coerce(from_file[f.name], default)
        obj = dataclasses.replace(obj, **changes)
        if hasattr(obj, "validate"):
            obj.validate()
        out.append(obj)
    return out


def versions() -> dict[str, str]:
    import numba
    import scipy
    return {"itcrwkv": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__,
            "container_format": str(FORMAT_VERSION), "checkpoint_format": str(CHECKPOINT_VERSION)}


def write_manifest(out: Path, command: str, settings: list, extra: dict | None = None) -> Path:
    pairs = {"command": command}
    for obj in settings:
        prefix = type(obj).__name__
        for k, v in dataclasses.asdict(obj).items():
            pairs[f"{prefix}.{k}"] = v
    for k, v in versions().items():
        pairs[f"version.{k}"] = v
    if extra:
        pairs.update(extra)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "manifest.txt"
    write_kv(path, pairs, f"run manifest for '{command}'")
    return path


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(g: GenSettings, cfg: SynthConfig) -> int:
    out = Path(g.out)
    out.mkdir(parents=True, exist_ok=True)
    sets = split(cfg, (g.n_train, g.n_val, g.n_test))
    for name, samples in zip(SPLITS, sets):
        save_dataset(samples, out / f"{name}.bin", cfg)
        print(f"wrote {len(samples)} samples to {out / f'{name}.bin'}")
    write_manifest(out, "gen", [g, cfg])
    return EXIT_OK


def _load_splits(directory, names=("train", "val")):
    d = Path(directory)
    return [load_dataset(d / f"{n}.bin") for n in names]


def _n_classes(data_dir) -> int | None:
    cfg = dataset_config(Path(data_dir) / "train.bin")
    return cfg.n_classes if cfg else None


def cmd_train(s: TrainSettings, cfg: TrainConfig) -> int:
    out = Path(s.out)
    out.mkdir(parents=True, exist_ok=True)
    train_set, val_set = _load_splits(s.data)
    resume = load_checkpoint(s.resume) if s.resume else None
    t0 = time.perf_counter()
    log = lambda row: print(f"epoch {row['epoch']:3d}  loss {row['train_loss']:.4f}  "
                            f"val acc {row['val_accuracy']:.4f}  val wF1 {row['val_weighted_f1']:.4f}",
                            flush=True)
    try:
        result = train(cfg, train_set, val_set, resume=resume, n_classes=_n_classes(s.data), log=log)
    except TrainingDiverged as exc:
        save_checkpoint(exc.checkpoint, out / "last_good.bin")
        raise
    save_checkpoint(result.checkpoint, checkpoint_path(out))
    write_history_csv(result.history, out / "history.csv")
    metrics = evaluate(result.model, val_set)
    write_summary(metrics, out / "summary.txt",
                  {"split": "val", "best_epoch": result.checkpoint.best_epoch,
                   "epochs_run": result.checkpoint.epoch, "stopped_early": result.stopped_early,
                   "seconds": f"{time.perf_counter() - t0:.1f}"})
    write_manifest(out, "train", [s, cfg])
    print(f"best epoch {result.checkpoint.best_epoch}, val weighted F1 {metrics['weighted_f1']:.4f}")
    return EXIT_OK


def cmd_eval(s: EvalSettings) -> int:
    out = Path(s.out)
    out.mkdir(parents=True, exist_ok=True)
    model = load_checkpoint(s.checkpoint).model(best=True)
    metrics = evaluate(model, load_dataset(s.data))
    write_summary(metrics, out / "metrics.txt", {"data": s.data, "checkpoint": s.checkpoint})
    write_manifest(out, "eval", [s])
    print(f"accuracy {metrics['accuracy']:.4f}  weighted F1 {metrics['weighted_f1']:.4f}")
    return EXIT_OK


def cmd_bench(s: BenchSettings) -> int:
    kinds = _str_list(s.kinds)
    try:
        check_kinds(kinds)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(s.out)
    out.mkdir(parents=True, exist_ok=True)
    report = run_bench(kinds, _int_list(s.n), s.d, s.reps, s.warmup, s.heads, s.depth, s.seed,
                       log=lambda r: print(f"  {r.kind} n={r.n}: median {r.median_ms:.3f} ms", flush=True))
    report.write_csv(out / "bench.csv")
    print(report.table())
    write_manifest(out, "bench", [s])
    return EXIT_OK


def cmd_oracle(s: OracleSettings) -> int:
    if s.n < 1 or s.trials < 1:
        raise UsageError("--n and --trials must be positive")
    results = oracle_suite(s.n, s.trials, tuple(_int_list(s.d)), s.seed)
    for r in results:
        print(r.line())
    out = Path(s.out)
    write_manifest(out, "oracle-check", [s], {f"result.{r.name}": f"{r.worst:.3e}" for r in results})
    if not all(r.passed for r in results):
        raise CheckFailed("oracle equivalence violated")
    return EXIT_OK


def cmd_heatmap(s: HeatmapSettings, cfg: ImportanceMapConfig) -> int:
    samples = load_dataset(s.data)
    if not 0 <= s.index < len(samples):
        raise UsageError(f"--index {s.index} outside [0, {len(samples)})")
    sample = samples[s.index]
    model = load_checkpoint(s.checkpoint).model(best=True)
    with T.no_grad():
        res = forward_model(model, sample.cells, sample.grid)
    mass = res.attention_in_input_order(cfg.source)
    imap = render_importance(sample.cells, sample.grid, mass, cfg)
    out = Path(s.out)
    out.mkdir(parents=True, exist_ok=True)
    write_field_csv(out / "field.csv", imap.field)
    if cfg.fmt == "ppm":
        write_ppm(out / "heatmap.ppm", imap.image)
    write_manifest(out, "heatmap", [s, cfg],
                   {"label": sample.label, "predicted": res.prediction.label})
    print(f"sample {s.index}: label {sample.label}, predicted {res.prediction.label}; wrote {out}")
    return EXIT_OK


ABLATION_FIELDS = ["axis", "fusion", "depth", "best_epoch", "val_weighted_f1", "test_accuracy",
                   "test_weighted_f1", "seconds"]


def cmd_ablate(s: AblateSettings, cfg: TrainConfig) -> int:
    train_set, val_set, test_set = _load_splits(s.data, SPLITS)
    C = _n_classes(s.data)
    runs = [("fusion", dataclasses.replace(cfg, fusion=f)) for f in _str_list(s.fusions)]
    runs += [("depth", dataclasses.replace(cfg, depth=d)) for d in _int_list(s.depths)]
    out = Path(s.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for axis, run_cfg in runs:
        t0 = time.perf_counter()
        result = train(run_cfg, train_set, val_set, n_classes=C)
        test = evaluate(result.model, test_set)
        rows.append({"axis": axis, "fusion": run_cfg.fusion, "depth": run_cfg.depth,
                     "best_epoch": result.checkpoint.best_epoch,
                     "val_weighted_f1": f"{result.checkpoint.best_metric:.6f}",
                     "test_accuracy": f"{test['accuracy']:.6f}",
                     "test_weighted_f1": f"{test['weighted_f1']:.6f}",
                     "seconds": f"{time.perf_counter() - t0:.1f}"})
        print(", ".join(f"{k}={v}" for k, v in rows[-1].items()), flush=True)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_FIELDS)
        w.writeheader()
        w.writerows(rows)
    write_manifest(out, "ablate", [s, cfg])
    return EXIT_OK


COMMANDS = {
    "gen": (cmd_gen, "generate the synthetic train/val/test datasets"),
    "train": (cmd_train, "train a model and write a checkpoint"),
    "eval": (cmd_eval, "evaluate a checkpoint on a dataset"),
    "bench": (cmd_bench, "time the aggregators across set sizes"),
    "oracle-check": (cmd_oracle, "compare fast kernels with their reference implementations"),
    "heatmap": (cmd_heatmap, "render a cell influence map for one sample"),
    "ablate": (cmd_ablate, "sweep fusion strategies and stack depths"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="itcrwkv", description="Cell-set aggregation and tissue-cell interaction toolkit.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", default=None, help="key = value settings file")
        _add_flags(p, GROUPS[name])
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "itcrwkv: error: a subcommand is required")
        fn = COMMANDS[args.command][0]
        return fn(*resolve(args.command, args))
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except CheckFailed as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ValueError, KeyError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
