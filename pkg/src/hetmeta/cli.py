"""Operator command line.

Subcommands: ``gen-data`` (synthetic corpora or local tabular ingestion),
``train`` (episodic meta-training from an INI-style config), ``eval``
(metrics tables and embedding export from a checkpoint), and ``selftest``
(the verification suites).

Configuration is a sectioned ``key = value`` text document ([run], [model],
[train], [sampler]); command-line ``--set section.key=value`` flags override
file values, and the effective configuration is echoed into the output
directory. Unknown keys are rejected before any work starts. Relative output
paths resolve under ``$HETMETA_OUT`` when that variable is set.

Exit codes: 0 success, 1 selftest property failure, 2 configuration error,
3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import os
import sys
from pathlib import Path

import numpy as np

from .data import (
    SamplerConfig,
    generate_circle_spiral_corpus,
    generate_regression_corpus,
    ingest_tabular,
    load_corpus,
    sample_episode,
    save_corpus,
    split_corpus,
)
from .errors import (
    HetmetaError,
    IngestionError,
    InvalidConfigError,
    InvalidValueError,
    NumericalFailureError,
    TaskNotSampleableError,
)
from .model import CLASSIFICATION, REGRESSION, ModelConfig, forward_embed, named_parameters
from .selfcheck import run_all
from .training import (
    HEAD_GP,
    HEAD_PROTOTYPE,
    TrainConfig,
    evaluate,
    load_checkpoint,
    meta_train,
    restore_model,
    save_checkpoint,
)

EXIT_OK = 0
EXIT_PROPERTY = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


@dataclasses.dataclass
class RunConfig:
    corpus: str = ""
    out: str = "run-output"
    seed: int = 0


_SECTIONS = {
    "run": RunConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "sampler": SamplerConfig,
}


def _parse_scalar(name: str, text: str, ftype):
    text = text.strip()
    try:
        if ftype is bool:
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if ftype is int:
            return int(text)
        if ftype is float:
            return float(text)
        return text
    except ValueError as err:
        raise InvalidConfigError(f"{name}: {err}") from err


def _parse_field(section: str, key: str, text: str, field):
    name = f"{section}.{key}"
    if field.type in ("tuple | None", "tuple"):
        if text.strip().lower() in ("", "none"):
            return None
        return tuple(int(v) for v in text.split(","))
    if field.type == "SamplerConfig":
        raise InvalidConfigError(f"{name}: set sampler values in the [sampler] section")
    ftype = {"int": int, "float": float, "bool": bool, "str": str}.get(field.type, str)
    return _parse_scalar(name, text, ftype)


def _section_values(parser: configparser.ConfigParser, section: str, overrides: dict):
    cls = _SECTIONS[section]
    fields = {f.name: f for f in dataclasses.fields(cls)}
    values = {}
    raw = dict(parser[section]) if parser.has_section(section) else {}
    raw.update(overrides.get(section, {}))
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise InvalidConfigError(f"unknown keys in [{section}]: {', '.join(unknown)}")
    for key, text in raw.items():
        values[key] = _parse_field(section, key, text, fields[key])
    return values


def _parse_overrides(pairs) -> dict:
    overrides: dict = {}
    for pair in pairs or []:
        if "=" not in pair or "." not in pair.split("=", 1)[0]:
            raise InvalidConfigError(f"--set expects section.key=value, got {pair!r}")
        target, value = pair.split("=", 1)
        section, key = target.split(".", 1)
        if section not in _SECTIONS:
            raise InvalidConfigError(f"unknown config section {section!r}")
        overrides.setdefault(section, {})[key.strip()] = value
    return overrides


def load_run_config(path: str | None, overrides: dict):
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    if path is not None:
        read = parser.read(path)
        if not read:
            raise IngestionError(f"config file not found: {path}")
        unknown = sorted(set(parser.sections()) - set(_SECTIONS))
        if unknown:
            raise InvalidConfigError(f"unknown config sections: {', '.join(unknown)}")
    run = RunConfig(**_section_values(parser, "run", overrides))
    mcfg = ModelConfig(**_section_values(parser, "model", overrides))
    sampler = SamplerConfig(**_section_values(parser, "sampler", overrides))
    train_values = _section_values(parser, "train", overrides)
    train_values["sampler"] = sampler
    train_values.setdefault("seed", run.seed)
    tcfg = TrainConfig(**train_values)
    return run, mcfg, tcfg


def _echo_config(path: Path, run: RunConfig, mcfg: ModelConfig, tcfg: TrainConfig):
    parser = configparser.ConfigParser()
    for section, obj in (("run", run), ("model", mcfg), ("train", tcfg),
                         ("sampler", tcfg.sampler)):
        parser.add_section(section)
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            if f.name == "sampler":
                continue
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            parser.set(section, f.name, "" if value is None else str(value))
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)


def _resolve_out(path: str) -> Path:
    root = os.environ.get("HETMETA_OUT", "")
    p = Path(path)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


# -- subcommands -----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    out = _resolve_out(args.out)
    if args.kind == "circle-spiral":
        tasks = generate_circle_spiral_corpus(args.seed, n_tasks=args.tasks)
    elif args.kind == "regression":
        tasks = generate_regression_corpus(args.seed, n_tasks=args.tasks)
    elif args.kind == "tabular":
        if not args.in_dir:
            raise InvalidConfigError("gen-data --kind tabular requires --in")
        if not args.target:
            raise InvalidConfigError("gen-data --kind tabular requires --target")
        files = sorted(Path(args.in_dir).glob("*.csv"))
        if not files:
            raise IngestionError(f"no .csv files under {args.in_dir}")
        tasks = [ingest_tabular(f, args.target, kind=args.task_kind) for f in files]
    else:
        raise InvalidConfigError(f"unknown corpus kind {args.kind!r}")
    fractions = tuple(float(v) for v in args.split.split(","))
    if len(fractions) != 3:
        raise InvalidConfigError("--split expects three comma-separated fractions")
    split = split_corpus(tasks, seed=args.seed, fractions=fractions)
    save_corpus(split, out)
    print(f"wrote {len(tasks)} tasks ({len(split.train)}/{len(split.validation)}/"
          f"{len(split.test)} train/validation/test) to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    overrides = _parse_overrides(args.set)
    run, mcfg, tcfg = load_run_config(args.config, overrides)
    if args.ablate:
        mcfg = dataclasses.replace(mcfg, **{args.ablate.replace("-", "_"): True})
    if args.out:
        run.out = args.out
    if args.corpus:
        run.corpus = args.corpus
    if not run.corpus:
        raise InvalidConfigError("no corpus path configured (run.corpus or --corpus)")
    corpus = load_corpus(_resolve_out(run.corpus))
    kinds = {t.kind for t in corpus.all_tasks()}
    if len(kinds) > 1:
        raise InvalidConfigError(f"mixed task kinds in corpus: {sorted(kinds)}")
    kind = kinds.pop()
    expected_head = HEAD_GP if kind == REGRESSION else HEAD_PROTOTYPE
    if tcfg.head != expected_head:
        raise InvalidConfigError(
            f"head {tcfg.head!r} does not fit {kind} tasks (use {expected_head!r})"
        )
    out = _resolve_out(run.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(out / "effective.cfg", run, mcfg, tcfg)

    if not args.quiet:
        tcfg = dataclasses.replace(tcfg, verbose=True)
    blocks, gp_head, report = meta_train(corpus, mcfg, tcfg)
    meta = {
        "model": dataclasses.asdict(mcfg),
        "head": tcfg.head,
        "seed": tcfg.seed,
        "best_epoch": report.best_epoch,
    }
    save_checkpoint(out / "best.ckpt", named_parameters(blocks, gp_head), meta)
    with open(out / "report.txt", "w", encoding="utf-8") as fh:
        fh.write(report.to_text())
    print(f"best epoch {report.best_epoch} (val loss {report.best_val_loss:.4f}), "
          f"stopped at {report.stopping_epoch}; checkpoint and report in {out}")
    return EXIT_OK


def _emit_embeddings(path: Path, corpus, mcfg, blocks, scfg, seed: int):
    rows = []
    max_dim = 0
    for idx, ds in enumerate(corpus.test):
        rng = np.random.default_rng([seed, idx])
        try:
            ep = sample_episode(ds, scfg, rng)
        except TaskNotSampleableError:
            continue
        z_l, z_u = forward_embed(ep, mcfg, blocks)
        for role, z, y in (("labeled", z_l.data, ep.y_labeled),
                           ("unlabeled", z_u.data, ep.y_unlabeled)):
            for row, label in zip(z, y):
                value = int(np.argmax(label)) if ds.kind == CLASSIFICATION else float(label[0])
                rows.append((ds.name, role, value, [float(v) for v in row]))
                max_dim = max(max_dim, len(row))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("task,role,label," + ",".join(f"e{i}" for i in range(max_dim)) + "\n")
        for name, role, label, values in rows:
            padded = [repr(v) for v in values] + [""] * (max_dim - len(values))
            fh.write(f"{name},{role},{label}," + ",".join(padded) + "\n")


def cmd_eval(args) -> int:
    ckpt = Path(args.ckpt)
    if not ckpt.exists():
        raise IngestionError(f"checkpoint not found: {ckpt}")
    arrays, meta = load_checkpoint(ckpt)
    mcfg, blocks, gp_head = restore_model(meta, arrays)
    head = meta.get("head", HEAD_PROTOTYPE)
    corpus = load_corpus(_resolve_out(args.corpus))
    tasks = {"train": corpus.train, "validation": corpus.validation,
             "test": corpus.test}[args.split]
    shots = [int(s) for s in args.shots.split(",")]
    lines = ["shot,mean,stderr"]
    metric = "accuracy" if head == HEAD_PROTOTYPE else "mse"
    print(f"split={args.split} metric={metric}")
    for shot in shots:
        # for the GP head, "shot" is the flat labeled count per episode
        scfg = SamplerConfig(shots=shot, unlabeled_per_class=args.unlabeled,
                             labeled_count=shot, unlabeled_count=args.unlabeled)
        result = evaluate(tasks, mcfg, blocks, head, gp_head, scfg,
                          trials=args.trials, seed=args.seed)
        print(f"shot={shot}  {result.mean:.3f} +/- {result.stderr:.3f}")
        lines.append(f"{shot},{result.mean!r},{result.stderr!r}")
    if args.out:
        out = _resolve_out(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    if args.emit_embeddings:
        scfg = SamplerConfig(shots=shots[0], unlabeled_per_class=args.unlabeled,
                             labeled_count=shots[0], unlabeled_count=args.unlabeled)
        _emit_embeddings(Path(args.emit_embeddings), corpus, mcfg, blocks, scfg, args.seed)
        print(f"embeddings written to {args.emit_embeddings}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    results = run_all(trials=args.trials, double=args.double, seed=args.seed)
    failed = 0
    for r in results:
        print(r.line())
        failed += not r.passed
    print(f"{len(results) - failed}/{len(results)} properties passed")
    return EXIT_OK if failed == 0 else EXIT_PROPERTY


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hetmeta",
        description="Meta-learning over tasks with heterogeneous attribute spaces.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate or ingest a task corpus")
    gen.add_argument("--kind", required=True,
                     choices=["circle-spiral", "regression", "tabular"])
    gen.add_argument("--tasks", type=int, default=100)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    gen.add_argument("--split", default="0.7,0.1,0.2",
                     help="train,validation,test fractions")
    gen.add_argument("--in", dest="in_dir", help="directory of raw .csv files")
    gen.add_argument("--target", help="target column for tabular ingestion")
    gen.add_argument("--task-kind", default=CLASSIFICATION,
                     choices=[CLASSIFICATION, REGRESSION])
    gen.set_defaults(func=cmd_gen_data)

    train = sub.add_parser("train", help="meta-train a model")
    train.add_argument("--config", help="INI config file")
    train.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override a config value")
    train.add_argument("--ablate", choices=[
        "example-attn-only", "attribute-attn-only", "drop-observed-indicator",
        "drop-attlab-indicators", "drop-residual", "drop-layernorm"])
    train.add_argument("--corpus")
    train.add_argument("--out")
    train.add_argument("--quiet", action="store_true",
                       help="suppress per-interval progress lines")
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--corpus", required=True)
    ev.add_argument("--split", default="test",
                    choices=["train", "validation", "test"])
    ev.add_argument("--shots", default="1,3,5")
    ev.add_argument("--trials", type=int, default=10)
    ev.add_argument("--unlabeled", type=int, default=15,
                    help="unlabeled examples per class (or count for regression)")
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--out")
    ev.add_argument("--emit-embeddings", metavar="PATH",
                    help="write per-example embeddings + labels as CSV")
    ev.set_defaults(func=cmd_eval)

    selftest = sub.add_parser("selftest", help="run the verification suites")
    selftest.add_argument("--trials", type=int, default=100)
    selftest.add_argument("--double", action="store_true",
                          help="double precision and tighter tolerances")
    selftest.add_argument("--seed", type=int, default=0)
    selftest.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (InvalidConfigError,) as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (IngestionError, TaskNotSampleableError, FileNotFoundError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalFailureError, InvalidValueError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    except HetmetaError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
