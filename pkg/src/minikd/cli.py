"""``kd`` command-line entry point.

    kd <command> --config <path> [--out <dir>] [--seed <u64>] [--parallel <n>]

Commands: train-teacher, train-student, distill, crossval, report, synth,
gradcheck.  Exit codes: 0 success, 2 config error, 3 data error, 4 missing
prerequisite, 5 numeric failure.  Failures also print one JSON object on
stderr (``{"error": ..., "exit_code": ..., "message": ...}``).  Set
``KD_LOG`` to error, info or debug for log verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_PREREQ = 4
EXIT_NUMERIC = 5

COMMANDS = ("train-teacher", "train-student", "distill", "crossval", "report", "gradcheck", "synth")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kd", description="Desk-scale knowledge distillation experiments.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="experiment config file (key = value lines)")
    p.add_argument("--out", help="output directory (overrides output.dir)")
    p.add_argument("--seed", type=int, help="run seed (overrides seed)")
    p.add_argument("--parallel", type=int, default=1, help="folds trained concurrently (default 1)")
    p.add_argument("--stage", choices=("teacher", "student", "distill", "all"), default="all",
                   help="crossval stage (default all, in order)")
    p.add_argument("--teacher", help="teacher checkpoint (distill) or teacher stage directory (crossval)")
    p.add_argument("--instances", type=int, default=100, help="gradcheck random instances")
    p.add_argument("--n-per-class", type=int, default=1000, help="synth: images per class")
    p.add_argument("--side", type=int, default=32, help="synth: image side")
    p.add_argument("--path", help="synth: output container path")
    return p


def _fail(code: int, kind: str, message: str) -> int:
    print(json.dumps({"error": kind, "exit_code": code, "message": message}), file=sys.stderr)
    return code


def _setup_logging() -> None:
    level = os.environ.get("KD_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")
    if level not in levels:
        logging.getLogger("minikd").error("KD_LOG=%r not recognised; using error", level)


def _load_config(args):
    from .config import parse_config

    if not args.config:
        raise _Usage("--config is required for this command")
    cfg = parse_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out:
        overrides["output.dir"] = str(Path(args.out).resolve())
    return cfg.with_overrides(**overrides) if overrides else cfg


class _Usage(Exception):
    pass


def _run(args) -> int:
    from . import experiment as ex
    from .metrics import compute_metrics

    if args.command == "gradcheck":
        from .gradcheck import gradient_suite

        reports = gradient_suite(instances=args.instances)
        for r in reports:
            print(r.line())
        ok = all(r.passed for r in reports)
        print("gradcheck: all operations within tolerance" if ok else "gradcheck: FAILED")
        return EXIT_OK if ok else EXIT_NUMERIC

    if args.command == "synth":
        from .synth import synth_dataset

        if not args.path:
            raise _Usage("synth needs --path")
        path = synth_dataset(args.path, n_per_class=args.n_per_class, side=args.side,
                             seed=7 if args.seed is None else args.seed)
        print(f"wrote {path}")
        return EXIT_OK

    if args.command == "report":
        if args.config:
            out = _load_config(args).out_dir
        elif args.out:
            out = Path(args.out)
        else:
            raise _Usage("report needs --out or --config")
        rep = ex.write_report(out)
        print(rep["files"]["text"].read_text(), end="")
        return EXIT_OK

    cfg = _load_config(args)
    out = cfg.out_dir
    if args.command in ("train-teacher", "train-student", "distill"):
        stage = {"train-teacher": "teacher", "train-student": "student", "distill": "distill"}[args.command]
        res = ex.run_single(stage, cfg, out, teacher_path=args.teacher)
        acc = compute_metrics(res.holdout).accuracy if res.holdout else float("nan")
        print(f"{stage}: holdout accuracy {acc:.4f}, checkpoint {res.checkpoint}")
        return EXIT_OK

    stages = ex.STAGES if args.stage == "all" else (args.stage,)
    for stage in stages:
        res = ex.run_stage(stage, cfg, out, teacher_dir=args.teacher, parallel=args.parallel)
        print(f"{stage}: mean validation accuracy {res.mean_accuracy:.4f} "
              f"({res.manifest['wall_time_s']:.1f} s) -> {res.out_dir}")
    if args.stage == "all":
        rep = ex.write_report(out)
        print(f"report: {rep['files']['text']}")
    return EXIT_OK


def main(argv=None) -> int:
    _setup_logging()
    args = _parser().parse_args(argv)
    from .checkpoint import CheckpointError
    from .config import ConfigError
    from .data import DatasetError
    from .experiment import LeakageError, MissingPrerequisiteError
    from .training import NumericError

    try:
        # one BLAS thread keeps metric files bit-reproducible
        with threadpool_limits(1):
            return _run(args)
    except _Usage as exc:
        return _fail(EXIT_CONFIG, "usage", str(exc))
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc))
    except MissingPrerequisiteError as exc:
        return _fail(EXIT_PREREQ, "missing-prerequisite", str(exc))
    except (DatasetError, LeakageError, CheckpointError) as exc:
        return _fail(EXIT_DATA, "data", str(exc))
    except FileNotFoundError as exc:
        kind = "config" if args.config and not Path(args.config).exists() else "data"
        return _fail(EXIT_CONFIG if kind == "config" else EXIT_DATA, kind, str(exc))
    except OSError as exc:
        return _fail(EXIT_DATA, "data", str(exc))
    except NumericError as exc:
        return _fail(EXIT_NUMERIC, "numeric", str(exc))
    except ValueError as exc:
        # remaining validation failures come from dataset/class-count checks
        return _fail(EXIT_DATA, "data", str(exc))


if __name__ == "__main__":
    sys.exit(main())
