"""The cross-validated teacher / student / distillation experiment.

Every stage shares one fold plan, derived from ``folds.seed`` only, so the
teacher, the baseline student and the distilled student are compared on
identical validation folds.  The baseline and distilled students of a fold
also share their initial weights, batch order and augmentation angles; the
loss is the only difference between them.

Artifacts per stage directory::

    fold_<i>.kdck          checkpoint of the fold-i model
    fold_metrics.csv/json  validation metrics per fold plus the average row
    holdout_metrics.csv    the same models scored on the 20 % holdout
    config.txt             resolved configuration (re-runnable)
    manifest.json          config hash, seeds, wall time, checkpoint digests
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .checkpoint import read_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .data import Dataset, FoldPlan, load_dataset, make_stratified_folds, oversample_balance, split_holdout
from .distill import ALPHA_GRID, TEMPERATURE_GRID, DistillConfig, train_distill
from .metrics import ConfusionCounts, FoldReport, MetricRow, compute_metrics, emit_report
from .models import build_mini_student, build_mini_teacher, count_params
from .training import evaluate_model, train_supervised

logger = logging.getLogger(__name__)

STAGES = ("teacher", "student", "distill")
STAGE_TITLES = {
    "teacher": "Teacher model (dual-branch)",
    "student": "Student model before knowledge distillation",
    "distill": "Student model after knowledge distillation",
}

__all__ = [
    "STAGES",
    "MissingPrerequisiteError",
    "LeakageError",
    "SplitPlan",
    "FoldOutcome",
    "StageResult",
    "derive_seed",
    "plan_splits",
    "fold_indices",
    "run_stage",
    "run_single",
    "write_report",
    "load_stage",
    "seed_study",
]


class MissingPrerequisiteError(RuntimeError):
    """A stage needs an artifact (usually a teacher checkpoint) that does not exist."""


class LeakageError(RuntimeError):
    """A validation or holdout item ended up in a training multiset."""


def derive_seed(*parts) -> int:
    """Stable 32-bit seed from integers and short strings."""
    words = []
    for p in parts:
        if isinstance(p, str):
            words.extend(p.encode("utf-8"))
        else:
            words.append(int(p))
    return int(np.random.SeedSequence(words).generate_state(1)[0])


@dataclass(frozen=True)
class SplitPlan:
    """Fold plan over positions of ``pool``; ``pool[pos]`` is the dataset index.

    Normally ``pool`` is the identity.  In paper-faithful mode it is the
    oversampled multiset built before splitting, so duplicates of one item
    can land in different folds.
    """

    folds: FoldPlan
    pool: np.ndarray
    paper_faithful: bool = False


def plan_splits(labels, cfg: ExperimentConfig) -> SplitPlan:
    labels = np.asarray(labels)
    pool = np.arange(len(labels))
    if cfg.paper_faithful:
        logger.warning(
            "paper-faithful oversampling: the dataset is balanced before splitting, so duplicated "
            "minority items can appear in both training and validation folds (leakage)"
        )
        pool = oversample_balance(labels, pool, derive_seed(cfg.fold_seed, "pool"))
    pool_labels = labels[pool]
    train, test = split_holdout(pool_labels, cfg.train_fraction, seed=cfg.fold_seed)
    folds = make_stratified_folds(pool_labels, train, cfg.k, seed=cfg.fold_seed, holdout=test)
    return SplitPlan(folds, pool, cfg.paper_faithful)


def fold_indices(plan: SplitPlan, fold: Optional[int], labels, cfg: ExperimentConfig, seed: int):
    """Dataset indices ``(train multiset, validation, holdout)`` for one fold.

    ``fold=None`` trains on the whole non-holdout portion.  Outside
    paper-faithful mode the training multiset is oversampled here, after
    splitting, and checked against the evaluation indices.
    """
    fp = plan.folds
    if fold is None:
        train_pos = np.sort(np.concatenate(fp.folds))
        val_pos = np.zeros(0, dtype=np.int64)
    else:
        train_pos, val_pos = fp.train_indices(fold), fp.validation_indices(fold)
    hold_pos = np.asarray(fp.holdout, dtype=np.int64)
    train = plan.pool[train_pos]
    val, hold = plan.pool[val_pos], plan.pool[hold_pos]
    if plan.paper_faithful:
        return train, val, hold, int(np.isin(train, np.concatenate([val, hold])).sum())
    if cfg.oversample:
        train = oversample_balance(labels, train, derive_seed(seed, fold if fold is not None else "all", "oversample"))
    leaked = np.intersect1d(train, np.concatenate([val, hold]))
    if leaked.size:
        raise LeakageError(f"fold {fold}: {leaked.size} evaluation indices inside the training multiset")
    return train, val, hold, 0


@dataclass
class FoldOutcome:
    fold: int
    validation: Optional[ConfusionCounts]
    holdout: Optional[ConfusionCounts]
    history: list
    checkpoint: Optional[str]
    digest: str
    params: int
    seeds: dict
    leaked: int = 0


@dataclass
class StageResult:
    stage: str
    folds: list
    out_dir: Path
    manifest: dict = field(default_factory=dict)

    @property
    def rows(self) -> list:
        return [compute_metrics(f.validation) for f in self.folds]

    @property
    def holdout_rows(self) -> list:
        return [compute_metrics(f.holdout) for f in self.folds if f.holdout is not None]

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean([r.accuracy for r in self.rows]))


def _file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _teacher_path(teacher_dir: Path, fold: Optional[int]) -> Path:
    return teacher_dir / ("final.kdck" if fold is None else f"fold_{fold + 1}.kdck")


def _train_one(stage, data: Dataset, plan, fold, cfg: ExperimentConfig, teacher_dir, distill_cfg, save_dir):
    labels = data.labels
    tag = fold + 1 if fold is not None else 0
    # baseline and distilled students share init and training seeds
    role = "teacher" if stage == "teacher" else "student"
    seeds = {
        "run": cfg.seed,
        "init": derive_seed(cfg.seed, tag, f"init-{role}"),
        "train": derive_seed(cfg.seed, tag, f"train-{role}"),
    }
    train, val, hold, leaked = fold_indices(plan, fold, labels, cfg, cfg.seed)
    tcfg = cfg.teacher_train if stage == "teacher" else cfg.student_train
    tcfg = replace(tcfg, seed=seeds["train"])
    augment = None if cfg.augment is None else replace(cfg.augment, seed=seeds["train"])
    xy = (data.images[train], labels[train])
    classes = int(labels.max()) + 1 if len(labels) else 2
    classes = max(classes, 2)
    if stage == "teacher":
        model = build_mini_teacher(cfg.scale, classes, seed=seeds["init"], in_channels=data.images.shape[1])
        _, history = train_supervised(model, xy, tcfg, augment)
    else:
        model = build_mini_student(cfg.scale, classes, seed=seeds["init"], in_channels=data.images.shape[1])
        if stage == "student":
            _, history = train_supervised(model, xy, tcfg, augment)
        else:
            tpath = _teacher_path(teacher_dir, fold)
            if not tpath.exists():
                raise MissingPrerequisiteError(f"teacher checkpoint required: {tpath} not found")
            before = _file_sha256(tpath)
            teacher, info = read_checkpoint(tpath)
            if teacher.kind != "teacher":
                raise MissingPrerequisiteError(f"teacher checkpoint required: {tpath} holds a {teacher.kind!r} model")
            teacher.freeze()
            digest = teacher.param_digest()
            _, history = train_distill(teacher, model, xy, distill_cfg, tcfg, augment)
            if teacher.param_digest() != digest or _file_sha256(tpath) != before:
                raise RuntimeError(f"teacher {tpath} changed during distillation")
            seeds["teacher_checkpoint_sha256"] = before
    val_counts = evaluate_model(model, (data.images[val], labels[val])) if len(val) else None
    hold_counts = evaluate_model(model, (data.images[hold], labels[hold])) if len(hold) else None
    ckpt = None
    if save_dir is not None:
        name = "final.kdck" if fold is None else f"fold_{fold + 1}.kdck"
        ckpt = str(save_checkpoint(model, save_dir / name, config_hash=cfg.config_hash, seed=seeds))
    return FoldOutcome(tag, val_counts, hold_counts, [float(h) for h in history], ckpt, model.param_digest(),
                       count_params(model), seeds, leaked)


def _run_folds(stage, data, plan, cfg, teacher_dir, distill_cfg, save_dir, parallel):
    folds = list(range(plan.folds.k))

    def job(f):
        logger.info("%s: fold %d/%d", stage, f + 1, len(folds))
        return _train_one(stage, data, plan, f, cfg, teacher_dir, distill_cfg, save_dir)

    if parallel and parallel > 1:
        with ThreadPoolExecutor(max_workers=parallel) as pool:
            return list(pool.map(job, folds))
    return [job(f) for f in folds]


def _tune(data, plan, cfg, teacher_dir, parallel) -> tuple:
    """Pick (alpha, T) from the built-in grid by mean validation accuracy."""
    grid = []
    best = None
    for alpha in ALPHA_GRID:
        for temp in TEMPERATURE_GRID:
            dcfg = DistillConfig(alpha, temp, cfg.distill.kl_direction)
            outs = _run_folds("distill", data, plan, cfg, teacher_dir, dcfg, None, parallel)
            acc = float(np.mean([compute_metrics(o.validation).accuracy for o in outs]))
            grid.append({"alpha": alpha, "temperature": temp, "mean_accuracy": acc})
            logger.info("tune alpha=%g T=%g -> %.4f", alpha, temp, acc)
            if best is None or acc > best[0]:
                best = (acc, dcfg)
    return best[1], grid


def _stage_dir(out_dir: Path, stage: str) -> Path:
    d = Path(out_dir) / stage
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_stage(result: StageResult, cfg: ExperimentConfig, extra: dict, started: float, command: str):
    d = result.out_dir
    report = FoldReport(STAGE_TITLES[result.stage], result.rows)
    emit_report(report, "csv", d / "fold_metrics.csv")
    payload = report.to_dict()
    payload["confusion"] = [f.validation.__dict__ for f in result.folds]
    (d / "fold_metrics.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    if result.holdout_rows:
        emit_report(FoldReport(STAGE_TITLES[result.stage] + " (holdout)", result.holdout_rows), "csv",
                    d / "holdout_metrics.csv")
    (d / "config.txt").write_text(cfg.to_text())
    result.manifest = {
        "command": command,
        "stage": result.stage,
        "config": json.loads(cfg.canonical()),
        "config_hash": cfg.config_hash,
        "seeds": {"run": cfg.seed, "folds": cfg.fold_seed, "per_fold": [f.seeds for f in result.folds]},
        "parameters": result.folds[0].params,
        "checkpoints": [{"path": Path(f.checkpoint).name, "param_sha256": f.digest} for f in result.folds if f.checkpoint],
        "loss_history": [f.history for f in result.folds],
        "leaked_items": [f.leaked for f in result.folds],
        "wall_time_s": round(time.perf_counter() - started, 3),
        "numpy": np.__version__,
        **extra,
    }
    (d / "manifest.json").write_text(json.dumps(result.manifest, indent=2, sort_keys=True) + "\n")


def _load(cfg: ExperimentConfig) -> Dataset:
    return load_dataset(cfg.dataset_path, cfg.dataset_format, side=cfg.scale.side)


def run_stage(stage: str, cfg: ExperimentConfig, out_dir=None, *, teacher_dir=None, parallel: int = 1,
              data: Optional[Dataset] = None) -> StageResult:
    """Run the k-fold protocol for one stage and write its artifacts."""
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}; expected one of {STAGES}")
    started = time.perf_counter()
    out_dir = Path(out_dir or cfg.out_dir)
    data = data if data is not None else _load(cfg)
    plan = plan_splits(data.labels, cfg)
    teacher_dir = Path(teacher_dir) if teacher_dir else out_dir / "teacher"
    extra: dict = {"paper_faithful_oversampling": cfg.paper_faithful}
    dcfg = cfg.distill
    if stage == "distill":
        missing = [str(_teacher_path(teacher_dir, f)) for f in range(plan.folds.k)
                   if not _teacher_path(teacher_dir, f).exists()]
        if missing:
            raise MissingPrerequisiteError(f"teacher checkpoint required: {missing[0]} not found")
        if cfg.tune:
            dcfg, grid = _tune(data, plan, cfg, teacher_dir, parallel)
            extra["tuning_grid"] = grid
        extra["distill"] = {"alpha": dcfg.alpha, "temperature": dcfg.temperature, "kl_direction": dcfg.kl_direction}
        extra["teacher_dir"] = str(teacher_dir)
    save_dir = _stage_dir(out_dir, stage)
    outs = _run_folds(stage, data, plan, cfg, teacher_dir, dcfg, save_dir, parallel)
    result = StageResult(stage, outs, save_dir)
    _write_stage(result, cfg, extra, started, "crossval")
    return result


def run_single(stage: str, cfg: ExperimentConfig, out_dir=None, *, teacher_path=None,
               data: Optional[Dataset] = None) -> FoldOutcome:
    """Train one model on the whole non-holdout portion and score it on the holdout."""
    started = time.perf_counter()
    out_dir = Path(out_dir or cfg.out_dir)
    data = data if data is not None else _load(cfg)
    plan = plan_splits(data.labels, cfg)
    teacher_dir = out_dir / "teacher"
    if stage == "distill":
        tpath = Path(teacher_path) if teacher_path else _teacher_path(teacher_dir, None)
        if not tpath.exists():
            raise MissingPrerequisiteError(f"teacher checkpoint required: {tpath} not found")
        teacher_dir = tpath.parent
        if tpath.name != "final.kdck":
            # _train_one looks for final.kdck; alias an explicitly named file
            teacher_dir = out_dir / ".teacher-link"
            teacher_dir.mkdir(parents=True, exist_ok=True)
            (teacher_dir / "final.kdck").write_bytes(tpath.read_bytes())
    save_dir = _stage_dir(out_dir, stage)
    out = _train_one(stage, data, plan, None, cfg, teacher_dir, cfg.distill, save_dir)
    if out.holdout is not None:
        emit_report(FoldReport(STAGE_TITLES[stage] + " (holdout)", [compute_metrics(out.holdout)]), "csv",
                    save_dir / "holdout_metrics.csv")
    (save_dir / "config.txt").write_text(cfg.to_text())
    manifest = {
        "command": f"train-{stage}" if stage != "distill" else "distill",
        "stage": stage,
        "config": json.loads(cfg.canonical()),
        "config_hash": cfg.config_hash,
        "seeds": out.seeds,
        "parameters": out.params,
        "checkpoint": {"path": Path(out.checkpoint).name, "param_sha256": out.digest},
        "loss_history": out.history,
        "wall_time_s": round(time.perf_counter() - started, 3),
    }
    (save_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_stage(out_dir, stage: str) -> tuple:
    """Fold rows and manifest of a finished stage."""
    d = Path(out_dir) / stage
    path = d / "fold_metrics.json"
    if not path.exists():
        raise MissingPrerequisiteError(f"{stage} results required: {path} not found (run crossval first)")
    payload = json.loads(path.read_text())
    rows = [MetricRow(**r) for r in payload["folds"]]
    manifest = json.loads((d / "manifest.json").read_text()) if (d / "manifest.json").exists() else {}
    return rows, manifest


def write_report(out_dir, formats=("text", "json", "csv")) -> dict:
    """Merge the three stages into teacher / before / after tables plus a parameter section."""
    out_dir = Path(out_dir)
    t_rows, t_man = load_stage(out_dir, "teacher")
    s_rows, s_man = load_stage(out_dir, "student")
    d_rows, d_man = load_stage(out_dir, "distill")
    t_params = t_man.get("parameters")
    s_params = d_man.get("parameters") or s_man.get("parameters")
    teacher = FoldReport(STAGE_TITLES["teacher"], t_rows)
    before = FoldReport(STAGE_TITLES["student"], s_rows)
    after = FoldReport(STAGE_TITLES["distill"], d_rows, improvement_over=before.average,
                       teacher_params=t_params, student_params=s_params)
    written = {}
    if "text" in formats:
        text = "\n".join(r.text_table() for r in (teacher, before, after))
        path = out_dir / "report.txt"
        path.write_text(text)
        written["text"] = path
    if "json" in formats:
        path = out_dir / "report.json"
        payload = {"teacher": teacher.to_dict(), "student_before": before.to_dict(), "student_after": after.to_dict()}
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        written["json"] = path
    if "csv" in formats:
        for key, rep in (("teacher", teacher), ("student_before", before), ("student_after", after)):
            written[f"csv_{key}"] = emit_report(rep, "csv", out_dir / f"report_{key}.csv")
    return {"teacher": teacher, "before": before, "after": after, "files": written}


def seed_study(cfg: ExperimentConfig, out_dir=None, seeds=(0, 1, 2, 3, 4), *, parallel: int = 1,
               data: Optional[Dataset] = None) -> dict:
    """Baseline versus distilled student over several run seeds.

    The teacher stage runs once, with ``cfg.seed``; each run seed then trains
    a baseline and a distilled student on the same folds against that
    teacher.  Returns per-seed mean validation accuracies and writes them to
    ``seed_study.json``.
    """
    started = time.perf_counter()
    out_dir = Path(out_dir or cfg.out_dir)
    data = data if data is not None else _load(cfg)
    teacher = run_stage("teacher", cfg, out_dir, parallel=parallel, data=data)
    rows = []
    for seed in seeds:
        scfg = cfg.with_overrides(seed=int(seed))
        sdir = out_dir / f"seed_{seed}"
        base = run_stage("student", scfg, sdir, parallel=parallel, data=data)
        dist = run_stage("distill", scfg, sdir, teacher_dir=teacher.out_dir, parallel=parallel, data=data)
        rows.append({"seed": int(seed), "baseline": base.mean_accuracy, "distilled": dist.mean_accuracy})
        logger.info("seed %d: baseline %.4f distilled %.4f", seed, base.mean_accuracy, dist.mean_accuracy)
    baseline = float(np.mean([r["baseline"] for r in rows]))
    distilled = float(np.mean([r["distilled"] for r in rows]))
    summary = {
        "teacher_mean_accuracy": teacher.mean_accuracy,
        "seeds": rows,
        "baseline_mean": baseline,
        "distilled_mean": distilled,
        "distilled_at_least_baseline": sum(r["distilled"] >= r["baseline"] for r in rows),
        "wall_time_s": round(time.perf_counter() - started, 3),
    }
    (out_dir / "seed_study.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary
