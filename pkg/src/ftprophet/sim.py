"""Hour-stepped streaming simulation, evaluation metrics, best-task analysis.

The loop replays a logged stream against a simulated clock ``tau``.  Each
step: (1) every learner updates from its pipelines, which can only release
information already available at ``tau``; (2) the fresh models score the
evaluation records logged during ``[tau, tau + step)``; (3) the online task
predictions for that step's arrivals are captured into the extended log;
(4) the clock advances one step.  Metrics are always computed against final
labels.  Given the same inputs and seed the report is bit-identical.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import ImpressionRecord, TaskSchedule
from .learners import FTPLearner, Hyper, Learner, LearnerSpec, build_learner
from .model import PROB_EPS, SharedBottomNet, SingleHeadNet
from .pipelines import ExtendedLog, StreamArrays, nearest_task

# Spread learner seeds; the ftp learner derives an internal seed at +1.
LEARNER_SEED_STRIDE = 1009


def log_loss(preds, labels) -> float:
    """Mean binary cross-entropy with clamped predictions."""
    p = np.clip(np.asarray(preds, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    y = np.asarray(labels, dtype=np.float64)
    if len(p) == 0:
        raise ValueError("log_loss of an empty batch")
    return float(np.mean(-y * np.log(p) - (1.0 - y) * np.log(1.0 - p)))


def auc(preds, labels) -> Optional[float]:
    """Rank-statistic AUC with midranks for ties; None when single-class."""
    p = np.asarray(preds, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if len(p) == 0:
        raise ValueError("auc of an empty batch")
    n_pos = int((y == 1).sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(p, kind="mergesort")
    sp = p[order]
    # midranks: every member of a tie group gets the group's average rank
    new_group = np.concatenate([[0], (np.diff(sp) != 0).astype(np.int64)])
    group_id = np.cumsum(new_group)
    group_sizes = np.bincount(group_id)
    group_ends = np.cumsum(group_sizes)
    group_starts = group_ends - group_sizes
    avg_rank = (group_starts + group_ends - 1) / 2.0 + 1.0  # 1-based
    ranks = np.empty(len(p))
    ranks[order] = avg_rank[group_id]
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def calibration_ratio(preds, labels) -> Optional[float]:
    """Mean prediction over mean final label; 1.0 is calibrated in aggregate."""
    y = np.asarray(labels, dtype=np.float64)
    if len(y) == 0 or y.mean() == 0.0:
        return None
    return float(np.mean(preds) / np.mean(y))


@dataclass(frozen=True)
class SimConfig:
    """Clock and evaluation-window settings for one simulation run."""

    start: int
    end: int
    eval_start: int
    eval_end: int
    d_max: int
    step: int = 3600

    def __post_init__(self) -> None:
        if self.step <= 0:
            raise ValueError("step must be positive")
        if not self.start <= self.eval_start < self.eval_end:
            raise ValueError(
                f"eval window [{self.eval_start}, {self.eval_end}) must follow start {self.start}"
            )
        if self.eval_end > self.end - self.d_max:
            raise ValueError(
                f"eval window must end by {self.end - self.d_max} so final labels exist "
                f"(stream end {self.end} minus d_max {self.d_max}), got {self.eval_end}"
            )


@dataclass
class HourRow:
    tau: int
    learner: str
    n_eval: int
    log_loss: Optional[float]
    auc: Optional[float]
    calibration: Optional[float]


@dataclass
class LearnerSummary:
    learner: str
    n_eval: int
    log_loss: Optional[float]
    auc: Optional[float]
    calibration: Optional[float]
    rel_log_loss: Optional[float] = None  # ratio to the prophet learner, 1.0 = parity
    rel_auc: Optional[float] = None


@dataclass
class TaskStat:
    d: int
    feedback_pct: float  # share of conversions with delay <= d, in percent
    best_count: int
    best_pct: float


@dataclass
class SimReport:
    seed: int
    learner_names: list[str]
    rows: list[HourRow]
    summaries: dict[str, LearnerSummary]
    task_stats: Optional[list[TaskStat]]
    n_records: int
    n_eval: int


def feedback_percentages(stream: StreamArrays, schedule: TaskSchedule) -> list[float]:
    """Share of conversions whose feedback arrived within each window, in percent."""
    conv = stream.t >= 0
    n_conv = int(conv.sum())
    if n_conv == 0:
        return [100.0 for _ in schedule]
    delay = stream.t[conv] - stream.s[conv]
    return [100.0 * float((delay <= d).mean()) for d in schedule]


def best_task_stats(
    extlog: ExtendedLog,
    prophet_net: SingleHeadNet,
    schedule: TaskSchedule,
    tau: int,
    rows: Optional[np.ndarray] = None,
) -> list[TaskStat]:
    """Per-window feedback share and how often each task is nearest the prophecy."""
    stream = extlog.stream
    if rows is None:
        sl = extlog.matured_rows(tau)
        rows = np.arange(sl.start, sl.stop)
    feedback = feedback_percentages(stream, schedule)
    if len(rows) == 0:
        return [
            TaskStat(d=d, feedback_pct=fb, best_count=0, best_pct=0.0)
            for d, fb in zip(schedule, feedback)
        ]
    prophecy = prophet_net.predict(stream.feat_idx[rows], stream.feat_val[rows])
    kstar = nearest_task(prophecy, extlog.preds[rows])
    counts = np.bincount(kstar, minlength=schedule.k)
    return [
        TaskStat(
            d=d,
            feedback_pct=fb,
            best_count=int(c),
            best_pct=100.0 * float(c) / len(rows),
        )
        for d, fb, c in zip(schedule, feedback, counts)
    ]


def imitation_stats(
    extlog: ExtendedLog,
    shared: SharedBottomNet,
    eval_only: bool = True,
) -> dict:
    """How well the policy's argmax matches the assigned best tasks.

    Uses the best-task targets stored when the entries matured (the actual
    imitation targets).  The reference point is the best constant guess, the
    modal best task over the same entries.
    """
    stream = extlog.stream
    rows = np.flatnonzero(extlog.kstar >= 0)
    if eval_only:
        rows = rows[stream.eval_mask[rows]]
    if len(rows) == 0:
        return {"n": 0, "policy_correct": 0, "constant_correct": 0}
    idx, val = stream.feat_idx[rows], stream.feat_val[rows]
    kstar = extlog.kstar[rows].astype(np.int64)
    weights, _ = shared.forward_policy(idx, val)
    policy_pick = np.argmax(weights, axis=1)
    counts = np.bincount(kstar, minlength=shared.n_tasks)
    return {
        "n": int(len(rows)),
        "policy_correct": int((policy_pick == kstar).sum()),
        "constant_correct": int(counts.max()),
        "kstar_counts": counts.tolist(),
    }


def run_simulation(
    records: Sequence[ImpressionRecord],
    specs: Sequence[LearnerSpec],
    schedule: TaskSchedule,
    sim_cfg: SimConfig,
    hyper: Hyper,
    seed: int,
    vocab_size: Optional[int] = None,
    poison_future: bool = False,
) -> tuple[SimReport, list[Learner]]:
    """Run the streaming loop; returns the report and the trained learners.

    ``poison_future`` additionally masks every conversion later than the
    current clock while pipelines compute labels.  Correct pipelines never
    look that far, so the report must be identical with or without it (the
    no-peek check).
    """
    if schedule.d_max != sim_cfg.d_max:
        raise ValueError(
            f"schedule d_max {schedule.d_max} != simulation d_max {sim_cfg.d_max}"
        )
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate learner names: {names}")
    stream = StreamArrays.from_records(records)
    if vocab_size is None:
        vocab_size = int(stream.feat_idx.max()) + 1
    cfg = hyper.model_config(vocab_size, stream.n_fields)
    learners = [
        build_learner(spec, stream, schedule, cfg, hyper, seed + LEARNER_SEED_STRIDE * (i + 1))
        for i, spec in enumerate(specs)
    ]

    rows_out: list[HourRow] = []
    acc_preds: dict[str, list[np.ndarray]] = {L.name: [] for L in learners}
    acc_labels: list[np.ndarray] = []

    for tau in range(sim_cfg.start, sim_cfg.end, sim_cfg.step):
        stream.label_clamp = tau if poison_future else None
        for L in learners:
            L.update(tau)
        arr = stream.arrivals(tau, tau + sim_cfg.step)
        in_eval_window = sim_cfg.eval_start <= tau < sim_cfg.eval_end
        if in_eval_window:
            sel = np.arange(arr.start, arr.stop)[stream.eval_mask[arr]]
            labels = stream.final_labels(sel)
            acc_labels.append(labels)
            for L in learners:
                if len(sel):
                    preds = L.predict(stream.feat_idx[sel], stream.feat_val[sel])
                else:
                    preds = np.empty(0)
                acc_preds[L.name].append(preds)
                rows_out.append(
                    HourRow(
                        tau=tau,
                        learner=L.name,
                        n_eval=len(sel),
                        log_loss=log_loss(preds, labels) if len(sel) else None,
                        auc=auc(preds, labels) if len(sel) else None,
                        calibration=calibration_ratio(preds, labels) if len(sel) else None,
                    )
                )
        for L in learners:
            L.observe_arrivals(arr)
    stream.label_clamp = None

    all_labels = np.concatenate(acc_labels) if acc_labels else np.empty(0)
    summaries: dict[str, LearnerSummary] = {}
    for L in learners:
        preds = np.concatenate(acc_preds[L.name]) if acc_preds[L.name] else np.empty(0)
        has = len(preds) > 0
        summaries[L.name] = LearnerSummary(
            learner=L.name,
            n_eval=len(preds),
            log_loss=log_loss(preds, all_labels) if has else None,
            auc=auc(preds, all_labels) if has else None,
            calibration=calibration_ratio(preds, all_labels) if has else None,
        )
    prophet_summary = summaries.get("prophet")
    if prophet_summary is not None and prophet_summary.log_loss is not None:
        for s in summaries.values():
            if s.log_loss is not None:
                s.rel_log_loss = s.log_loss / prophet_summary.log_loss
            if s.auc is not None and prophet_summary.auc:
                s.rel_auc = s.auc / prophet_summary.auc

    task_stats = None
    for L in learners:
        if isinstance(L, FTPLearner):
            task_stats = best_task_stats(
                L.extlog, L.prophet_net, schedule, sim_cfg.end
            )
            break

    report = SimReport(
        seed=seed,
        learner_names=names,
        rows=rows_out,
        summaries=summaries,
        task_stats=task_stats,
        n_records=len(stream),
        n_eval=int(len(all_labels)),
    )
    return report, learners


# -- serialization -------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_report_csv(report: SimReport, path: str) -> None:
    """One row per evaluated hour per learner; empty cells for absent metrics."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "tau", "learner", "n_eval", "log_loss", "auc", "calibration"])
        for r in report.rows:
            w.writerow(
                [report.seed, r.tau, r.learner, r.n_eval, _fmt(r.log_loss), _fmt(r.auc), _fmt(r.calibration)]
            )


def write_plot_data(report: SimReport, path: str) -> None:
    """Per-hour series relative to the prophet learner, for external plotting."""
    prophet_rows = {r.tau: r for r in report.rows if r.learner == "prophet"}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "tau", "learner", "log_loss", "rel_log_loss", "auc", "rel_auc"])
        for r in report.rows:
            ref = prophet_rows.get(r.tau)
            rel_ll = (
                r.log_loss / ref.log_loss
                if ref and r.log_loss is not None and ref.log_loss
                else None
            )
            rel_auc = (
                r.auc / ref.auc if ref and r.auc is not None and ref.auc else None
            )
            w.writerow(
                [report.seed, r.tau, r.learner, _fmt(r.log_loss), _fmt(rel_ll), _fmt(r.auc), _fmt(rel_auc)]
            )


def report_to_dict(report: SimReport) -> dict:
    return {
        "seed": report.seed,
        "n_records": report.n_records,
        "n_eval": report.n_eval,
        "learners": {
            name: {
                "n_eval": s.n_eval,
                "log_loss": s.log_loss,
                "auc": s.auc,
                "calibration": s.calibration,
                "rel_log_loss": s.rel_log_loss,
                "rel_auc": s.rel_auc,
            }
            for name, s in report.summaries.items()
        },
        "task_stats": None
        if report.task_stats is None
        else [
            {
                "d": t.d,
                "feedback_pct": t.feedback_pct,
                "best_count": t.best_count,
                "best_pct": t.best_pct,
            }
            for t in report.task_stats
        ],
    }
