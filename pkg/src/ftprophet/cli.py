"""Config-driven experiment entry points.

Subcommands:

* ``run``       - execute the streaming simulation for every seed in a config,
                  writing per-seed CSV reports, JSON summaries, checkpoints
                  and the ftp extended log under the output directory.
* ``gen``       - write the synthetic stream of a config to a canonical log.
* ``stats``     - delay and feedback summary of a log file.
* ``besttask``  - feedback% / best% table from a finished run directory.

Configs are TOML (or the JSON snapshot a run leaves behind); CLI flags
override config fields.  Seeds run in parallel worker processes, capped by
the ``FTPROPHET_WORKERS`` environment variable.  Exit codes: 0 success,
2 invalid config, 3 numeric abort (non-finite gradients).
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import math
import os
import sys
from typing import Optional

import numpy as np

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

from .core import TaskSchedule
from .datagen import DelayMixture, GeneratorConfig, generate_stream
from .ingest import (
    CRITEO_FIELDS,
    FeatureHasher,
    read_canonical_log,
    read_criteo_log,
    write_canonical_log,
)
from .learners import FTPLearner, Hyper, LearnerSpec
from .model import NanGradientError, SingleHeadNet, save_params
from .pipelines import nearest_task, read_extended_log, write_extended_log
from .sim import (
    SimConfig,
    report_to_dict,
    run_simulation,
    write_plot_data,
    write_report_csv,
)

WORKERS_ENV = "FTPROPHET_WORKERS"


class ConfigError(ValueError):
    """Invalid configuration; carries the offending field path."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


def _get(cfg: dict, path: str, kind, default=None, required: bool = False):
    cur = cfg
    parts = path.split(".")
    for part in parts[:-1]:
        cur = cur.get(part, {}) if isinstance(cur, dict) else {}
    val = cur.get(parts[-1], None) if isinstance(cur, dict) else None
    if val is None:
        if required:
            raise ConfigError(path, "missing required field")
        return default
    if kind is float and isinstance(val, int):
        val = float(val)
    if not isinstance(val, kind):
        raise ConfigError(path, f"expected {kind.__name__}, got {type(val).__name__}")
    return val


def load_config_file(path: str) -> dict:
    if not os.path.exists(path):
        raise ConfigError("config", f"file not found: {path}")
    if path.endswith(".json"):
        with open(path) as fh:
            return json.load(fh)
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def apply_overrides(cfg: dict, sets: list[str]) -> dict:
    """Apply ``--set section.key=value`` overrides (values parsed as TOML)."""
    for item in sets:
        if "=" not in item:
            raise ConfigError("--set", f"expected key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = tomllib.loads(f"v = {raw}")["v"]
        except tomllib.TOMLDecodeError:
            value = raw
        cur = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            cur = cur.setdefault(part, {})
        cur[parts[-1]] = value
    return cfg


def _parse_mixture(raw, field: str) -> DelayMixture:
    try:
        return DelayMixture(tuple((float(w), float(r)) for w, r in raw))
    except (TypeError, ValueError) as exc:
        raise ConfigError(field, str(exc)) from None


def build_generator_config(cfg: dict, seed: int) -> GeneratorConfig:
    d_max = _get(cfg, "run.d_max", int, required=True)
    data = cfg.get("data", {})
    regimes = None
    if "delay_regimes" in data:
        regimes = tuple(
            _parse_mixture(entry.get("mixture"), f"data.delay_regimes[{i}].mixture")
            for i, entry in enumerate(data["delay_regimes"])
        )
    mixture_raw = _get(cfg, "data.delay_mixture", list, default=None)
    if mixture_raw is None and regimes is None:
        raise ConfigError("data.delay_mixture", "missing required field")
    base = _parse_mixture(mixture_raw, "data.delay_mixture") if mixture_raw else regimes[0]
    regime_probs = _get(cfg, "data.regime_probs", list, default=None)
    try:
        return GeneratorConfig.sampled(
            seed=seed,
            n_records=_get(cfg, "data.n_records", int, required=True),
            horizon=_get(cfg, "data.horizon", int, required=True),
            field_cards=tuple(_get(cfg, "data.fields", list, required=True)),
            n_buckets=_get(cfg, "data.n_buckets", int, required=True),
            delay_mixture=base,
            d_max=d_max,
            weight_scale=_get(cfg, "data.weight_scale", float, default=0.8),
            weight_seed=_get(cfg, "data.weight_seed", int, default=7),
            bias=_get(cfg, "data.bias", float, default=0.0),
            regime_field=_get(cfg, "data.regime_field", int, default=None),
            delay_regimes=regimes,
            regime_probs=tuple(regime_probs) if regime_probs else None,
        )
    except ValueError as exc:
        raise ConfigError("data", str(exc)) from None


def build_specs(cfg: dict) -> list[LearnerSpec]:
    raw = cfg.get("learners")
    if not raw:
        raise ConfigError("learners", "at least one learner required")
    specs = []
    for i, entry in enumerate(raw):
        kind = entry.get("kind")
        try:
            specs.append(LearnerSpec(kind=kind, waiting_delay=entry.get("delay")))
        except ValueError as exc:
            raise ConfigError(f"learners[{i}]", str(exc)) from None
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ConfigError("learners", f"duplicate learner names: {names}")
    return specs


def build_hyper(cfg: dict) -> Hyper:
    return Hyper(
        emb_dim=_get(cfg, "model.emb_dim", int, default=8),
        hidden=_get(cfg, "model.hidden", int, default=128),
        lrelu_slope=_get(cfg, "model.lrelu_slope", float, default=0.01),
        lr=_get(cfg, "model.lr", float, default=1e-3),
        policy_lr=_get(cfg, "model.policy_lr", float, default=None),
        l2=_get(cfg, "model.l2", float, default=1e-6),
        batch_size=_get(cfg, "model.batch_size", int, default=256),
        base_rate=_get(cfg, "model.base_rate", float, default=0.5),
        pu_nonneg=_get(cfg, "model.pu_nonneg", bool, default=False),
        shuffle=_get(cfg, "model.shuffle", bool, default=True),
    )


def build_schedule(cfg: dict) -> TaskSchedule:
    delays = _get(cfg, "run.schedule", list, required=True)
    d_max = _get(cfg, "run.d_max", int, required=True)
    try:
        schedule = TaskSchedule(tuple(int(d) for d in delays))
    except ValueError as exc:
        raise ConfigError("run.schedule", str(exc)) from None
    if schedule.d_max != d_max:
        raise ConfigError(
            "run.schedule", f"last window {schedule.d_max} must equal run.d_max {d_max}"
        )
    return schedule


def load_records(cfg: dict, seed: int):
    """Records plus the vocabulary size and stream end for one seed."""
    source = _get(cfg, "data.source", str, required=True)
    step = _get(cfg, "run.step", int, default=3600)
    eval_window = (
        _get(cfg, "run.eval_start", int, required=True),
        _get(cfg, "run.eval_end", int, required=True),
    )
    if source == "synthetic":
        gen = build_generator_config(cfg, seed)
        records = generate_stream(gen, eval_window=eval_window)
        return records, gen.n_fields * gen.n_buckets, gen.horizon
    if source != "file":
        raise ConfigError("data.source", f"must be 'synthetic' or 'file', got {source!r}")
    path = _get(cfg, "data.path", str, required=True)
    if not os.path.exists(path):
        raise ConfigError("data.path", f"file not found: {path}")
    fmt = _get(cfg, "data.format", str, default="canonical")
    n_buckets = _get(cfg, "data.n_buckets", int, required=True)
    d_max = _get(cfg, "run.d_max", int, required=True)
    if fmt == "canonical":
        n_fields = _get(cfg, "data.n_fields", int, required=True)
        records = list(
            read_canonical_log(path, n_fields, n_buckets, d_max, eval_window=eval_window)
        )
    elif fmt == "criteo":
        n_fields = CRITEO_FIELDS
        hasher = FeatureHasher(n_fields=n_fields, n_buckets=n_buckets)
        records = list(read_criteo_log(path, hasher, d_max=d_max, eval_window=eval_window))
    else:
        raise ConfigError("data.format", f"must be 'canonical' or 'criteo', got {fmt!r}")
    if not records:
        raise ConfigError("data.path", f"no records in {path}")
    end = _get(cfg, "run.end", int, default=None)
    if end is None:
        last = max(r.log_time for r in records)
        end = int(math.ceil((last + 1) / step) * step)
    return records, n_fields * n_buckets, end


def build_sim_config(cfg: dict, end: int) -> SimConfig:
    eval_start = _get(cfg, "run.eval_start", int, required=True)
    warmup = _get(cfg, "run.warmup", int, default=eval_start)
    if eval_start < warmup:
        raise ConfigError("run.eval_start", f"eval must not start during warmup ({warmup})")
    try:
        return SimConfig(
            start=_get(cfg, "run.start", int, default=0),
            end=end,
            eval_start=eval_start,
            eval_end=_get(cfg, "run.eval_end", int, required=True),
            d_max=_get(cfg, "run.d_max", int, required=True),
            step=_get(cfg, "run.step", int, default=3600),
        )
    except ValueError as exc:
        raise ConfigError("run.eval_end", str(exc)) from None


def run_one_seed(cfg: dict, seed: int, out_root: str, plot_data: bool) -> dict:
    """Worker body: simulate one seed and write its artifacts."""
    records, vocab_size, end = load_records(cfg, seed)
    sim_cfg = build_sim_config(cfg, end)
    schedule = build_schedule(cfg)
    hyper = build_hyper(cfg)
    specs = build_specs(cfg)
    report, learners = run_simulation(
        records, specs, schedule, sim_cfg, hyper, seed, vocab_size=vocab_size
    )
    seed_dir = os.path.join(out_root, f"seed_{seed}")
    ckpt_dir = os.path.join(seed_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    write_report_csv(report, os.path.join(seed_dir, "report.csv"))
    if plot_data:
        write_plot_data(report, os.path.join(seed_dir, "plot_data.csv"))
    summary = report_to_dict(report)
    summary["schedule"] = list(schedule.delays)
    summary["model"] = {
        "vocab_size": vocab_size,
        "n_fields": len(records[0].features),
        "emb_dim": hyper.emb_dim,
        "hidden": hyper.hidden,
        "lrelu_slope": hyper.lrelu_slope,
        "base_rate": hyper.base_rate,
    }
    for L in learners:
        save_params(os.path.join(ckpt_dir, f"{L.name}.ckpt"), L.checkpoint())
        if isinstance(L, FTPLearner):
            write_extended_log(
                os.path.join(seed_dir, "extlog_ftp.bin"), L.extlog, sim_cfg.end
            )
    with open(os.path.join(seed_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary


def _worker(args_tuple):  # module-level for pickling
    return run_one_seed(*args_tuple)


def cmd_run(args) -> int:
    cfg = load_config_file(args.config)
    apply_overrides(cfg, args.set or [])
    if args.out:
        cfg.setdefault("run", {})["out_dir"] = args.out
    if args.seeds:
        cfg.setdefault("run", {})["seeds"] = [int(s) for s in args.seeds.split(",")]
    seeds = _get(cfg, "run.seeds", list, required=True)
    out_root = _get(cfg, "run.out_dir", str, required=True)
    # validate everything up front so failures are cheap and named
    build_schedule(cfg)
    build_hyper(cfg)
    build_specs(cfg)
    if _get(cfg, "data.source", str, required=True) == "file":
        path = _get(cfg, "data.path", str, required=True)
        if not os.path.exists(path):
            raise ConfigError("data.path", f"file not found: {path}")
    os.makedirs(out_root, exist_ok=True)
    with open(os.path.join(out_root, "config.json"), "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")

    jobs = [(cfg, int(seed), out_root, bool(args.plot_data)) for seed in seeds]
    workers = min(len(jobs), os.cpu_count() or 1, int(os.environ.get(WORKERS_ENV, len(jobs)) or 1))
    if workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            summaries = list(pool.map(_worker, jobs))
    else:
        summaries = [_worker(job) for job in jobs]

    # combined per-hour CSV across seeds, in seed order
    combined = os.path.join(out_root, "report.csv")
    with open(combined, "w") as out:
        for i, seed in enumerate(seeds):
            with open(os.path.join(out_root, f"seed_{seed}", "report.csv")) as fh:
                lines = fh.readlines()
            out.writelines(lines if i == 0 else lines[1:])
    for seed, summary in zip(seeds, summaries):
        for name, s in sorted(summary["learners"].items()):
            ll = "n/a" if s["log_loss"] is None else f"{s['log_loss']:.5f}"
            aucs = "n/a" if s["auc"] is None else f"{s['auc']:.4f}"
            print(f"seed {seed}  {name:<16} log_loss {ll}  auc {aucs}")
    return 0


def cmd_gen(args) -> int:
    cfg = load_config_file(args.config)
    apply_overrides(cfg, args.set or [])
    if _get(cfg, "data.source", str, required=True) != "synthetic":
        raise ConfigError("data.source", "gen requires a synthetic data source")
    seeds = _get(cfg, "run.seeds", list, required=True)
    seed = int(args.seed) if args.seed is not None else int(seeds[0])
    gen = build_generator_config(cfg, seed)
    records = generate_stream(gen)
    n = write_canonical_log(records, args.out, gen.n_buckets)
    print(f"wrote {n} records to {args.out} (seed {seed}, n_buckets {gen.n_buckets})")
    return 0


def _read_times(path: str, fmt: str):
    import gzip

    opener = gzip.open if path.endswith(".gz") else open
    s_col, t_col = (0, 1) if fmt == "criteo" else (1, 2)
    s_list, t_list = [], []
    with opener(path, "rt") as fh:
        for line_no, line in enumerate(fh, start=1):
            cols = line.rstrip("\n").split("\t")
            if len(cols) <= t_col:
                raise ConfigError("log", f"line {line_no}: too few columns")
            s_list.append(int(cols[s_col]))
            t_list.append(-1 if cols[t_col] == "" else int(cols[t_col]))
    return np.asarray(s_list, dtype=np.int64), np.asarray(t_list, dtype=np.int64)


def cmd_stats(args) -> int:
    if not os.path.exists(args.log):
        raise ConfigError("log", f"file not found: {args.log}")
    s, t = _read_times(args.log, args.format)
    if args.d_max is not None:
        # feedback beyond the horizon counts as no conversion
        t = np.where((t >= 0) & (t - s > args.d_max), -1, t)
    conv = t >= 0
    delays = t[conv] - s[conv]
    out = {
        "n_records": int(len(s)),
        "n_conversions": int(conv.sum()),
        "conversion_rate": float(conv.mean()),
        "stream_start": int(s.min()),
        "stream_end": int(s.max()),
    }
    if conv.any():
        qs = [0.1, 0.25, 0.5, 0.75, 0.9, 0.99]
        out["delay_quantiles"] = {
            str(q): float(np.quantile(delays, q)) for q in qs
        }
    if args.schedule:
        windows = [int(x) for x in args.schedule.split(",")]
        out["feedback_pct"] = {
            str(d): (100.0 * float((delays <= d).mean()) if conv.any() else 100.0)
            for d in windows
        }
    print(json.dumps(out, indent=2, sort_keys=True))
    return 0


def cmd_besttask(args) -> int:
    seed_dir = args.run_dir
    summary_path = os.path.join(seed_dir, "summary.json")
    extlog_path = os.path.join(seed_dir, "extlog_ftp.bin")
    ckpt_path = os.path.join(seed_dir, "checkpoints", "ftp.ckpt")
    for p in (summary_path, extlog_path, ckpt_path):
        if not os.path.exists(p):
            raise ConfigError("run_dir", f"missing artifact: {p}")
    with open(summary_path) as fh:
        summary = json.load(fh)
    model = summary["model"]
    schedule = summary["schedule"]
    entries = [e for e in read_extended_log(extlog_path) if e.final_label is not None]
    if not entries:
        raise ConfigError("run_dir", "extended log holds no matured entries")

    from .model import ModelConfig, load_params

    cfg = ModelConfig(
        vocab_size=model["vocab_size"],
        n_fields=model["n_fields"],
        emb_dim=model["emb_dim"],
        hidden=model["hidden"],
        lrelu_slope=model["lrelu_slope"],
        base_rate=model["base_rate"],
    )
    prophet = SingleHeadNet(cfg, seed=0)
    loaded = load_params(ckpt_path)
    prophet_params = {
        k.split(".", 1)[1]: v for k, v in loaded.items() if k.startswith("prophet.")
    }
    if set(prophet_params) != set(prophet.params):
        raise ConfigError("run_dir", f"checkpoint {ckpt_path} lacks prophet tensors")
    prophet.params = prophet_params

    idx = np.array([[i for i, _ in e.features] for e in entries], dtype=np.int64)
    val = np.array([[v for _, v in e.features] for e in entries])
    preds = np.array([e.task_preds for e in entries])
    prophecy = prophet.predict(idx, val)
    kstar = nearest_task(prophecy, preds)
    counts = np.bincount(kstar, minlength=len(schedule))
    feedback = summary.get("task_stats") or []
    fb_by_d = {t["d"]: t["feedback_pct"] for t in feedback}

    print(f"{'d_k':>10}  {'Feedback%':>9}  {'Best%':>6}")
    for k, d in enumerate(schedule):
        fb = fb_by_d.get(d)
        fb_txt = f"{fb:9.1f}" if fb is not None else " " * 9
        print(f"{d:>10}  {fb_txt}  {100.0 * counts[k] / len(entries):6.1f}")
    return 0


def main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="ftprophet",
        description="Delayed-feedback CVR prediction: streaming simulation and analysis",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run the streaming simulation per seed")
    p_run.add_argument("config")
    p_run.add_argument("--out", help="override run.out_dir")
    p_run.add_argument("--seeds", help="override run.seeds, comma separated")
    p_run.add_argument("--plot-data", action="store_true", help="write per-hour relative series")
    p_run.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config field")
    p_run.set_defaults(func=cmd_run)

    p_gen = sub.add_parser("gen", help="write the synthetic stream to a canonical log")
    p_gen.add_argument("config")
    p_gen.add_argument("--out", required=True)
    p_gen.add_argument("--seed", type=int, help="stream seed (default: first run seed)")
    p_gen.add_argument("--set", action="append", metavar="KEY=VALUE")
    p_gen.set_defaults(func=cmd_gen)

    p_stats = sub.add_parser("stats", help="delay/feedback summary of a log file")
    p_stats.add_argument("log")
    p_stats.add_argument("--format", choices=["canonical", "criteo"], default="canonical")
    p_stats.add_argument("--schedule", help="comma-separated windows for feedback%%")
    p_stats.add_argument("--d-max", type=int, default=None)
    p_stats.set_defaults(func=cmd_stats)

    p_best = sub.add_parser("besttask", help="feedback%%/best%% table from a seed run dir")
    p_best.add_argument("run_dir")
    p_best.set_defaults(func=cmd_besttask)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NanGradientError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
