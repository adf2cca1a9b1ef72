"""Experiment harness: config files, result store, grids, and reports.

Configs are flat ``key = value`` text files with ``#`` comments and a typed
schema; unknown or malformed keys fail fast with the field named.  Each
(env, seed) cell trains through npg.train, lands in a ResultStore as a
JSON-lines trace plus a wall-clock sidecar, and is keyed by its config hash
so completed cells are never recomputed.  Grid search walks a cartesian
product of hyperparameter axes on one tuning environment and selects by the
performance metric with a deterministic tie-break.

Determinism contract: traces and metrics.csv depend only on configs and
seeds, so reruns reproduce them byte for byte.  Wall-clock sidecars and
timing.csv are genuinely volatile and live in clearly separated files.
"""

import csv
import io
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import metrics as metrics_mod
from .npg import RunTrace, TrainerConfig, train

WORKERS_ENV_VAR = "NPGBENCH_WORKERS"


class ConfigError(ValueError):
    """Malformed config input; CLI maps this to exit code 1."""


# ------------------------------------------------------------- config parsing


def _parse_bool(raw):
    if raw.lower() in ("true", "yes", "1"):
        return True
    if raw.lower() in ("false", "no", "0"):
        return False
    raise ValueError(f"expected a boolean, got '{raw}'")


_SCALAR_PARSERS = {int: int, float: float, str: str, bool: _parse_bool}


def _convert(key, raw, kind):
    try:
        if isinstance(kind, tuple):  # ("list", elem) comma-separated
            elem = _SCALAR_PARSERS[kind[1]]
            values = [elem(part.strip()) for part in raw.split(",") if part.strip()]
            if not values:
                raise ValueError("expected a non-empty comma-separated list")
            return values
        return _SCALAR_PARSERS[kind](raw)
    except ValueError as exc:
        raise ConfigError(f"field '{key}': {exc}") from None


def parse_kv_text(text, source="<config>"):
    """Flat key = value lines; '#' starts a comment; blank lines ignored."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got '{stripped}'")
        key, _, value = stripped.partition("=")
        key, value = key.strip(), value.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key '{key}'")
        out[key] = value
    return out


# trainer fields settable from config files; env and seed come from the
# experiment-level lists
TRAINER_FIELD_TYPES = {
    f.name: type(getattr(TrainerConfig(), f.name))
    for f in fields(TrainerConfig)
    if f.name not in ("env", "seed")
}


def _apply_schema(raw, schema, source):
    for key in raw:
        if key not in schema:
            raise ConfigError(f"{source}: unknown field '{key}'")
    return {key: _convert(key, raw[key], kind) for key, kind in schema.items() if key in raw}


@dataclass
class ExperimentConfig:
    label: str
    envs: list
    seeds: list
    output_dir: str
    trainer: dict = field(default_factory=dict)  # TrainerConfig overrides

    def cells(self):
        out = []
        for env in self.envs:
            for seed in self.seeds:
                out.append(TrainerConfig(env=env, seed=seed, **self.trainer).validate())
        return out


def parse_experiment_config(path):
    source = str(path)
    raw = parse_kv_text(Path(path).read_text(), source)
    schema = dict(TRAINER_FIELD_TYPES)
    schema.update(
        label=str, envs=("list", str), seeds=("list", int), output_dir=str
    )
    values = _apply_schema(raw, schema, source)
    for required in ("label", "envs", "seeds", "output_dir"):
        if required not in values:
            raise ConfigError(f"{source}: missing required field '{required}'")
    trainer = {k: v for k, v in values.items() if k in TRAINER_FIELD_TYPES}
    config = ExperimentConfig(
        label=values["label"], envs=values["envs"], seeds=values["seeds"],
        output_dir=values["output_dir"], trainer=trainer,
    )
    try:
        config.cells()
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return config


# grid axes; max_lr only varies on clip-mode cells
GRID_AXES = ("damping", "critic_lr", "step_mode", "max_lr", "batch_size", "critic_backend")


@dataclass
class GridSpec:
    label: str
    tuning_env: str
    seeds: list
    output_dir: str
    backends: list
    axes: dict          # axis name -> list of values
    fixed: dict = field(default_factory=dict)  # remaining TrainerConfig overrides

    def cells(self):
        """Cartesian product of the axes, one TrainerConfig per cell and
        backend.  The max_lr axis applies to clip-mode cells only; line-search
        cells keep the TrainerConfig default."""
        cells = []
        for backend in self.backends:
            for damping in self.axes["damping"]:
                for critic_lr in self.axes["critic_lr"]:
                    for batch_size in self.axes["batch_size"]:
                        for critic_backend in self.axes["critic_backend"]:
                            for step_mode in self.axes["step_mode"]:
                                max_lrs = (
                                    self.axes["max_lr"] if step_mode == "clip" else [None]
                                )
                                for max_lr in max_lrs:
                                    overrides = dict(
                                        self.fixed,
                                        backend=backend,
                                        damping=damping,
                                        critic_lr=critic_lr,
                                        batch_size=batch_size,
                                        critic_backend=critic_backend,
                                        step_mode=step_mode,
                                        env=self.tuning_env,
                                    )
                                    if max_lr is not None:
                                        overrides["max_lr"] = max_lr
                                    cells.append(TrainerConfig(**overrides).validate())
        if not cells:
            raise ConfigError("grid is empty")
        return cells


def parse_grid_spec(path):
    source = str(path)
    raw = parse_kv_text(Path(path).read_text(), source)
    schema = {
        name: kind for name, kind in TRAINER_FIELD_TYPES.items() if name not in GRID_AXES
    }
    schema.pop("backend", None)
    schema.update(
        label=str, tuning_env=str, seeds=("list", int), output_dir=str,
        backends=("list", str),
        damping=("list", float), critic_lr=("list", float),
        step_mode=("list", str), max_lr=("list", float),
        batch_size=("list", int), critic_backend=("list", str),
    )
    values = _apply_schema(raw, schema, source)
    for required in ("label", "tuning_env", "seeds", "output_dir", "backends"):
        if required not in values:
            raise ConfigError(f"{source}: missing required field '{required}'")
    axes = {
        "damping": values.get("damping", [1e-1, 1e-2]),
        "critic_lr": values.get("critic_lr", [1e-2, 1e-3]),
        "step_mode": values.get("step_mode", ["line_search", "clip"]),
        "max_lr": values.get("max_lr", [1e-1, 1e-2]),
        "batch_size": values.get("batch_size", [2048, 1024, 512, 256]),
        "critic_backend": values.get("critic_backend", ["kfac"]),
    }
    fixed = {
        k: v
        for k, v in values.items()
        if k in TRAINER_FIELD_TYPES and k not in GRID_AXES and k != "backend"
    }
    spec = GridSpec(
        label=values["label"], tuning_env=values["tuning_env"], seeds=values["seeds"],
        output_dir=values["output_dir"], backends=values["backends"], axes=axes,
        fixed=fixed,
    )
    try:
        spec.cells()
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return spec


# ------------------------------------------------------------- result store


class ResultStore:
    """Directory of traces keyed by config hash with a JSON manifest.

    Layout: manifest.json, configs in the manifest itself, traces/*.jsonl,
    timings/*.json.  The manifest is rewritten after each completed cell;
    a cell whose hash is already present is never recomputed.
    """

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "traces").mkdir(exist_ok=True)
        (self.root / "timings").mkdir(exist_ok=True)
        self.manifest_path = self.root / "manifest.json"
        if self.manifest_path.exists():
            self.manifest = json.loads(self.manifest_path.read_text())
        else:
            self.manifest = {"traces": {}}

    def _stem(self, config):
        return f"{config.env}__{config.backend}__seed{config.seed}__{config.config_hash()}"

    def has(self, config):
        key = config.config_hash()
        entry = self.manifest["traces"].get(key)
        return entry is not None and (self.root / entry["file"]).exists()

    def store(self, config, trace, label=""):
        stem = self._stem(config)
        trace_file = f"traces/{stem}.jsonl"
        timing_file = f"timings/{stem}.json"
        (self.root / trace_file).write_text("\n".join(trace.trace_lines()) + "\n")
        (self.root / timing_file).write_text(json.dumps(trace.wallclock_ms) + "\n")
        self.manifest["traces"][config.config_hash()] = {
            "file": trace_file,
            "timing": timing_file,
            "env": config.env,
            "backend": config.backend,
            "seed": config.seed,
            "label": label,
            "invalid": trace.invalid,
            "config": asdict(config),
        }
        self._write_manifest()

    def _write_manifest(self):
        self.manifest_path.write_text(
            json.dumps(self.manifest, sort_keys=True, indent=2) + "\n"
        )

    def load(self, config):
        return self.load_hash(config.config_hash())

    def load_hash(self, key):
        entry = self.manifest["traces"].get(key)
        if entry is None:
            raise KeyError(f"no stored trace for config hash {key}")
        lines = (self.root / entry["file"]).read_text().splitlines()
        timing_path = self.root / entry["timing"]
        timings = json.loads(timing_path.read_text()) if timing_path.exists() else None
        return RunTrace.from_lines(lines, wallclock_ms=timings)

    def entries(self):
        """(hash, manifest entry) pairs sorted by (env, backend, seed)."""
        items = self.manifest["traces"].items()
        return sorted(items, key=lambda kv: (kv[1]["env"], kv[1]["backend"], kv[1]["seed"]))

    def grouped_traces(self, require_valid=True):
        """{(backend, env): [trace sorted by seed]} over the whole store."""
        groups = {}
        for key, entry in self.entries():
            if entry["invalid"] and require_valid:
                raise ConfigError(
                    f"trace {entry['file']} is flagged invalid ({entry['env']}, "
                    f"{entry['backend']}, seed {entry['seed']}); exclude or rerun it"
                )
            groups.setdefault((entry["backend"], entry["env"]), []).append(
                self.load_hash(key)
            )
        for traces in groups.values():
            traces.sort(key=lambda t: t.seed)
        return groups


# ------------------------------------------------------------- execution


def worker_count():
    raw = os.environ.get(WORKERS_ENV_VAR, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV_VAR} must be an integer, got '{raw}'") from None
    if n < 1:
        raise ConfigError(f"{WORKERS_ENV_VAR} must be >= 1, got {n}")
    return n


def _train_cell(config_dict):
    trace = train(TrainerConfig(**config_dict))
    return trace.trace_lines(), trace.wallclock_ms


def execute_cells(configs, store, label=""):
    """Train every config not already in the store.  Returns the number of
    newly trained cells.  Results are committed in sorted (env, backend,
    seed) order regardless of worker scheduling."""
    ordered = sorted(configs, key=lambda c: (c.env, c.backend, c.seed))
    pending = [c for c in ordered if not store.has(c)]
    if not pending:
        return 0
    workers = worker_count()
    if workers == 1:
        results = [_train_cell(asdict(c)) for c in pending]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, len(pending))) as pool:
            results = list(pool.map(_train_cell, [asdict(c) for c in pending]))
    for config, (lines, timings) in zip(pending, results):
        trace = RunTrace.from_lines(lines, wallclock_ms=timings)
        if trace.invalid:
            print(
                f"warning: run ({config.env}, {config.backend}, seed {config.seed}) "
                f"aborted mid-run: {trace.error}",
                file=sys.stderr,
            )
        store.store(config, trace, label=label)
    return len(pending)


def run_experiment(config):
    """Train all cells of an ExperimentConfig into its output directory."""
    store = ResultStore(config.output_dir)
    trained = execute_cells(config.cells(), store, label=config.label)
    return store, trained


# ------------------------------------------------------------- grid search


def _cell_sort_key(config):
    # tie-break: lower damping, then line_search over clip, then smaller
    # batch; remaining axes keep the order total
    return (
        config.damping,
        0 if config.step_mode == "line_search" else 1,
        config.batch_size,
        config.max_lr,
        config.critic_lr,
        config.critic_backend,
    )


def default_grid_eval(spec, store):
    """Train every cell on each seed and score it by the performance metric."""

    def eval_fn(cell, seeds):
        seeded = [TrainerConfig(**dict(asdict(cell), seed=s)) for s in seeds]
        execute_cells(seeded, store, label=spec.label)
        return metrics_mod.performance([store.load(c) for c in seeded])

    return eval_fn


def grid_search(spec, eval_fn=None):
    """Evaluate the full grid and pick the best cell per backend.

    eval_fn(cell_config, seeds) -> performance score; injectable so selection
    logic can be audited on synthetic scores.  Returns (selection, results):
    selection maps backend -> (best config, score), results is one
    (config, score) per cell in evaluation order.
    """
    if eval_fn is None:
        store = ResultStore(spec.output_dir)
        eval_fn = default_grid_eval(spec, store)
    cells = spec.cells()
    results = [(cell, float(eval_fn(cell, spec.seeds))) for cell in cells]
    selection = {}
    for cell, score in results:
        best = selection.get(cell.backend)
        if (
            best is None
            or score > best[1]
            or (score == best[1] and _cell_sort_key(cell) < _cell_sort_key(best[0]))
        ):
            selection[cell.backend] = (cell, score)
    return selection, results


def write_grid_outputs(spec, selection, results):
    """grid_results.csv (all cells) and selection.json (best per backend)."""
    out = Path(spec.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    axis_cols = list(GRID_AXES)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["backend"] + axis_cols + ["performance"])
    for cell, score in results:
        writer.writerow(
            [cell.backend]
            + [getattr(cell, a) for a in axis_cols]
            + [f"{score:.6f}"]
        )
    (out / "grid_results.csv").write_text(buf.getvalue())
    payload = {
        backend: {"config": asdict(cell), "performance": score}
        for backend, (cell, score) in sorted(selection.items())
    }
    (out / "selection.json").write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


# ------------------------------------------------------------- metrics files


def _fmt(x):
    return "NaN" if x is None else f"{x:.6f}"


def compute_metrics(result_dir, thresholds=None, bootstrap_seed=0):
    """Metric tables for one result directory.

    Writes metrics.csv (deterministic columns), timing.csv (volatile
    wall-clock column plus its scaling metadata), thresholds.json, and
    aggregate.json.  Thresholds default to the lowest backend performance
    per environment within this store, the baseline convention.
    """
    store = ResultStore(result_dir)
    groups = store.grouped_traces()
    if not groups:
        raise ConfigError(f"{result_dir}: no traces to report on")
    records = []
    for (backend, env), traces in sorted(groups.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        records.append(
            metrics_mod.MetricRecord(
                backend=backend,
                environment=env,
                performance=metrics_mod.performance(traces),
                stability=metrics_mod.stability(traces),
                sample_efficiency=None,  # filled once thresholds are known
                computation_time=metrics_mod.computation_time(traces),
            )
        )
    if thresholds is None:
        thresholds = metrics_mod.thresholds_from_records(records)
    for rec in records:
        if rec.environment not in thresholds:
            raise ConfigError(f"no threshold for environment '{rec.environment}'")
        rec.sample_efficiency = metrics_mod.sample_efficiency(
            groups[(rec.backend, rec.environment)], thresholds[rec.environment]
        )
    # per-env normalization is undefined when the best score is non-positive
    # (the op errors by contract); the table then shows NaN for that column
    try:
        normalized = {
            (r.backend, r.environment): r.performance
            for r in metrics_mod.normalize_performance(records)
        }
        normalization_note = None
    except ValueError as exc:
        normalized = {(r.backend, r.environment): None for r in records}
        normalization_note = str(exc)

    root = Path(result_dir)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        ["environment", "backend", "performance", "performance_normalized",
         "stability", "sample_efficiency"]
    )
    for rec in records:
        writer.writerow(
            [rec.environment, rec.backend, _fmt(rec.performance),
             _fmt(normalized[(rec.backend, rec.environment)]),
             _fmt(rec.stability), _fmt(rec.sample_efficiency)]
        )
    (root / "metrics.csv").write_text(buf.getvalue())

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        ["environment", "backend", "computation_time", "time_target_steps", "time_scale"]
    )
    for rec in records:
        writer.writerow(
            [rec.environment, rec.backend, _fmt(rec.computation_time),
             metrics_mod.TIME_TARGET_STEPS, int(metrics_mod.TIME_SCALE)]
        )
    (root / "timing.csv").write_text(buf.getvalue())

    (root / "thresholds.json").write_text(
        json.dumps(
            {
                "values": {env: thresholds[env] for env in sorted(thresholds)},
                "display_divided_by": 1000,
                "display": {env: thresholds[env] / 1000.0 for env in sorted(thresholds)},
            },
            sort_keys=True,
            indent=2,
        )
        + "\n"
    )

    by_backend = {}
    for (backend, env), traces in groups.items():
        by_backend.setdefault(backend, {})[env] = traces
    aggregate_payload = {"meta": {
        "resamples": metrics_mod.BOOTSTRAP_RESAMPLES,
        "bootstrap_seed": bootstrap_seed,
        "score_scale": "per-run best return / best backend performance in env",
    }, "backends": {}}
    if normalization_note is not None:
        aggregate_payload["meta"]["note"] = normalization_note
    else:
        scores = metrics_mod.aggregate_inputs(by_backend)
        for backend in sorted(scores):
            if all(arr.size >= 2 for arr in scores[backend].values()):
                agg = metrics_mod.aggregate(scores[backend], seed=bootstrap_seed)
                aggregate_payload["backends"][backend] = {
                    name: asdict(getattr(agg, name))
                    for name in ("median", "iqm", "mean", "optimality_gap")
                }
    (root / "aggregate.json").write_text(
        json.dumps(aggregate_payload, sort_keys=True, indent=2) + "\n"
    )
    return records, thresholds


# ------------------------------------------------------------- reports


def percent_change(tuned, baseline):
    """100 (tuned - baseline) / |baseline|; None when undefined."""
    if tuned is None or baseline is None or baseline == 0.0:
        return None
    return 100.0 * (tuned - baseline) / abs(baseline)


def format_cell(tuned, baseline):
    """'value (+x%)' comparison cell; 'NaN' for an absent tuned value."""
    if tuned is None:
        return "NaN"
    pct = percent_change(tuned, baseline)
    if pct is None:
        return f"{tuned:.3f}"
    return f"{tuned:.3f} ({pct:+.0f}%)"


REPORT_METRICS = ("performance", "stability", "sample_efficiency", "computation_time")


def _records_by_cell(records):
    return {(r.environment, r.backend): r for r in records}


def build_report(baseline_records, tuned_records):
    """Comparison rows for shared cells; the best improvement per environment
    and metric column is wrapped in ** ** markers.

    Raises ConfigError when a tuned cell has no baseline counterpart.
    """
    base = _records_by_cell(baseline_records)
    rows = []
    for rec in tuned_records:
        cell = (rec.environment, rec.backend)
        if cell not in base:
            raise ConfigError(
                f"baseline is missing cell (env={cell[0]}, backend={cell[1]})"
            )
        row = {"environment": rec.environment, "backend": rec.backend}
        for name in REPORT_METRICS:
            tuned_v = getattr(rec, name)
            base_v = getattr(base[cell], name)
            row[name] = format_cell(tuned_v, base_v)
            row[f"_pct_{name}"] = percent_change(tuned_v, base_v)
        rows.append(row)
    # flag the largest improvement per (environment, metric)
    for env in sorted({r["environment"] for r in rows}):
        env_rows = [r for r in rows if r["environment"] == env]
        for name in REPORT_METRICS:
            scored = [r for r in env_rows if r[f"_pct_{name}"] is not None]
            if not scored:
                continue
            best = max(scored, key=lambda r: r[f"_pct_{name}"])
            best[name] = f"**{best[name]}**"
    for row in rows:
        for name in REPORT_METRICS:
            row.pop(f"_pct_{name}")
    rows.sort(key=lambda r: (r["environment"], r["backend"]))
    return rows


def write_report(rows, out_path):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = ["environment", "backend"] + list(REPORT_METRICS)
    writer.writerow(header)
    for row in rows:
        writer.writerow([row[h] for h in header])
    Path(out_path).write_text(buf.getvalue())
    return buf.getvalue()
