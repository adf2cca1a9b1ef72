"""Benchmark metrics over training traces.

Four per-(backend, environment) summaries, each oriented so that larger is
better: performance as is, and stability, sample efficiency, and computation
time with their signs flipped.  Normalization rescales performance per
environment against the best backend, and the aggregate scores (median,
interquartile mean, mean, optimality gap) come with stratified bootstrap
confidence intervals.

Traces enter as RunTrace objects.  Seeds of one cell must share their
checkpoint grid, which the deterministic trainer guarantees for a shared
config.  A checkpoint whose batch finished no episode carries no return; such
gaps are forward-filled per seed, and leading gaps are dropped for every
seed together so the across-seed matrix stays rectangular.
"""

from dataclasses import dataclass, replace

import numpy as np
from scipy.stats import trim_mean

TIME_TARGET_STEPS = 10_000
TIME_SCALE = 10.0  # desk-scale wall-clock window, scaled to the 100K-step convention
BOOTSTRAP_RESAMPLES = 2000


@dataclass
class MetricRecord:
    backend: str
    environment: str
    performance: float
    stability: float
    sample_efficiency: float  # None when the threshold is never reached
    computation_time: float


@dataclass
class Estimate:
    point: float
    low: float
    high: float


@dataclass
class AggregateScores:
    median: Estimate
    iqm: Estimate
    mean: Estimate
    optimality_gap: Estimate


# ------------------------------------------------------------- trace access


def _filled_returns(trace):
    """Per-seed return curve with gaps forward-filled.

    Returns (values, first_valid): values[k] is meaningful for k >=
    first_valid; earlier entries never saw a completed episode.
    """
    values = np.zeros(len(trace.checkpoints))
    first_valid = None
    last = None
    for k, cp in enumerate(trace.checkpoints):
        if cp.mean_return is not None:
            last = cp.mean_return
            if first_valid is None:
                first_valid = k
        values[k] = np.nan if last is None else last
    if first_valid is None:
        raise ValueError("trace has no checkpoint with a completed episode")
    return values, first_valid


def align_traces(traces):
    """Stack seed curves on a shared checkpoint grid.

    Returns (env_steps, matrix) with matrix[i, k] the forward-filled return
    of seed i at checkpoint k.  Checkpoints before every seed has a value
    are dropped.
    """
    traces = list(traces)
    if not traces:
        raise ValueError("need at least one trace")
    steps = traces[0].env_steps
    for t in traces[1:]:
        if not np.array_equal(t.env_steps, steps):
            raise ValueError("traces have misaligned checkpoint grids")
    rows, starts = zip(*(_filled_returns(t) for t in traces))
    start = max(starts)
    return steps[start:], np.stack(rows)[:, start:]


# ------------------------------------------------------------- the four metrics


def performance(traces):
    """Best across-seed mean return over the run."""
    _, matrix = align_traces(traces)
    return float(np.max(np.mean(matrix, axis=0)))


def stability(traces):
    """Negated average across-seed standard deviation (larger is better)."""
    _, matrix = align_traces(traces)
    if matrix.shape[0] < 2:
        raise ValueError("stability needs at least 2 seeds")
    return -float(np.mean(np.std(matrix, axis=0)))


def sample_efficiency(traces, threshold):
    """Negated env steps until the across-seed mean first reaches threshold.

    None when the threshold is never reached; reports render that as NaN.
    """
    steps, matrix = align_traces(traces)
    means = np.mean(matrix, axis=0)
    hits = np.nonzero(means >= threshold)[0]
    if hits.size == 0:
        return None
    return -float(steps[hits[0]])


def time_to_steps(trace, target_steps):
    """Seconds of training wall-clock until target_steps env steps.

    Sums whole updates through the one that crosses the target; a trace that
    ends short is extrapolated linearly.
    """
    if len(trace.wallclock_ms) != len(trace.checkpoints):
        raise ValueError("trace is missing per-update wall-clock timings")
    steps = trace.env_steps
    elapsed = np.cumsum(trace.wallclock_ms) / 1e3
    crossed = np.nonzero(steps >= target_steps)[0]
    if crossed.size:
        return float(elapsed[crossed[0]])
    return float(elapsed[-1]) * target_steps / float(steps[-1])


def computation_time(traces, target_steps=TIME_TARGET_STEPS, scale=TIME_SCALE):
    """Negated median across seeds of scaled time-to-target wall-clock."""
    traces = list(traces)
    if not traces:
        raise ValueError("need at least one trace")
    times = [time_to_steps(t, target_steps) * scale for t in traces]
    return -float(np.median(times))


def run_score(trace):
    """Best return of a single seed's curve; the per-run aggregate input."""
    values, first_valid = _filled_returns(trace)
    return float(np.max(values[first_valid:]))


def make_record(backend, environment, traces, threshold,
                target_steps=TIME_TARGET_STEPS, scale=TIME_SCALE):
    return MetricRecord(
        backend=backend,
        environment=environment,
        performance=performance(traces),
        stability=stability(traces),
        sample_efficiency=sample_efficiency(traces, threshold),
        computation_time=computation_time(traces, target_steps, scale),
    )


# ------------------------------------------------------------- normalization


def thresholds_from_records(records):
    """Per-environment threshold: the lowest backend performance there."""
    table = {}
    for rec in records:
        current = table.get(rec.environment)
        if current is None or rec.performance < current:
            table[rec.environment] = rec.performance
    return table


def normalize_performance(records):
    """Rescale performance per environment to percent of the best backend."""
    best = {}
    for rec in records:
        best[rec.environment] = max(best.get(rec.environment, -np.inf), rec.performance)
    for env, top in best.items():
        if not top > 0.0:
            raise ValueError(
                f"environment '{env}' has non-positive best performance {top}; "
                "shift returns before normalizing"
            )
    return [
        replace(rec, performance=100.0 * rec.performance / best[rec.environment])
        for rec in records
    ]


def aggregate_inputs(traces_by_backend):
    """Per-run scores on the 0-1 scale used by the aggregate plots.

    traces_by_backend: {backend: {env: [RunTrace per seed]}}.  Each seed's
    best return is divided by the environment's best backend performance (no
    100 factor here).  Returns {backend: {env: scores array}}.
    """
    best = {}
    for by_env in traces_by_backend.values():
        for env, traces in by_env.items():
            best[env] = max(best.get(env, -np.inf), performance(traces))
    for env, top in best.items():
        if not top > 0.0:
            raise ValueError(
                f"environment '{env}' has non-positive best performance {top}; "
                "shift returns before normalizing"
            )
    return {
        backend: {
            env: np.array([run_score(t) for t in traces]) / best[env]
            for env, traces in by_env.items()
        }
        for backend, by_env in traces_by_backend.items()
    }


# ------------------------------------------------------------- aggregation


def iqm(values):
    """Interquartile mean: drop the top and bottom quartile, mean the rest."""
    return float(trim_mean(np.asarray(values, dtype=np.float64), 0.25))


def optimality_gap(values):
    """Mean shortfall from a normalized score of 1."""
    values = np.asarray(values, dtype=np.float64)
    return float(np.mean(1.0 - np.minimum(values, 1.0)))


_AGGREGATES = (
    ("median", lambda x: float(np.median(x))),
    ("iqm", iqm),
    ("mean", lambda x: float(np.mean(x))),
    ("optimality_gap", optimality_gap),
)


def aggregate(scores_by_env, resamples=BOOTSTRAP_RESAMPLES, seed=0):
    """Pooled aggregate scores with stratified bootstrap 95% CIs.

    scores_by_env: {env: array of per-seed normalized scores}.  Each
    resample redraws seeds with replacement within every environment
    independently, pools, and recomputes the aggregates; intervals are
    percentile [2.5, 97.5], widened if needed to contain the point estimate
    so low <= point <= high always holds.
    """
    envs = sorted(scores_by_env)
    if not envs:
        raise ValueError("need scores for at least one environment")
    arrays = [np.asarray(scores_by_env[e], dtype=np.float64) for e in envs]
    for env, arr in zip(envs, arrays):
        if arr.size < 2:
            raise ValueError(f"environment '{env}' has fewer than 2 seeds")
    pooled = np.concatenate(arrays)
    points = [fn(pooled) for _, fn in _AGGREGATES]

    rng = np.random.default_rng(seed)
    samples = np.zeros((resamples, len(_AGGREGATES)))
    for b in range(resamples):
        parts = [arr[rng.integers(0, arr.size, size=arr.size)] for arr in arrays]
        redrawn = np.concatenate(parts)
        samples[b] = [fn(redrawn) for _, fn in _AGGREGATES]
    lows = np.percentile(samples, 2.5, axis=0)
    highs = np.percentile(samples, 97.5, axis=0)
    estimates = {
        name: Estimate(point=p, low=float(min(lo, p)), high=float(max(hi, p)))
        for (name, _), p, lo, hi in zip(_AGGREGATES, points, lows, highs)
    }
    return AggregateScores(**estimates)
