"""Monte Carlo sweeps, RMSE aggregation, timing and CSV export."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .estimator import first_step, ml_oracle_full_gn, two_step_estimate
from .geometry import FrameTransform
from .scenario import (
    CASE_I_ANCHORS,
    CASE_I_TAGS,
    CASE_II_ANCHORS,
    CASE_II_TAGS,
    DEFAULT_TRUTH,
    UwbLayout,
    measure,
    random_scenario,
)

EXPERIMENT_SCHEMA = "rte-experiment/1"
RESULTS_HEADER = ["sweep_value", "method", "rmse_t_m", "rmse_r", "mean_time_s", "failures", "trials", "seed_base"]
SWEEP_VARIABLES = ("sigma", "r_max", "t_norm", "speed", "n_repetitions")
METHODS = ("two_step", "first_step_only", "full_gn_oracle")

log = logging.getLogger(__name__)

CASE_LAYOUTS = {
    "i": (CASE_I_ANCHORS, CASE_I_TAGS),
    "ii": (CASE_II_ANCHORS, CASE_II_TAGS),
}


class ExperimentError(ValueError):
    pass


def _fmt(x) -> str:
    return format(float(x), ".9g")


def rmse_translation(estimates, truths) -> float:
    """sqrt(mean ||t_hat - t_o||_2^2) over trials. Accepts FrameTransforms or 3-vectors."""
    est = np.array([getattr(e, "translation", e) for e in estimates], dtype=float).reshape(-1, 3)
    tru = np.array([getattr(t, "translation", t) for t in truths], dtype=float).reshape(-1, 3)
    if len(est) == 0 or len(est) != len(tru):
        raise ValueError("need equal-length, nonempty estimate and truth lists")
    return float(np.sqrt(np.mean(np.sum((est - tru) ** 2, axis=1))))


def rmse_rotation(estimates, truths) -> float:
    """sqrt(mean ||R_hat - R_o||_F^2) over trials. Accepts FrameTransforms or yaw angles."""
    def mats(items):
        return [np.asarray(x.rotation.matrix if hasattr(x, "rotation") else FrameTransform(x, np.zeros(3)).rotation.matrix)
                for x in items]

    est, tru = mats(estimates), mats(truths)
    if len(est) == 0 or len(est) != len(tru):
        raise ValueError("need equal-length, nonempty estimate and truth lists")
    return float(np.sqrt(np.mean([np.sum((a - b) ** 2) for a, b in zip(est, tru)])))


@dataclass(frozen=True)
class ScenarioParams:
    """Everything about a scenario except the random trajectory.

    Each trial redraws the trajectory from its own seed unless ``schedule_seed`` is set,
    in which case every trial shares the path drawn from that seed.
    """

    layout: UwbLayout
    sigma: float = 1.0
    repetitions_N: int = 100
    ground_truth: FrameTransform = DEFAULT_TRUTH
    r_max: float = 10.0
    speed: float = 0.0
    latency_delta: float = 0.01
    case: str | None = None
    schedule_seed: int | None = None

    @classmethod
    def for_case(cls, case: str, **kwargs) -> "ScenarioParams":
        anchors, tags = CASE_LAYOUTS[case]
        return cls(UwbLayout(anchors, tags), case=case, **kwargs)

    def with_value(self, variable: str, value) -> "ScenarioParams":
        if variable == "sigma":
            return replace(self, sigma=float(value))
        if variable == "r_max":
            return replace(self, r_max=float(value))
        if variable == "speed":
            return replace(self, speed=float(value))
        if variable == "n_repetitions":
            return replace(self, repetitions_N=int(value))
        if variable == "t_norm":
            t = np.asarray(self.ground_truth.translation)
            return replace(self, ground_truth=FrameTransform(self.ground_truth.theta, t / np.linalg.norm(t) * float(value)))
        raise ExperimentError(f"unknown sweep variable {variable!r}")

    def trial_config(self, seed: int):
        return random_scenario(self.layout, seed, sigma=self.sigma, repetitions_N=self.repetitions_N,
                               ground_truth=self.ground_truth, r_max=self.r_max, speed=self.speed,
                               latency_delta=self.latency_delta,
                               schedule_seed=self.schedule_seed)

    def to_dict(self) -> dict:
        out = {"case": self.case} if self.case else {
            "anchors_body_m": self.layout.anchors_body.tolist(),
            "tags_body_m": self.layout.tags_body.tolist(),
        }
        out.update({
            "sigma_m": self.sigma,
            "repetitions_N": self.repetitions_N,
            "ground_truth": self.ground_truth.to_dict(),
            "r_max_m": self.r_max,
            "speed_mps": self.speed,
            "latency_delta_s": self.latency_delta,
        })
        if self.schedule_seed is not None:
            out["schedule_seed"] = int(self.schedule_seed)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioParams":
        case = data.get("case")
        if case is not None:
            if case not in CASE_LAYOUTS:
                raise ExperimentError(f"unknown case {case!r}; expected one of {sorted(CASE_LAYOUTS)}")
            layout = UwbLayout(*CASE_LAYOUTS[case])
        else:
            layout = UwbLayout(data["anchors_body_m"], data["tags_body_m"])
        truth = FrameTransform.from_dict(data["ground_truth"]) if "ground_truth" in data else DEFAULT_TRUTH
        return cls(
            layout=layout,
            sigma=float(data.get("sigma_m", 1.0)),
            repetitions_N=int(data.get("repetitions_N", 100)),
            ground_truth=truth,
            r_max=float(data.get("r_max_m", 10.0)),
            speed=float(data.get("speed_mps", 0.0)),
            latency_delta=float(data.get("latency_delta_s", 0.01)),
            case=case,
            schedule_seed=None if data.get("schedule_seed") is None else int(data["schedule_seed"]),
        )


@dataclass(frozen=True)
class ExperimentSpec:
    base: ScenarioParams
    sweep_variable: str
    sweep_values: tuple
    trials_L: int
    methods: tuple = ("two_step",)
    seed_base: int = 0
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "sweep_values", tuple(float(v) for v in self.sweep_values))
        object.__setattr__(self, "methods", tuple(self.methods))
        if self.sweep_variable not in SWEEP_VARIABLES:
            raise ExperimentError(f"sweep_variable must be one of {SWEEP_VARIABLES}, got {self.sweep_variable!r}")
        if not self.sweep_values:
            raise ExperimentError("sweep_values must be nonempty")
        if any(b <= a for a, b in zip(self.sweep_values, self.sweep_values[1:])):
            raise ExperimentError("sweep_values must be strictly increasing")
        if int(self.trials_L) < 1:
            raise ExperimentError("trials_L must be >= 1")
        bad = set(self.methods) - set(METHODS)
        if bad or not self.methods:
            raise ExperimentError(f"methods must be a nonempty subset of {METHODS}, got {self.methods}")

    def to_dict(self) -> dict:
        return {
            "schema": EXPERIMENT_SCHEMA,
            "name": self.name,
            "base": self.base.to_dict(),
            "sweep_variable": self.sweep_variable,
            "sweep_values": list(self.sweep_values),
            "trials_L": int(self.trials_L),
            "methods": list(self.methods),
            "seed_base": int(self.seed_base),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentSpec":
        if data.get("schema") != EXPERIMENT_SCHEMA:
            raise ExperimentError(f"unsupported experiment schema {data.get('schema')!r}; expected {EXPERIMENT_SCHEMA!r}")
        try:
            return cls(
                base=ScenarioParams.from_dict(data["base"]),
                sweep_variable=data["sweep_variable"],
                sweep_values=tuple(data["sweep_values"]),
                trials_L=int(data["trials_L"]),
                methods=tuple(data.get("methods", ("two_step",))),
                seed_base=int(data.get("seed_base", 0)),
                name=str(data.get("name", "")),
            )
        except (KeyError, TypeError) as exc:
            raise ExperimentError(f"malformed experiment document: {exc}") from exc


def load_experiment(path) -> ExperimentSpec:
    return ExperimentSpec.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class TrialResult:
    seed: int
    method: str
    sweep_value: float
    estimate: FrameTransform | None
    truth: FrameTransform
    wall_time: float
    success: bool
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "method": self.method,
            "sweep_value": self.sweep_value,
            "estimate": self.estimate.to_dict() if self.estimate is not None else None,
            "truth": self.truth.to_dict(),
            "wall_time_s": self.wall_time,
            "success": self.success,
            "error": self.error,
        }


def _run_method(method: str, m):
    """Return (estimate, seconds) for one method on one measurement set."""
    if method == "two_step":
        est = two_step_estimate(m)
        return est.transform, est.wall_time
    start = time.perf_counter()
    first = first_step(m)
    if method == "first_step_only":
        return first.transform, time.perf_counter() - start
    if method == "full_gn_oracle":
        est = ml_oracle_full_gn(m, first.transform)
        return est.transform, time.perf_counter() - start
    raise ExperimentError(f"unknown method {method!r}")


def run_trial(params: ScenarioParams, seed: int, methods, sweep_value: float = float("nan")) -> list[TrialResult]:
    """One Monte Carlo trial: fresh trajectory and noise from ``seed``; every method sees the same data."""
    truth = params.ground_truth
    try:
        m = measure(params.trial_config(seed))
    except (ValueError, np.linalg.LinAlgError) as exc:
        err = f"{type(exc).__name__}: {exc}"
        return [TrialResult(seed, meth, sweep_value, None, truth, float("nan"), False, err) for meth in methods]
    out = []
    for meth in methods:
        try:
            est, secs = _run_method(meth, m)
            out.append(TrialResult(seed, meth, sweep_value, est, truth, secs, True))
        except (ValueError, np.linalg.LinAlgError) as exc:
            out.append(TrialResult(seed, meth, sweep_value, None, truth, float("nan"), False,
                                   f"{type(exc).__name__}: {exc}"))
    return out


def _run_trial_args(args):
    return run_trial(*args)


@dataclass(frozen=True)
class SummaryRow:
    sweep_value: float
    method: str
    rmse_t: float
    rmse_r: float
    mean_time: float
    failures: int
    trials: int


@dataclass
class SweepSummary:
    rows: list = field(default_factory=list)
    seed_base: int = 0
    sweep_variable: str = ""

    def get(self, sweep_value: float, method: str) -> SummaryRow:
        for row in self.rows:
            if row.method == method and math.isclose(row.sweep_value, sweep_value, rel_tol=1e-12, abs_tol=0.0):
                return row
        raise KeyError((sweep_value, method))

    def series(self, method: str, attr: str = "rmse_t") -> list[float]:
        return [getattr(r, attr) for r in self.rows if r.method == method]

    def format_table(self) -> str:
        head = f"{self.sweep_variable or 'value':>12} {'method':>16} {'rmse_t_m':>12} {'rmse_r':>12} {'mean_time_s':>12} {'fail':>5}"
        lines = [head]
        for r in self.rows:
            lines.append(f"{r.sweep_value:>12.6g} {r.method:>16} {r.rmse_t:>12.6g} {r.rmse_r:>12.6g} "
                         f"{r.mean_time:>12.4g} {r.failures:>5d}")
        return "\n".join(lines)


def summarize(results: list[TrialResult], sweep_value: float, method: str, trials: int,
              record_timing: bool = True) -> SummaryRow:
    ok = [r for r in results if r.success and r.method == method]
    failures = trials - len(ok)
    if ok:
        rmse_t = rmse_translation([r.estimate for r in ok], [r.truth for r in ok])
        rmse_r = rmse_rotation([r.estimate for r in ok], [r.truth for r in ok])
        mean_time = float(np.mean([r.wall_time for r in ok])) if record_timing else float("nan")
    else:
        rmse_t = rmse_r = mean_time = float("nan")
    return SummaryRow(float(sweep_value), method, rmse_t, rmse_r, mean_time, failures, trials)


def run_monte_carlo(spec: ExperimentSpec, workers: int = 1, record_timing: bool = True,
                    progress=None) -> tuple[SweepSummary, list[TrialResult]]:
    """Run ``trials_L`` seeded trials per sweep value and aggregate RMSE per method.

    Trial ``l`` uses seed ``seed_base + l`` at every sweep value, so sweeps compare
    methods and settings on common random numbers. Results are ordered by seed, so
    serial and parallel runs give identical summaries. When ``record_timing`` is set the
    trials run serially so that wall times are not skewed by worker contention.
    """
    if record_timing and workers > 1:
        log.info("timing requested; running serially instead of with %d workers", workers)
        workers = 1
    summary = SweepSummary(seed_base=spec.seed_base, sweep_variable=spec.sweep_variable)
    all_results: list[TrialResult] = []
    seeds = [spec.seed_base + i for i in range(spec.trials_L)]
    pool = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for value in spec.sweep_values:
            params = spec.base.with_value(spec.sweep_variable, value)
            jobs = [(params, s, spec.methods, value) for s in seeds]
            if pool is None:
                per_trial = [_run_trial_args(j) for j in jobs]
            else:
                per_trial = list(pool.map(_run_trial_args, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
            results = [r for trial in per_trial for r in trial]
            for meth in spec.methods:
                summary.rows.append(summarize(results, value, meth, spec.trials_L, record_timing))
            all_results.extend(results)
            if progress is not None:
                progress(value)
    finally:
        if pool is not None:
            pool.shutdown()
    return summary, all_results


def timing_report(params: ScenarioParams | None = None, runs: int = 100, warmup: int = 10,
                  methods=METHODS, seed_base: int = 0) -> dict[str, float]:
    """Mean wall time per estimate for each method, on the same seeded instances.

    Measurement synthesis is excluded. Must run on a single worker.
    """
    params = params or ScenarioParams.for_case("i")
    totals = {meth: [] for meth in methods}
    for idx in range(warmup + runs):
        m = measure(params.trial_config(seed_base + idx))
        for meth in methods:
            _, secs = _run_method(meth, m)
            if idx >= warmup:
                totals[meth].append(secs)
    return {meth: float(np.mean(v)) for meth, v in totals.items()}


def export_results(summary: SweepSummary, path) -> Path:
    """Write one CSV row per (sweep value, method) with 9-significant-digit floats."""
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(RESULTS_HEADER)
            for r in summary.rows:
                writer.writerow([_fmt(r.sweep_value), r.method, _fmt(r.rmse_t), _fmt(r.rmse_r), _fmt(r.mean_time),
                                 r.failures, r.trials, summary.seed_base])
    except OSError as exc:
        raise OSError(f"cannot write results to {path}: {exc}") from exc
    return path


def read_results(path) -> SweepSummary:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != RESULTS_HEADER:
            raise ExperimentError(f"unexpected results header {reader.fieldnames}")
        rows, seed_base = [], 0
        for rec in reader:
            rows.append(SummaryRow(float(rec["sweep_value"]), rec["method"], float(rec["rmse_t_m"]),
                                   float(rec["rmse_r"]), float(rec["mean_time_s"]), int(rec["failures"]),
                                   int(rec["trials"])))
            seed_base = int(rec["seed_base"])
    return SweepSummary(rows, seed_base)


def export_trials_jsonl(results: list[TrialResult], path) -> Path:
    path = Path(path)
    with path.open("w") as fh:
        for r in results:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
    return path


def summary_rows_as_dicts(summary: SweepSummary) -> list[dict]:
    return [asdict(r) for r in summary.rows]
