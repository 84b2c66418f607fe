"""Team-level simulation: dead reckoning, measurement scheduling and DMV updates
for every robot at every step, scored by position RMSE against ground truth."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from clsched.dataset import (
    ErrorInjectionModel,
    RobotLog,
    SensorNoise,
    nearest_index,
    parse_utias,
    synthesize_scenario,
)
from clsched.errors import ConfigError, NumericalError
from clsched.fusion import RelativeMeasurement, dmv_update, pose_fix_update
from clsched.motion import (
    AgentState,
    Belief,
    OdometryInput,
    OdometryNoiseModel,
    propagate_belief,
    wrap_angle,
)
from clsched.scheduling import (
    CandidateSet,
    CommsLedger,
    SchedulingError,
    schedule_dnn,
    schedule_full,
    schedule_greedy_exact,
    schedule_random,
)
from clsched.surrogate import TrainConfig, load_model

log = logging.getLogger(__name__)

POLICIES = ("full", "random", "greedy", "dnn")


@dataclass
class DatasetConfig:
    source: str = "synthetic"         # "synthetic" | "utias"
    path: str | None = None           # UTIAS directory
    dt: float = 0.1
    n_robots: int = 5
    duration: float = 60.0
    sensing_range: float = 6.0
    arena: float = 8.0
    max_speed: float = 0.3
    # noise used to *generate* synthetic data; defaults to the filter noise
    data_noise: dict | None = None
    # robots receiving sporadic absolute pose fixes (external aiding), taking
    # turns over the period; None means every robot, [] disables aiding
    aided_robots: list[int] | None = None
    aiding_period: float = 5.0
    aiding_std: tuple[float, float, float] = (0.05, 0.05, 0.02)


@dataclass
class NoiseConfig:
    sigma_v_scale: float = 2.253
    sigma_omega: float = 0.587
    sigma_range: float = 0.147
    sigma_heading: float = 0.1

    def sensor_noise(self) -> SensorNoise:
        return SensorNoise(OdometryNoiseModel(self.sigma_v_scale, self.sigma_omega),
                           self.sigma_range, self.sigma_heading)


@dataclass
class SchedulerConfig:
    policy: str = "dnn"
    q: int | None = 2                 # None: no budget
    max_candidates: int = 4
    select: str = "argmin"


@dataclass
class ModelConfig:
    path: str | None = None           # surrogate model file (JSON)
    # training pipeline (gen-data / train)
    samples: int = 20000
    data_seed: int = 1000             # scenario seed for training data, kept apart from run seeds
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    train: dict | None = None         # TrainConfig overrides
    error_injection: dict | None = None

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(**(self.train or {}))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"model.train: {exc}") from None

    def error_model(self) -> ErrorInjectionModel:
        doc = dict(self.error_injection or {})
        for key in ("cov_scale", "nominal_cov"):
            if key in doc:
                doc[key] = tuple(doc[key])
        try:
            return ErrorInjectionModel(**doc)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"model.error_injection: {exc}") from None


@dataclass
class RunConfig:
    seeds: list[int] = field(default_factory=lambda: [0])
    output_dir: str = "out"
    initial_std: tuple[float, float, float] = (0.01, 0.01, 0.01)
    failure_budget: int = 100


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def validate(self) -> ExperimentConfig:
        s, n, d = self.scheduler, self.noise, self.dataset
        if s.policy not in POLICIES:
            raise ConfigError(f"scheduler.policy must be one of {POLICIES}, got {s.policy!r}")
        if s.q is not None and s.q < 1:
            raise ConfigError("scheduler.q must be >= 1")
        if s.max_candidates < 1:
            raise ConfigError("scheduler.max_candidates must be >= 1")
        if s.select not in ("argmin", "argmax"):
            raise ConfigError("scheduler.select must be argmin or argmax")
        if min(n.sigma_v_scale, n.sigma_omega, n.sigma_range, n.sigma_heading) <= 0:
            raise ConfigError("noise sigmas must be positive")
        if d.source not in ("synthetic", "utias"):
            raise ConfigError(f"dataset.source must be synthetic or utias, got {d.source!r}")
        if d.source == "utias" and not d.path:
            raise ConfigError("dataset.path is required for utias data")
        if d.dt <= 0:
            raise ConfigError("dataset.dt must be positive")
        if d.n_robots < 2 or d.duration <= 0 or d.sensing_range <= 0 or d.arena <= 0 or d.max_speed < 0:
            raise ConfigError("dataset: need n_robots >= 2 and positive duration, sensing_range, arena")
        if len(d.aiding_std) != 3 or d.aiding_period <= 0 or min(d.aiding_std) <= 0:
            raise ConfigError("dataset.aiding_period and the three aiding_std values must be positive")
        if d.data_noise is not None and set(d.data_noise) - {f.name for f in dataclasses.fields(NoiseConfig)}:
            raise ConfigError(f"dataset.data_noise has unknown keys: {sorted(d.data_noise)}")
        if len(self.run.initial_std) != 3 or min(self.run.initial_std) <= 0:
            raise ConfigError("run.initial_std must be three positive stds")
        if self.run.failure_budget < 0:
            raise ConfigError("run.failure_budget must be >= 0")
        if not self.run.seeds:
            raise ConfigError("run.seeds must not be empty")
        m = self.model
        if m.samples < 1 or len(m.split) != 3 or min(m.split) < 0 or sum(m.split) <= 0:
            raise ConfigError("model.samples must be positive and model.split three non-negative fractions")
        m.train_config()
        m.error_model()
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {"dataset": DatasetConfig, "noise": NoiseConfig, "scheduler": SchedulerConfig,
             "model": ModelConfig, "run": RunConfig}


def _number(value, kind, where: str):
    # YAML reads forms like "1e-9" as strings; accept them, reject anything non-numeric
    if isinstance(value, bool):
        raise ConfigError(f"{where}: expected a number, got {value!r}")
    try:
        out = float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: expected a number, got {value!r}") from None
    if kind is int:
        if not out.is_integer():
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return int(out)
    return out


def _coerce(value, annotation: str, where: str):
    """Normalise one config value according to its (string) field annotation."""
    if value is None:
        if "None" not in annotation:
            raise ConfigError(f"{where}: a value is required")
        return None
    base = annotation.split(" | ")[0]
    if base in ("float", "int"):
        return _number(value, float if base == "float" else int, where)
    if base.startswith(("tuple[", "list[")):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        kind = int if "int" in base else float
        items = [_number(v, kind, where) for v in value]
        return tuple(items) if base.startswith("tuple[") else items
    if base == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if base == "dict":
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping, got {value!r}")
        return value
    return value


def config_from_dict(doc: dict | None) -> ExperimentConfig:
    """Build and validate a config from nested mappings (as loaded from YAML)."""
    doc = doc or {}
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a mapping of sections")
    unknown = set(doc) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    parts = {}
    for name, cls in _SECTIONS.items():
        section = doc.get(name) or {}
        if not isinstance(section, dict):
            raise ConfigError(f"section {name!r} must be a mapping")
        fields = {f.name: f for f in dataclasses.fields(cls)}
        bad = set(section) - set(fields)
        if bad:
            raise ConfigError(f"unknown keys in [{name}]: {sorted(bad)}")
        values = {k: _coerce(v, str(fields[k].type), f"{name}.{k}") for k, v in section.items()}
        parts[name] = cls(**values)
    return ExperimentConfig(**parts).validate()


def load_config(path) -> ExperimentConfig:
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return config_from_dict(doc)


@dataclass
class RunReport:
    policy: str
    times: np.ndarray
    position_errors: np.ndarray            # (T, n_robots)
    rmse: np.ndarray                       # (T,)
    average_rmse: float
    ledger: CommsLedger = field(default_factory=CommsLedger)
    failures: int = 0
    scatter_prediction: list[tuple[float, float]] = field(default_factory=list)
    scatter_traceratio: list[tuple[float, float]] = field(default_factory=list)
    selections: list[tuple[int, int, tuple[int, ...]]] = field(default_factory=list)


class FailureBudgetExceeded(NumericalError):
    pass


def compute_rmse(estimates, groundtruth) -> tuple[np.ndarray, float]:
    """Team RMSE of 2-D position per step and its time average.

    Both inputs are ``(T, n_robots, 2)`` arrays (extra trailing columns such
    as heading are ignored).
    """
    est = np.asarray(estimates, dtype=float)
    gt = np.asarray(groundtruth, dtype=float)
    if est.shape[:2] != gt.shape[:2]:
        raise ValueError(f"estimate shape {est.shape} does not match ground truth {gt.shape}")
    if est.shape[0] == 0:
        return np.zeros(0), math.nan
    d = est[..., :2] - gt[..., :2]
    series = np.sqrt(np.mean(np.sum(d * d, axis=-1), axis=1))
    return series, float(series.mean())


@dataclass
class _Track:
    """A robot's log resampled onto the simulation grid."""

    truth: np.ndarray                      # (T, 3)
    odometry: np.ndarray                   # (T, 2): velocity applied over [t_k, t_k+1)
    measurements: list[dict[int, tuple[float, float]]]  # per step: subject -> (range, angle)


def _grid(logs: Sequence[RobotLog], dt: float) -> np.ndarray:
    t0 = max(max(lg.groundtruth[0, 0], lg.odometry[0, 0] if len(lg.odometry) else -np.inf) for lg in logs)
    t1 = min(lg.groundtruth[-1, 0] for lg in logs)
    steps = int(math.floor((t1 - t0) / dt + 1e-9))
    if steps < 1:
        raise ValueError("logs do not overlap in time")
    return t0 + dt * np.arange(steps + 1)


def resample(logs: Sequence[RobotLog], dt: float) -> tuple[np.ndarray, list[_Track]]:
    times = _grid(logs, dt)
    tracks = []
    for lg in logs:
        gt = lg.groundtruth
        truth = np.empty((times.size, 3))
        truth[:, 0] = np.interp(times, gt[:, 0], gt[:, 1])
        truth[:, 1] = np.interp(times, gt[:, 0], gt[:, 2])
        idx = np.clip(np.searchsorted(gt[:, 0], times), 0, len(gt) - 1)
        prev = np.clip(idx - 1, 0, len(gt) - 1)
        closer = np.abs(gt[prev, 0] - times) < np.abs(gt[idx, 0] - times)
        truth[:, 2] = gt[np.where(closer, prev, idx), 3]

        odo = np.zeros((times.size, 2))
        otimes = lg.odometry[:, 0]
        for k, t in enumerate(times):
            o = nearest_index(otimes, t, dt / 2)
            if o is not None:
                odo[k] = lg.odometry[o, 1:]

        meas: list[dict[int, tuple[float, float]]] = [dict() for _ in times]
        best: list[dict[int, float]] = [dict() for _ in times]
        for t, subj, rng_, ang in lg.measurements:
            k = int(round((t - times[0]) / dt))
            if 0 <= k < times.size and abs(times[k] - t) <= dt / 2 + 1e-9:
                s = int(subj)
                off = abs(times[k] - t)
                if s not in best[k] or off < best[k][s]:
                    best[k][s] = off
                    meas[k][s] = (rng_, ang)
        tracks.append(_Track(truth, odo, meas))
    return times, tracks


def scenario_logs(config: ExperimentConfig, seed: int) -> list[RobotLog]:
    """The configured dataset: parsed UTIAS logs or a synthetic scenario for ``seed``."""
    d = config.dataset
    if d.source == "utias":
        return parse_utias(d.path)
    noise = config.noise.sensor_noise()
    if d.data_noise is not None:
        dn = {**dataclasses.asdict(config.noise), **d.data_noise}
        noise = NoiseConfig(**dn).sensor_noise()
    return synthesize_scenario(d.n_robots, d.duration, d.dt, d.sensing_range, noise, seed=seed,
                               arena=d.arena, max_speed=d.max_speed)


def run_simulation(config: ExperimentConfig, seed: int | None = None, model=None,
                   logs: Sequence[RobotLog] | None = None) -> RunReport:
    """Replay one scenario through propagation, scheduling and updates.

    All robots propagate first; every robot then schedules against the
    propagated peer beliefs of that step. A numerical failure in one robot's
    update leaves its propagated belief in place and is counted.

    ``model`` overrides ``config.model.path`` (any surrogate callable works);
    ``logs`` overrides the configured dataset.
    """
    seed = config.run.seeds[0] if seed is None else seed
    sched, d = config.scheduler, config.dataset
    if sched.policy == "dnn" and model is None:
        if not config.model.path:
            raise ConfigError("model.path is required for the dnn policy")
        model = load_model(config.model.path)
    if logs is None:
        logs = scenario_logs(config, seed)
    noise = config.noise.sensor_noise()
    R = noise.R
    rng = np.random.default_rng([seed, 1])
    fix_rng = np.random.default_rng([seed, 2])
    fix_every = max(1, int(round(d.aiding_period / d.dt)))
    R_fix = np.diag(np.square(d.aiding_std))
    aided = list(range(len(logs))) if d.aided_robots is None else list(d.aided_robots)
    q = sched.q if sched.q is not None else 10**9

    times, tracks = resample(logs, d.dt)
    n, T = len(tracks), times.size
    P0 = np.diag(np.square(config.run.initial_std))
    beliefs = [Belief(AgentState(*tr.truth[0]), P0) for tr in tracks]
    est = np.zeros((T, n, 3))
    est[0] = [b.estimate.as_array() for b in beliefs]
    truth = np.stack([tr.truth for tr in tracks], axis=1)
    report = RunReport(sched.policy, times, np.zeros((T, n)), np.zeros(T), math.nan)

    for k in range(1, T):
        priors = []
        for i, tr in enumerate(tracks):
            v, w = tr.odometry[k - 1]
            try:
                priors.append(propagate_belief(beliefs[i], OdometryInput(v, w, d.dt), noise.odometry))
            except NumericalError as exc:
                _fail(report, config, k, i, exc)
                priors.append(beliefs[i])
        for slot, i in enumerate(aided):
            # aided robots take turns: fixes are staggered evenly over the period
            if i >= n or (k + slot * fix_every // len(aided)) % fix_every:
                continue
            z = AgentState(*(truth[k, i] + fix_rng.normal(0.0, d.aiding_std)))
            try:
                priors[i] = pose_fix_update(priors[i], z, R_fix)
            except NumericalError as exc:
                _fail(report, config, k, i, exc)
        for i, tr in enumerate(tracks):
            cands = {}
            for j, (z_range, z_ang) in sorted(tr.measurements[k].items()):
                if j == i or j >= n:
                    continue
                if logs[i].angle_kind == "rel_heading":
                    heading = z_ang
                else:
                    heading = truth[k, j, 2] - truth[k, i, 2] + rng.normal(0, noise.sigma_heading)
                cands[j] = (priors[j], RelativeMeasurement(z_range, wrap_angle(heading), R))
            if len(cands) > sched.max_candidates:
                nearest = sorted(cands, key=lambda j: (cands[j][1].range, j))[:sched.max_candidates]
                cands = {j: cands[j] for j in sorted(nearest)}
            try:
                beliefs[i], picked = _schedule(sched.policy, priors[i], R, cands, q, model, rng,
                                               sched.select, report)
                if cands:
                    report.selections.append((k, i, tuple(picked)))
            except (NumericalError, SchedulingError) as exc:
                _fail(report, config, k, i, exc)
                beliefs[i] = priors[i]
        est[k] = [b.estimate.as_array() for b in beliefs]

    report.position_errors = np.hypot(est[..., 0] - truth[..., 0], est[..., 1] - truth[..., 1])
    report.rmse, report.average_rmse = compute_rmse(est, truth)
    return report


def _fail(report: RunReport, config: ExperimentConfig, k: int, i: int, exc: Exception) -> None:
    report.failures += 1
    log.warning("step %d robot %d: %s (keeping propagated belief)", k, i, exc)
    if report.failures > config.run.failure_budget:
        raise FailureBudgetExceeded(f"{report.failures} numerical failures exceed the budget")


def _record_pairs(report: RunReport, bel_before: Belief, traces_pj: list[float],
                  post_traces: list[float]) -> None:
    prev = bel_before.trace
    for tpj, after in zip(traces_pj, post_traces):
        report.scatter_traceratio.append((math.log(prev / tpj), after))
        prev = after


def _schedule(policy, bel_i, R, cands, q, model, rng, select, report: RunReport):
    if not cands:
        return bel_i, []
    if policy == "full":
        res = schedule_full(bel_i, cands)
    elif policy == "greedy":
        res = schedule_greedy_exact(bel_i, cands, q)
    elif policy == "random":
        picked = schedule_random(list(cands), q, rng)
        bel = bel_i
        traces_after = []
        for j in picked:
            report.ledger.add_belief()
            bel = dmv_update(bel, *cands[j])
            traces_after.append(bel.trace)
        _record_pairs(report, bel_i, [cands[j][0].trace for j in picked], traces_after)
        return bel, picked
    else:
        cs = CandidateSet({j: b.trace for j, (b, _) in cands.items()}, q)
        res = schedule_dnn(bel_i, R, cs, model, lambda j: cands[j][0], lambda j: cands[j][1], select)
    report.ledger += res.ledger
    _record_pairs(report, bel_i, [cands[j][0].trace for j in res.selected], res.post_traces)
    if policy == "dnn":
        report.scatter_prediction.extend(zip(res.predictions, res.post_traces))
    return res.belief, res.selected


def write_csv(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for row in rows:
            wr.writerow([v if isinstance(v, str) else repr(float(v)) for v in row])


def emit_report(report: RunReport, out_dir) -> list[Path]:
    """Write rmse.csv, scatter_prediction.csv, scatter_traceratio.csv and comms.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "rmse.csv": (["t", "rmse"], zip(report.times, report.rmse)),
        "scatter_prediction.csv": (["y_hat", "y"], report.scatter_prediction),
        "scatter_traceratio.csv": (["log_trace_ratio", "trace_post"], report.scatter_traceratio),
        "comms.csv": (["policy", "scalars", "beliefs"],
                      [(report.policy, str(report.ledger.scalars_sent), str(report.ledger.beliefs_sent))]),
    }
    paths = []
    for name, (header, rows) in files.items():
        write_csv(out / name, header, rows)
        paths.append(out / name)
    return paths


def read_rmse_csv(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    arr = np.array(rows, dtype=float).reshape(-1, 2)
    return arr[:, 0], arr[:, 1]


def compare_policies(config: ExperimentConfig, policies: Sequence[str], seeds: Sequence[int],
                     model=None) -> dict[str, list[RunReport]]:
    """Run each policy on the same scenarios (one scenario per seed)."""
    results: dict[str, list[RunReport]] = {p: [] for p in policies}
    for seed in seeds:
        logs = scenario_logs(config, seed)
        for p in policies:
            cfg = dataclasses.replace(config, scheduler=dataclasses.replace(config.scheduler, policy=p))
            if p == "full":
                cfg.scheduler = dataclasses.replace(cfg.scheduler, q=None)
            results[p].append(run_simulation(cfg, seed=seed, model=model if p == "dnn" else None, logs=logs))
    return results


def write_comparison(results: dict[str, list[RunReport]], seeds: Sequence[int], out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for policy, reports in results.items():
        for seed, rep in zip(seeds, reports):
            rows.append((policy, str(seed), rep.average_rmse, str(rep.ledger.scalars_sent),
                         str(rep.ledger.beliefs_sent), str(rep.failures)))
    path = out / "compare.csv"
    write_csv(path, ["policy", "seed", "average_rmse", "scalars", "beliefs", "failures"], rows)
    for policy, reports in results.items():
        mean_series = np.mean([r.rmse for r in reports], axis=0)
        write_csv(out / f"rmse_{policy}.csv", ["t", "rmse"], zip(reports[0].times, mean_series))
    return path
