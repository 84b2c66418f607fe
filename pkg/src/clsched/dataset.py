"""Multi-robot logs (UTIAS MRCLAM layout or synthetic) and surrogate training data.

UTIAS directory layout (whitespace separated, ``#`` starts a comment line)::

    Barcodes.dat               subject_id  barcode
    Robot<k>_Odometry.dat      time  v [m/s]  omega [rad/s]
    Robot<k>_Measurement.dat   time  barcode  range [m]  bearing [rad]
    Robot<k>_Groundtruth.dat   time  x [m]  y [m]  orientation [rad]

Subjects ``1..n_robots`` are robots; higher subject ids are static landmarks
and their measurements are dropped.
"""

from __future__ import annotations

import csv
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from clsched.errors import DataError, NumericalError
from clsched.fusion import RelativeMeasurement, dmv_update, range_noise
from clsched.motion import (
    AgentState,
    Belief,
    OdometryInput,
    OdometryNoiseModel,
    propagate_belief,
    wrap_angle,
)
from clsched.surrogate import FEATURE_LAYOUT, TrainingSample, generate_input

log = logging.getLogger(__name__)

ROBOT_FILE = re.compile(r"Robot(\d+)_Odometry\.dat$")


@dataclass
class RobotLog:
    """Time-ordered streams for one robot.

    ``measurements`` rows are ``(t, subject, range, angle)`` where ``subject`` is
    a 0-based robot index. ``angle_kind`` tells what the angle column holds:
    ``"bearing"`` (UTIAS sensor bearing) or ``"rel_heading"`` (``phi_j - phi_i``,
    the quantity the fusion model expects).
    """

    robot_id: int
    odometry: np.ndarray       # (n, 3): t, v_m, omega_m
    measurements: np.ndarray   # (n, 4): t, subject, range, angle
    groundtruth: np.ndarray    # (n, 4): t, x, y, phi
    angle_kind: str = "bearing"

    def __post_init__(self):
        self.odometry = np.asarray(self.odometry, dtype=float).reshape(-1, 3)
        self.measurements = np.asarray(self.measurements, dtype=float).reshape(-1, 4)
        self.groundtruth = np.asarray(self.groundtruth, dtype=float).reshape(-1, 4)


def _read_table(path: Path, ncols: int) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        parts = s.split()
        if len(parts) != ncols:
            raise DataError(f"{path.name}:{lineno}: expected {ncols} columns, got {len(parts)}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            raise DataError(f"{path.name}:{lineno}: non-numeric field in {s!r}") from None
        if not all(math.isfinite(v) for v in rows[-1]):
            raise DataError(f"{path.name}:{lineno}: non-finite value")
    return np.array(rows, dtype=float).reshape(-1, ncols)


def _check_times(times: np.ndarray, name: str, strict: bool = True) -> None:
    d = np.diff(times)
    bad = np.flatnonzero(d <= 0) if strict else np.flatnonzero(d < 0)
    if bad.size:
        k = int(bad[0])
        raise DataError(f"{name}: timestamps out of order at data row {k + 2} "
                        f"({times[k]!r} then {times[k + 1]!r})")


def parse_utias(dir_path) -> list[RobotLog]:
    """Read a UTIAS-format directory into per-robot logs (inter-robot measurements only).

    Measurement streams may repeat a timestamp (several subjects seen at once);
    odometry and ground truth must be strictly increasing.
    """
    root = Path(dir_path)
    if not root.is_dir():
        raise DataError(f"{root}: not a directory")
    barcode_file = root / "Barcodes.dat"
    if not barcode_file.exists():
        raise DataError(f"{root}: missing Barcodes.dat")
    robot_nums = sorted(int(m.group(1)) for p in root.iterdir() if (m := ROBOT_FILE.match(p.name)))
    if not robot_nums:
        raise DataError(f"{root}: no Robot<k>_Odometry.dat files")
    if robot_nums != list(range(1, len(robot_nums) + 1)):
        raise DataError(f"{root}: robot files must be numbered 1..n, found {robot_nums}")
    n_robots = len(robot_nums)

    barcode_to_subject = {}
    for subject, barcode in _read_table(barcode_file, 2):
        barcode_to_subject[int(barcode)] = int(subject)

    logs = []
    for k in robot_nums:
        files = {kind: root / f"Robot{k}_{kind}.dat" for kind in ("Odometry", "Measurement", "Groundtruth")}
        for f in files.values():
            if not f.exists():
                raise DataError(f"{root}: missing {f.name}")
        odo = _read_table(files["Odometry"], 3)
        meas = _read_table(files["Measurement"], 4)
        gt = _read_table(files["Groundtruth"], 4)
        _check_times(odo[:, 0], files["Odometry"].name)
        _check_times(gt[:, 0], files["Groundtruth"].name)
        _check_times(meas[:, 0], files["Measurement"].name, strict=False)

        keep = []
        for row in meas:
            barcode = int(row[1])
            if barcode not in barcode_to_subject:
                raise DataError(f"{files['Measurement'].name}: barcode {barcode} not in Barcodes.dat")
            subject = barcode_to_subject[barcode]
            if 1 <= subject <= n_robots and subject != k:
                keep.append([row[0], subject - 1, row[2], row[3]])
        gt = gt.copy()
        gt[:, 3] = wrap_angle(gt[:, 3]) if len(gt) else gt[:, 3]
        logs.append(RobotLog(k - 1, odo, np.array(keep).reshape(-1, 4), gt, angle_kind="bearing"))
    return logs


def _fmt(v: float) -> str:
    return repr(float(v))


def write_utias(logs: Sequence[RobotLog], dir_path, barcodes: dict[int, int] | None = None) -> None:
    """Write logs back in the UTIAS layout. ``barcodes`` maps subject id -> barcode
    (identity when omitted)."""
    root = Path(dir_path)
    root.mkdir(parents=True, exist_ok=True)
    n = len(logs)
    barcodes = barcodes or {s: s for s in range(1, n + 1)}
    with open(root / "Barcodes.dat", "w") as fh:
        fh.write("# Subject #  Barcode #\n")
        for s in sorted(barcodes):
            fh.write(f"{s} {barcodes[s]}\n")
    for lg in logs:
        k = lg.robot_id + 1
        with open(root / f"Robot{k}_Odometry.dat", "w") as fh:
            fh.write("# Time [s]  Forward Velocity [m/s]  Angular Velocity [rad/s]\n")
            for t, v, w in lg.odometry:
                fh.write(f"{_fmt(t)} {_fmt(v)} {_fmt(w)}\n")
        with open(root / f"Robot{k}_Measurement.dat", "w") as fh:
            fh.write("# Time [s]  Subject #  Range [m]  Bearing [rad]\n")
            for t, s, r, b in lg.measurements:
                fh.write(f"{_fmt(t)} {barcodes[int(s) + 1]} {_fmt(r)} {_fmt(b)}\n")
        with open(root / f"Robot{k}_Groundtruth.dat", "w") as fh:
            fh.write("# Time [s]  x [m]  y [m]  Orientation [rad]\n")
            for t, x, y, p in lg.groundtruth:
                fh.write(f"{_fmt(t)} {_fmt(x)} {_fmt(y)} {_fmt(p)}\n")


@dataclass(frozen=True)
class SensorNoise:
    """Noise of the simulated sensors (standard deviations)."""

    odometry: OdometryNoiseModel = field(default_factory=OdometryNoiseModel)
    sigma_range: float = 0.147
    sigma_heading: float = 0.1

    @property
    def R(self) -> np.ndarray:
        return range_noise(self.sigma_range, self.sigma_heading)


def synthesize_scenario(n_robots: int = 5, duration: float = 60.0, dt: float = 0.1,
                        sensing_range: float = 6.0, noise: SensorNoise | None = None,
                        seed: int = 0, arena: float = 8.0, max_speed: float = 0.3,
                        min_range: float = 0.5) -> list[RobotLog]:
    """Random smooth unicycle trajectories with noisy odometry and relative measurements.

    Speeds follow a mean-reverting random walk that regularly drops to zero,
    so robots alternate between moving and standing still. Robots turn back
    toward the arena centre near the wall (square of side ``arena``).
    The smooth commanded velocity is the odometry reading; the true velocity
    is that reading minus noise drawn from the odometry noise model, so the
    filter's noise model holds exactly.
    Odometry row ``k`` holds the velocity commanded over ``[t_k, t_k + dt)``;
    measurement rows are taken at ``t_k`` for ``k >= 1`` and hold the relative
    heading in the angle column.
    """
    if n_robots < 2:
        raise ValueError("need at least two robots")
    noise = noise or SensorNoise()
    rng = np.random.default_rng(seed)
    steps = int(round(duration / dt))
    half = arena / 2.0

    pose = np.column_stack([rng.uniform(-half * 0.8, half * 0.8, (n_robots, 2)),
                            rng.uniform(-math.pi, math.pi, n_robots)])
    speed_target = rng.uniform(0, max_speed, n_robots)
    v = speed_target.copy()
    w = np.zeros(n_robots)

    gt = np.zeros((n_robots, steps + 1, 4))
    odo = np.zeros((n_robots, steps, 3))
    meas: list[list[list[float]]] = [[] for _ in range(n_robots)]
    gt[:, 0, 1:] = pose
    for k in range(steps):
        t = k * dt
        # speed set-point occasionally resampled; a third of the time it is a stop
        resample = rng.random(n_robots) < dt / 4.0
        new_target = np.where(rng.random(n_robots) < 1 / 3, 0.0, rng.uniform(0.05, max_speed, n_robots))
        speed_target = np.where(resample, new_target, speed_target)
        v += (speed_target - v) * min(1.0, dt / 0.5)
        w = 0.9 * w + rng.normal(0.0, 0.15, n_robots)
        to_centre = np.arctan2(-pose[:, 1], -pose[:, 0])
        near_wall = np.max(np.abs(pose[:, :2]), axis=1) > 0.8 * half
        w = np.where(near_wall, 1.5 * wrap_angle(to_centre - pose[:, 2]), w)
        w = np.clip(w, -1.0, 1.0)
        w = np.where(v > 1e-3, w, 0.0)

        # the commanded velocity is what odometry reports; the robot actually
        # moves with it minus noise whose std scales with the reported speed
        sv = noise.odometry.sigma_v_scale * np.abs(v)
        v_true = v - rng.normal(0, 1, n_robots) * sv
        w_true = w - rng.normal(0, noise.odometry.sigma_omega, n_robots)
        odo[:, k] = np.column_stack([np.full(n_robots, t), v, w])

        pose = pose + dt * np.column_stack([v_true * np.cos(pose[:, 2]), v_true * np.sin(pose[:, 2]), w_true])
        pose[:, 2] = wrap_angle(pose[:, 2])
        gt[:, k + 1, 0] = t + dt
        gt[:, k + 1, 1:] = pose

        for i in range(n_robots):
            for j in range(n_robots):
                if i == j:
                    continue
                rho = math.hypot(pose[i, 0] - pose[j, 0], pose[i, 1] - pose[j, 1])
                if min_range <= rho <= sensing_range:
                    z_r = abs(rho + rng.normal(0, noise.sigma_range))
                    z_h = wrap_angle(pose[j, 2] - pose[i, 2] + rng.normal(0, noise.sigma_heading))
                    meas[i].append([t + dt, j, z_r, z_h])
    gt[:, 0, 0] = 0.0
    return [RobotLog(i, odo[i], np.array(meas[i]).reshape(-1, 4), gt[i], angle_kind="rel_heading")
            for i in range(n_robots)]


def nearest_index(times: np.ndarray, t: float, tol: float) -> int | None:
    """Index of the sample closest to ``t`` if within ``tol``, else None."""
    if times.size == 0:
        return None
    k = int(np.searchsorted(times, t))
    best = None
    for c in (k - 1, k):
        if 0 <= c < times.size and (best is None or abs(times[c] - t) < abs(times[best] - t)):
            best = c
    return best if abs(times[best] - t) <= tol else None


@dataclass(frozen=True)
class ErrorInjectionModel:
    """How prior beliefs are perturbed when generating training samples.

    Estimates are ground truth plus Gaussian errors; covariance diagonals are
    ``nominal_cov`` entries each scaled by a log-uniform factor from
    ``cov_scale``, with a random x-y correlation in ``(-max_corr, max_corr)``.
    The defaults span the covariances seen in the default simulation.
    """

    pos_std: float = 0.1
    heading_std: float = 0.05
    cov_scale: tuple[float, float] = (0.05, 5.0)
    nominal_cov: tuple[float, float, float] = (0.01, 0.01, 0.01)
    max_corr: float = 0.8

    def __post_init__(self):
        lo, hi = self.cov_scale
        if self.pos_std < 0 or self.heading_std < 0 or not (0 < lo <= hi) or not 0 <= self.max_corr < 1:
            raise ValueError("invalid error injection model")

    def perturb(self, truth: AgentState, rng: np.random.Generator) -> Belief:
        est = AgentState(truth.x + rng.normal(0, self.pos_std), truth.y + rng.normal(0, self.pos_std),
                         truth.phi + rng.normal(0, self.heading_std))
        lo, hi = self.cov_scale
        scales = np.exp(rng.uniform(math.log(lo), math.log(hi), 3))
        sd = np.sqrt(np.asarray(self.nominal_cov) * scales)
        corr = np.eye(3)
        corr[0, 1] = corr[1, 0] = rng.uniform(-self.max_corr, self.max_corr)
        return Belief(est, corr * np.outer(sd, sd))


def training_pairs(logs: Sequence[RobotLog], dt: float) -> list[tuple[int, int, int]]:
    """All ``(robot, measurement_row, odometry_row)`` triples where the robot
    has an odometry reading within ``dt/2`` of one step before the measurement."""
    pairs = []
    for lg in logs:
        otimes = lg.odometry[:, 0]
        for r, (t, *_rest) in enumerate(lg.measurements):
            o = nearest_index(otimes, t - dt, dt / 2)
            if o is not None:
                pairs.append((lg.robot_id, r, o))
    return pairs


def generate_training_samples(logs: Sequence[RobotLog], count: int,
                              err_model: ErrorInjectionModel | None = None, seed: int = 0,
                              dt: float = 0.1, noise: SensorNoise | None = None,
                              stats: dict | None = None, keep_context: bool = False
                              ) -> list[TrainingSample]:
    """Single-step propagate + DMV update rollouts labelled with ``trace(P+)``.

    Each draw picks an (odometry, relative measurement) pair at random, seeds
    both agents' beliefs at perturbed ground truth, propagates the observer one
    step and applies one update. Numerically failing draws are skipped and
    counted in ``stats["skipped"]``.
    """
    err_model = err_model or ErrorInjectionModel()
    noise = noise or SensorNoise()
    R = noise.R
    by_id = {lg.robot_id: lg for lg in logs}
    if len(by_id) != len(logs):
        raise DataError("robot ids must be unique within one set of logs")
    pairs = training_pairs(logs, dt)
    out: list[TrainingSample] = []
    skipped = attempts = 0
    if count <= 0 or not pairs:
        if count > 0:
            log.warning("no co-timed odometry/measurement pairs in the logs")
        if stats is not None:
            stats.update(skipped=0, attempted=0)
        return out
    rng = np.random.default_rng(seed)
    max_attempts = 2 * count + 100
    while len(out) < count and attempts < max_attempts:
        attempts += 1
        rid, r, o = pairs[int(rng.integers(len(pairs)))]
        lg = by_id[rid]
        t, subject, z_range, z_angle = lg.measurements[r]
        other = by_id.get(int(subject))
        t_odo, v_m, w_m = lg.odometry[o]
        gi = nearest_index(lg.groundtruth[:, 0], t_odo, dt / 2)
        gj = None if other is None else nearest_index(other.groundtruth[:, 0], t, dt / 2)
        gi_now = nearest_index(lg.groundtruth[:, 0], t, dt / 2)
        if gi is None or gj is None or gi_now is None:
            skipped += 1
            continue
        truth_i = AgentState(*lg.groundtruth[gi, 1:])
        truth_j = AgentState(*other.groundtruth[gj, 1:])
        if lg.angle_kind == "rel_heading":
            heading = z_angle
        else:
            phi_i = lg.groundtruth[gi_now, 3]
            heading = truth_j.phi - phi_i + rng.normal(0, noise.sigma_heading)
        try:
            bel_i0 = err_model.perturb(truth_i, rng)
            bel_j = err_model.perturb(truth_j, rng)
            bel_i = propagate_belief(bel_i0, OdometryInput(v_m, w_m, dt), noise.odometry)
            z = RelativeMeasurement(z_range, heading, R)
            post = dmv_update(bel_i, bel_j, z)
            y = post.trace
            x = generate_input(bel_i, R, bel_j.trace)
        except (NumericalError, ValueError):
            skipped += 1
            continue
        out.append(TrainingSample(x, y, sample_id=len(out),
                                  context=(bel_i, bel_j, z) if keep_context else None))
    if skipped:
        log.info("skipped %d of %d draws", skipped, attempts)
    if stats is not None:
        stats.update(skipped=skipped, attempted=attempts)
    return out


def split_dataset(samples: Sequence, n_train: int, n_dev: int, n_test: int, seed: int = 0):
    """Seeded shuffle followed by a contiguous train / dev / test split."""
    total = n_train + n_dev + n_test
    if min(n_train, n_dev, n_test) < 0:
        raise ValueError("split sizes must be non-negative")
    if total > len(samples):
        raise ValueError(f"requested {total} samples, only {len(samples)} available")
    order = np.random.default_rng(seed).permutation(len(samples))[:total]
    picked = [samples[int(k)] for k in order]
    return picked[:n_train], picked[n_train:n_train + n_dev], picked[n_train + n_dev:]


SAMPLE_HEADER = FEATURE_LAYOUT + ["Y"]


def write_samples(samples: Sequence[TrainingSample], path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(SAMPLE_HEADER)
        for s in samples:
            wr.writerow([repr(float(v)) for v in s.x] + [repr(float(s.y))])


def read_samples(path) -> list[TrainingSample]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != SAMPLE_HEADER:
        raise DataError(f"{path}: unexpected header")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(SAMPLE_HEADER):
            raise DataError(f"{path}:{lineno}: expected {len(SAMPLE_HEADER)} columns")
        try:
            vals = [float(v) for v in row]
            out.append(TrainingSample(np.array(vals[:16]), vals[16], sample_id=lineno - 2))
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
    return out
