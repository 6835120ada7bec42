"""Dataset files and result persistence.

Canonical format
----------------
Plain text, one record per line, fields separated by single spaces. Blank
lines and lines starting with ``#`` are ignored. Records::

    META <key> <value ...>
    GROUNDTRUTH <t> <x> <y> <alpha>
    ODOMETRY <t> <v> <omega>
    LANDMARK <id> <x> <y>
    LANDMARK_PRIOR <id> <x> <y> <var_x> <cov_xy> <var_y>
    MEASUREMENT <t> <landmark_id> <kind> <value ...> <sigma ...> [w=<weight>]

``kind`` is ``range``, ``bearing`` or ``range_bearing``; values and sigmas
follow the [range, bearing] order (one each, or two each for
``range_bearing``). Noise is diagonal: R = diag(sigma**2). ``LANDMARK``
holds ground-truth landmark positions, used only for evaluation. Floats
are written with ``repr`` so a save/load round trip is exact.

Timestamps must be non-decreasing within each record type.

External formats
----------------
``plaza``: a directory (or file prefix) with whitespace/comma separated
files ``*GT*.txt`` (t x y [heading]), ``*DR*.txt`` (t distance
delta_heading, dead-reckoning increments since the previous row),
``*TD*.txt`` (t beacon_id range, or t robot_id beacon_id range) and
optionally ``*TL*.txt`` (beacon_id x y).

``bearing_csv``: CSV with header columns ``t, landmark_id, bearing`` and
optional ``weight`` (bearing in radians). Ground truth may be supplied as
a separate ``t,x,y,alpha`` CSV.

Sigmas missing from external files come from the loader options.
"""

from __future__ import annotations

import csv
import glob
import json
import logging
import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidArgument, ParseError, ValidationError
from .observation import KIND_ROWS, KINDS, Landmark2D, Measurement, Trajectory
from .priors import OdometryControl

log = logging.getLogger(__name__)

FORMATS = ("canonical", "plaza", "bearing_csv")


@dataclass(eq=False)
class Dataset:
    measurements: list = field(default_factory=list)
    ground_truth: Trajectory | None = None
    odometry: list = field(default_factory=list)
    landmark_priors: dict = field(default_factory=dict)  # id -> (mean (2,), cov (2, 2))
    landmarks: list = field(default_factory=list)  # ground truth, optional
    metadata: dict = field(default_factory=dict)
    malformed: list = field(default_factory=list)  # (line, message) when loaded leniently

    @property
    def initial_time(self) -> float:
        starts = [m.time for m in self.measurements[:1]]
        if self.ground_truth is not None and len(self.ground_truth):
            starts.append(float(self.ground_truth.times[0]))
        if self.odometry:
            starts.append(self.odometry[0].time)
        return min(starts) if starts else 0.0


def _f(x) -> str:
    return repr(float(x))


def _check_order(times, lines, what, path):
    for k in range(1, len(times)):
        if times[k] < times[k - 1]:
            raise ValidationError(
                f"{path}:{lines[k]}: {what} timestamp {times[k]!r} decreases (previous {times[k - 1]!r})"
            )


# --- canonical ---------------------------------------------------------------

def save_dataset(dataset: Dataset, path) -> None:
    lines = ["# rffslam canonical dataset v1"]
    for key in sorted(dataset.metadata):
        value = str(dataset.metadata[key])
        if not re.fullmatch(r"\S+", str(key)) or "\n" in value:
            raise InvalidArgument(f"metadata key/value not representable: {key!r}")
        lines.append(f"META {key} {value}".rstrip())
    if dataset.ground_truth is not None:
        for t, (x, y, a) in zip(dataset.ground_truth.times, dataset.ground_truth.poses):
            lines.append(f"GROUNDTRUTH {_f(t)} {_f(x)} {_f(y)} {_f(a)}")
    for c in dataset.odometry:
        lines.append(f"ODOMETRY {_f(c.time)} {_f(c.linear_velocity)} {_f(c.angular_velocity)}")
    for lm in dataset.landmarks:
        lines.append(f"LANDMARK {int(lm.id)} {_f(lm.x)} {_f(lm.y)}")
    for lid in sorted(dataset.landmark_priors):
        mean, cov = dataset.landmark_priors[lid]
        lines.append(
            f"LANDMARK_PRIOR {int(lid)} {_f(mean[0])} {_f(mean[1])} {_f(cov[0][0])} {_f(cov[0][1])} {_f(cov[1][1])}"
        )
    for m in dataset.measurements:
        cov = m.noise_cov
        if np.count_nonzero(cov - np.diag(np.diag(cov))):
            raise InvalidArgument(f"measurement at t={m.time} has correlated noise; canonical format is diagonal")
        fields = [f"MEASUREMENT {_f(m.time)} {int(m.landmark_id)} {m.kind}"]
        fields += [_f(v) for v in m.value]
        fields += [_f(s) for s in np.sqrt(np.diag(cov))]
        if m.weight is not None:
            fields.append(f"w={_f(m.weight)}")
        lines.append(" ".join(fields))
    text = "\n".join(lines) + "\n"
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write dataset to {path}: {exc.strerror}") from exc


def _parse_canonical(text: str, path, strict: bool) -> Dataset:
    ds = Dataset()
    gt, gt_lines = [], []
    odo_lines, meas_lines = [], []
    rows = 0
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        rows += 1
        tok = line.split()
        try:
            tag = tok[0]
            if tag == "META":
                if len(tok) < 2:
                    raise ValueError("META needs a key")
                ds.metadata[tok[1]] = raw.strip().split(None, 2)[2] if len(tok) > 2 else ""
            elif tag == "GROUNDTRUTH":
                _arity(tok, 5)
                gt.append([float(v) for v in tok[1:]])
                gt_lines.append(lineno)
            elif tag == "ODOMETRY":
                _arity(tok, 4)
                ds.odometry.append(OdometryControl(float(tok[1]), float(tok[2]), float(tok[3])))
                odo_lines.append(lineno)
            elif tag == "LANDMARK":
                _arity(tok, 4)
                ds.landmarks.append(Landmark2D(int(tok[1]), float(tok[2]), float(tok[3])))
            elif tag == "LANDMARK_PRIOR":
                _arity(tok, 7)
                mean = np.array([float(tok[2]), float(tok[3])])
                cxx, cxy, cyy = (float(v) for v in tok[4:7])
                ds.landmark_priors[int(tok[1])] = (mean, np.array([[cxx, cxy], [cxy, cyy]]))
            elif tag == "MEASUREMENT":
                ds.measurements.append(_parse_measurement(tok))
                meas_lines.append(lineno)
            else:
                raise ValueError(f"unknown record type {tag!r}")
        except (ValueError, InvalidArgument) as exc:
            if strict:
                raise ParseError(str(exc), path, lineno) from None
            ds.malformed.append((lineno, str(exc)))
    if gt:
        ds.ground_truth = Trajectory(np.array(gt)[:, 0], np.array(gt)[:, 1:])
        _check_order(ds.ground_truth.times, gt_lines, "GROUNDTRUTH", path)
    _check_order([c.time for c in ds.odometry], odo_lines, "ODOMETRY", path)
    _check_order([m.time for m in ds.measurements], meas_lines, "MEASUREMENT", path)
    ds.metadata.setdefault("source_format", "canonical")
    ds.metadata["rows_total"] = str(rows)
    ds.metadata["rows_malformed"] = str(len(ds.malformed))
    return ds


def _arity(tok, n):
    if len(tok) != n:
        raise ValueError(f"{tok[0]} expects {n - 1} fields, got {len(tok) - 1}")


def _parse_measurement(tok) -> Measurement:
    if len(tok) < 4:
        raise ValueError("MEASUREMENT needs time, landmark id and kind")
    kind = tok[3]
    if kind not in KINDS:
        raise ValueError(f"unknown measurement kind {kind!r}")
    k = len(KIND_ROWS[kind])
    rest = tok[4:]
    weight = None
    if rest and rest[-1].startswith("w="):
        weight = float(rest[-1][2:])
        rest = rest[:-1]
    if len(rest) != 2 * k:
        raise ValueError(f"{kind} measurement expects {k} value(s) and {k} sigma(s), got {len(rest)} fields")
    vals = [float(v) for v in rest[:k]]
    sig = np.array([float(v) for v in rest[k:]])
    if np.any(sig <= 0) or not np.all(np.isfinite(sig)):
        raise ValueError("sigmas must be positive and finite")
    return Measurement(float(tok[1]), int(tok[2]), kind, vals, np.diag(sig**2), weight)


# --- plaza -----------------------------------------------------------------

def _numeric_rows(path, strict, malformed, min_cols):
    rows = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith(("#", "%")):
                continue
            parts = [p for p in re.split(r"[,\s]+", line) if p]
            try:
                vals = [float(p) for p in parts]
                if len(vals) < min_cols:
                    raise ValueError(f"expected at least {min_cols} columns, got {len(vals)}")
                if not all(math.isfinite(v) for v in vals):
                    raise ValueError("non-finite value")
            except ValueError as exc:
                if strict:
                    raise ParseError(str(exc), path, lineno) from None
                malformed.append((f"{os.path.basename(path)}:{lineno}", str(exc)))
                continue
            rows.append((lineno, vals))
    return rows


def _find(base, tag):
    base = str(base)
    pattern = os.path.join(base, f"*{tag}*") if os.path.isdir(base) else f"{base}*{tag}*"
    hits = sorted(p for p in glob.glob(pattern) if os.path.isfile(p))
    return hits[0] if hits else None


def _load_plaza(path, strict, range_sigma, **_):
    if range_sigma is None or not range_sigma > 0:
        raise InvalidArgument("plaza datasets need a positive range_sigma")
    td = _find(path, "TD")
    if td is None:
        raise OSError(f"no *TD* range file found for {path}")
    ds = Dataset()
    ds.metadata["source_format"] = "plaza"
    cov = np.array([[range_sigma**2]])
    rows = _numeric_rows(td, strict, ds.malformed, 3)
    for lineno, vals in rows:
        t, beacon, rng = (vals[0], vals[1], vals[2]) if len(vals) == 3 else (vals[0], vals[2], vals[3])
        if not rng > 0:
            raise ParseError("range must be positive", td, lineno)
        ds.measurements.append(Measurement(t, int(beacon), "range", [rng], cov))
    _check_order([m.time for m in ds.measurements], [r[0] for r in rows], "range", td)
    total = len(rows)

    dr = _find(path, "DR")
    if dr is not None:
        rows = _numeric_rows(dr, strict, ds.malformed, 3)
        total += len(rows)
        _check_order([v[0] for _, v in rows], [r[0] for r in rows], "odometry", dr)
        for (_, prev), (_, cur) in zip(rows[:-1], rows[1:]):
            dt = cur[0] - prev[0]
            if dt > 0:
                ds.odometry.append(OdometryControl(cur[0], cur[1] / dt, cur[2] / dt))
        ds.metadata["odometry_rows_skipped"] = str(len(rows) - len(ds.odometry))

    gt = _find(path, "GT")
    if gt is not None:
        rows = _numeric_rows(gt, strict, ds.malformed, 3)
        total += len(rows)
        arr = np.array([v[:4] if len(v) >= 4 else v[:3] + [0.0] for _, v in rows])
        _check_order(arr[:, 0], [r[0] for r in rows], "ground truth", gt)
        ds.ground_truth = Trajectory(arr[:, 0], arr[:, 1:])
        if all(len(v) < 4 for _, v in rows):
            from .estimator import heading_from_motion

            ds.ground_truth = heading_from_motion(ds.ground_truth)

    tl = _find(path, "TL")
    if tl is not None:
        rows = _numeric_rows(tl, strict, ds.malformed, 3)
        total += len(rows)
        ds.landmarks = [Landmark2D(int(v[0]), v[1], v[2]) for _, v in rows]
    ds.metadata["rows_total"] = str(total + len(ds.malformed))
    ds.metadata["rows_malformed"] = str(len(ds.malformed))
    return ds


# --- bearing csv -------------------------------------------------------------

_COLUMN_ALIASES = {
    "t": ("t", "time", "timestamp"),
    "landmark_id": ("landmark_id", "id", "landmark"),
    "bearing": ("bearing", "value"),
    "weight": ("weight", "w"),
}


def _columns(header, path):
    lower = [h.strip().lower() for h in header]
    cols = {}
    for key, names in _COLUMN_ALIASES.items():
        for n in names:
            if n in lower:
                cols[key] = lower.index(n)
                break
    missing = {"t", "landmark_id", "bearing"} - set(cols)
    if missing:
        raise ParseError(f"missing column(s) {sorted(missing)}", path, 1)
    return cols


def _load_bearing_csv(path, strict, bearing_sigma, ground_truth=None, **_):
    if bearing_sigma is None or not bearing_sigma > 0:
        raise InvalidArgument("bearing_csv datasets need a positive bearing_sigma")
    ds = Dataset()
    ds.metadata["source_format"] = "bearing_csv"
    cov = np.array([[bearing_sigma**2]])
    lines = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError("empty file", path, 1)
        cols = _columns(header, path)
        rows = 0
        for lineno, row in enumerate(reader, start=2):
            if not row or not "".join(row).strip():
                continue
            rows += 1
            try:
                w = float(row[cols["weight"]]) if "weight" in cols and row[cols["weight"]].strip() else None
                m = Measurement(
                    float(row[cols["t"]]), int(row[cols["landmark_id"]]), "bearing", [float(row[cols["bearing"]])], cov, w
                )
            except (ValueError, IndexError, InvalidArgument) as exc:
                if strict:
                    raise ParseError(str(exc) or "malformed row", path, lineno) from None
                ds.malformed.append((lineno, str(exc)))
                continue
            ds.measurements.append(m)
            lines.append(lineno)
    _check_order([m.time for m in ds.measurements], lines, "bearing", path)
    if ground_truth is not None:
        ds.ground_truth = load_trajectory_csv(ground_truth)
    ds.metadata["rows_total"] = str(rows)
    ds.metadata["rows_malformed"] = str(len(ds.malformed))
    return ds


def subsample_landmarks(dataset: Dataset, target: int, min_per_keyframe: int = 10, seed: int = 0) -> Dataset:
    """Keep a weight-proportional random subset of landmarks.

    Each keyframe (distinct measurement time) first keeps up to
    ``min_per_keyframe`` of its landmarks, then landmarks are added with
    probability proportional to their weight until ``target`` are kept.
    Landmark weight is the mean weight of its observations.
    """
    if any(m.weight is None for m in dataset.measurements):
        raise InvalidArgument("landmark subsampling needs a weight on every measurement")
    rng = np.random.default_rng(seed)
    weight, count, by_time = {}, {}, {}
    for m in dataset.measurements:
        weight[m.landmark_id] = weight.get(m.landmark_id, 0.0) + m.weight
        count[m.landmark_id] = count.get(m.landmark_id, 0) + 1
        by_time.setdefault(m.time, set()).add(m.landmark_id)
    weight = {k: weight[k] / count[k] for k in weight}

    def draw(pool, k):
        pool = sorted(pool)
        if k <= 0 or not pool:
            return []
        p = np.array([max(weight[i], 0.0) for i in pool])
        p = p / p.sum() if p.sum() > 0 else None
        return list(rng.choice(pool, size=min(k, len(pool)), replace=False, p=p))

    keep = set()
    for t in sorted(by_time):
        have = by_time[t] & keep
        keep.update(draw(by_time[t] - keep, min_per_keyframe - len(have)))
    keep.update(draw(set(weight) - keep, target - len(keep)))
    out = Dataset(
        [m for m in dataset.measurements if m.landmark_id in keep],
        dataset.ground_truth,
        list(dataset.odometry),
        {k: v for k, v in dataset.landmark_priors.items() if k in keep},
        [lm for lm in dataset.landmarks if lm.id in keep],
        dict(dataset.metadata),
    )
    out.metadata["landmarks_kept"] = str(len(keep))
    return out


def load_dataset(path, format: str = "canonical", strict: bool = True, **options) -> Dataset:
    """Load a dataset; ``options`` carries adapter settings (``range_sigma``,
    ``bearing_sigma``, ``ground_truth``)."""
    if format not in FORMATS:
        raise InvalidArgument(f"unknown dataset format {format!r}; expected one of {FORMATS}")
    if format == "canonical":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise OSError(f"cannot read dataset {path}: {exc.strerror}") from exc
        ds = _parse_canonical(text, path, strict)
    elif format == "plaza":
        ds = _load_plaza(path, strict, options.get("range_sigma"))
    else:
        ds = _load_bearing_csv(path, strict, options.get("bearing_sigma"), options.get("ground_truth"))
    ds.measurements.sort(key=lambda m: m.time)
    ds.metadata["num_measurements"] = str(len(ds.measurements))
    ds.metadata["num_odometry"] = str(len(ds.odometry))
    log.info("loaded %s: %d measurements, %d odometry rows", path, len(ds.measurements), len(ds.odometry))
    return ds


# --- results -----------------------------------------------------------------

def save_trajectory_csv(trajectory: Trajectory, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "x", "y", "alpha"])
        for t, p in zip(trajectory.times, trajectory.poses):
            w.writerow([_f(t), _f(p[0]), _f(p[1]), _f(p[2])])


def load_trajectory_csv(path) -> Trajectory:
    times, poses = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header[:4]] != ["t", "x", "y", "alpha"]:
            raise ParseError("expected header t,x,y,alpha", path, 1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                vals = [float(v) for v in row[:4]]
                if len(vals) != 4:
                    raise ValueError("expected 4 columns")
            except ValueError as exc:
                raise ParseError(str(exc), path, lineno) from None
            times.append(vals[0])
            poses.append(vals[1:])
    return Trajectory(np.array(times), np.array(poses).reshape(-1, 3))


def save_landmarks_csv(landmarks, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "x", "y"])
        for lm in landmarks:
            w.writerow([int(lm.id), _f(lm.x), _f(lm.y)])


def load_landmarks_csv(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        return [Landmark2D(int(r[0]), float(r[1]), float(r[2])) for r in reader if r]


def save_results(trajectory: Trajectory, landmarks, report, path) -> dict:
    """Write trajectory.csv, landmarks.csv and (if given) metrics.json and
    errors.csv into directory ``path``. Returns the written paths."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    files = {"trajectory": out / "trajectory.csv", "landmarks": out / "landmarks.csv"}
    save_trajectory_csv(trajectory, files["trajectory"])
    save_landmarks_csv(landmarks, files["landmarks"])
    if report is not None:
        files["metrics"] = out / "metrics.json"
        files["errors"] = out / "errors.csv"
        files["metrics"].write_text(report.to_json())
        files["errors"].write_text(report.to_csv())
    return files


def write_json(data, path) -> None:
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
