"""Operating-point data: synthetic load profiles, Newton-solved samples, noise,
outliers, splits and normalization."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .acpf import NonConvergence, PFSpec, SingularJacobian, newton_solve
from .case_model import AdmittanceMatrix, BusSystem, build_admittance

__all__ = [
    "Dataset",
    "EmptySplit",
    "InfeasibleStep",
    "Normalizer",
    "PFSample",
    "RangePortion",
    "Schedule",
    "Sequential",
    "SplitSpec",
    "TooManyFailures",
    "add_noise",
    "build_samples",
    "gen_load_profiles",
    "inject_outliers",
    "input_layout",
    "load_buses",
    "portion_of",
    "read_dataset",
    "scale_to_capacity",
    "split",
    "write_dataset",
]

log = logging.getLogger(__name__)

DEFAULT_TARGET_FRACTION = 0.9
MAX_FAILURE_RATE = 0.05
OUTLIER_IQR_SCALE = 10.0
STD_FLOOR = 1e-6


class InfeasibleStep(ValueError):
    pass


class TooManyFailures(RuntimeError):
    def __init__(self, failed: int, total: int):
        super().__init__(f"{failed} of {total} power-flow solves failed (limit 5%)")
        self.failed, self.total = failed, total


class EmptySplit(ValueError):
    pass


# --------------------------------------------------------------------------- profiles


def gen_load_profiles(n_steps: int, n_loads: int, seed: int) -> np.ndarray:
    """Hourly load multipliers, shape ``(n_steps, n_loads)``.

    Each load follows ``level * (1 + daily sinusoid) * (1 + weekly sinusoid)``
    with its own amplitude and phase, times 5% lognormal jitter, clipped to
    [0, 1.2].  Stands in for measured utility load series.
    """
    if n_steps < 0 or n_loads < 0:
        raise ValueError("n_steps and n_loads must be nonnegative")
    rng = np.random.default_rng(seed)
    level = rng.uniform(0.7, 0.8, n_loads)
    daily_amp = rng.uniform(0.1, 0.25, n_loads)
    daily_phase = rng.normal(0.0, 0.3, n_loads)
    weekly_amp = rng.uniform(0.03, 0.08, n_loads)
    weekly_phase = rng.uniform(0.0, 2 * np.pi, n_loads)
    t = np.arange(n_steps, dtype=float)[:, None]
    daily = 1.0 + daily_amp * np.sin(2 * np.pi * t / 24.0 - np.pi / 2 + daily_phase)
    weekly = 1.0 + weekly_amp * np.sin(2 * np.pi * t / 168.0 + weekly_phase)
    jitter = np.exp(0.05 * rng.standard_normal((n_steps, n_loads)))
    return np.clip(level * daily * weekly * jitter, 0.0, 1.2)


def load_buses(sys: BusSystem) -> np.ndarray:
    """Buses carrying demand; one profile column each, in bus order."""
    return np.flatnonzero((sys.p_demand != 0) | (sys.q_demand != 0))


@dataclass(frozen=True, eq=False)
class Schedule:
    """Per-step, per-bus demand and dispatch (p.u.), shape ``(n_steps, N)`` each."""

    p_demand: np.ndarray
    q_demand: np.ndarray
    p_gen: np.ndarray

    def __len__(self):
        return self.p_demand.shape[0]


def scale_to_capacity(sys: BusSystem, profiles: np.ndarray,
                      target: float = DEFAULT_TARGET_FRACTION) -> Schedule:
    """Scale multipliers so the peak step's demand is ``target`` of total Pmax.

    Demand keeps each bus's power factor.  Generators share the demand in
    proportion to Pmax; the slack picks up losses in the solve.
    """
    profiles = np.asarray(profiles, dtype=float)
    loads = load_buses(sys)
    n = sys.n_bus
    if profiles.ndim != 2 or profiles.shape[1] != len(loads):
        raise ValueError(f"need one profile column per load bus ({len(loads)})")
    if np.any(profiles < 0):
        raise ValueError("profiles must be nonnegative")
    cap = np.asarray(sys.gen_capacity)
    total_cap = cap.sum()
    steps = profiles.shape[0]
    raw_p = profiles * sys.p_demand[loads]
    peak = raw_p.sum(axis=1).max(initial=0.0)
    k = target * total_cap / peak if peak > 0 else 0.0
    pd = np.zeros((steps, n))
    qd = np.zeros((steps, n))
    pd[:, loads] = k * raw_p
    qd[:, loads] = k * profiles * sys.q_demand[loads]
    total = pd.sum(axis=1)
    bad = np.flatnonzero(total > total_cap * (1 + 1e-12))
    if bad.size:
        raise InfeasibleStep(f"step {bad[0]}: demand {total[bad[0]]:.4f} exceeds capacity {total_cap:.4f}")
    share = cap / total_cap if total_cap > 0 else np.zeros(n)
    return Schedule(pd, qd, total[:, None] * share[None, :])


# --------------------------------------------------------------------------- samples


def input_layout(sys: BusSystem) -> list[tuple[str, int]]:
    """Ordered (kind, bus index) pairs of the power-flow input vector.

    Order: P at PQ buses, P at PV buses, Q at PQ buses, V at PV buses, slack
    V, slack angle.
    """
    pq, pv, sl = sys.pq, sys.pv, sys.slack
    return ([("PL", i) for i in pq] + [("PG", i) for i in pv] + [("QL", i) for i in pq]
            + [("VG", i) for i in pv] + [("VR", sl), ("thetaR", sl)])


def _feature_names(sys: BusSystem) -> tuple[list[str], list[str], list[str]]:
    ids = sys.ext_ids
    xs = [f"x_{kind}_bus{ids[i]}" for kind, i in input_layout(sys)]
    vs = [f"mu_bus{b}" for b in ids] + [f"omega_bus{b}" for b in ids]
    ss = [f"p_bus{b}" for b in ids] + [f"q_bus{b}" for b in ids]
    return xs, vs, ss


@dataclass(frozen=True, eq=False)
class PFSample:
    x: np.ndarray
    v_target: np.ndarray
    s_target: np.ndarray
    timestamp: int


@dataclass(frozen=True, eq=False)
class Dataset:
    """Samples stored column-wise.

    ``x``: power-flow inputs; ``v``: ``[mu; omega]``; ``s``: ``[p; q]``;
    ``step``: time index; ``driver``: total real demand (p.u.), the scalar
    used by range-portion splits.
    """

    x: np.ndarray
    v: np.ndarray
    s: np.ndarray
    step: np.ndarray
    driver: np.ndarray
    x_names: tuple[str, ...]
    v_names: tuple[str, ...]
    s_names: tuple[str, ...]
    noise_applied: bool = False
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.x.shape[0]

    def __getitem__(self, i) -> PFSample:
        return PFSample(self.x[i], self.v[i], self.s[i], int(self.step[i]))

    @property
    def n_bus(self) -> int:
        return self.v.shape[1] // 2

    def subset(self, idx) -> Dataset:
        idx = np.asarray(idx, dtype=int)
        meta = {k: (v[idx] if isinstance(v, np.ndarray) and len(v) == len(self) else v)
                for k, v in self.meta.items()}
        return replace(self, x=self.x[idx], v=self.v[idx], s=self.s[idx], step=self.step[idx],
                       driver=self.driver[idx], meta=meta)

    @property
    def columns(self) -> np.ndarray:
        return np.hstack([self.x, self.v, self.s])

    def with_columns(self, cols: np.ndarray, **changes) -> Dataset:
        nx, nv = self.x.shape[1], self.v.shape[1]
        return replace(self, x=cols[:, :nx], v=cols[:, nx:nx + nv], s=cols[:, nx + nv:], **changes)


def _empty(sys: BusSystem) -> Dataset:
    xs, vs, ss = _feature_names(sys)
    n = sys.n_bus
    return Dataset(np.zeros((0, len(xs))), np.zeros((0, 2 * n)), np.zeros((0, 2 * n)),
                   np.zeros(0, dtype=int), np.zeros(0), tuple(xs), tuple(vs), tuple(ss))


def build_samples(sys: BusSystem, schedule: Schedule, tol: float = 1e-8,
                  y: AdmittanceMatrix | None = None) -> tuple[Dataset, dict]:
    """Newton-solve every scheduled step; returns the dataset and a census dict.

    Raises:
        TooManyFailures: more than 5% of steps did not converge.
    """
    y = build_admittance(sys) if y is None else y
    layout = input_layout(sys)
    kinds = np.array([k for k, _ in layout])
    where = np.array([i for _, i in layout])
    xs, vs, ss, steps, drivers = [], [], [], [], []
    failed = []
    for t in range(len(schedule)):
        spec = PFSpec.from_system(sys, schedule.p_gen[t], schedule.p_demand[t], schedule.q_demand[t])
        try:
            sol = newton_solve(spec, y, tol=tol)
        except (NonConvergence, SingularJacobian):
            failed.append(t)
            continue
        x = np.empty(len(layout))
        for kind, src in (("PL", spec.p_spec), ("PG", spec.p_spec), ("QL", spec.q_spec),
                          ("VG", spec.v_spec), ("VR", spec.v_spec), ("thetaR", spec.theta_spec)):
            m = kinds == kind
            x[m] = src[where[m]]
        xs.append(x)
        vs.append(np.concatenate([sol.rect.mu, sol.rect.omega]))
        ss.append(np.concatenate([sol.inj.p, sol.inj.q]))
        steps.append(t)
        drivers.append(schedule.p_demand[t].sum())
    census = {"steps": len(schedule), "converged": len(steps), "failed": len(failed),
              "failed_steps": failed}
    if len(schedule) and len(failed) > MAX_FAILURE_RATE * len(schedule):
        raise TooManyFailures(len(failed), len(schedule))
    if failed:
        log.info("dropped %d non-converged steps", len(failed))
    if not steps:
        return _empty(sys), census
    base = _empty(sys)
    ds = replace(base, x=np.array(xs), v=np.array(vs), s=np.array(ss),
                 step=np.array(steps, dtype=int), driver=np.array(drivers))
    return ds, census


# --------------------------------------------------------------------------- corruption


def add_noise(ds: Dataset, rel_std: float, seed: int) -> Dataset:
    """Multiply every feature value by ``1 + eps``, ``eps ~ N(0, rel_std**2)``."""
    if rel_std < 0:
        raise ValueError("rel_std must be nonnegative")
    cols = ds.columns
    if rel_std == 0:
        return ds.with_columns(cols.copy(), noise_applied=True)
    eps = np.random.default_rng(seed).normal(0.0, rel_std, cols.shape)
    return ds.with_columns(cols * (1.0 + eps), noise_applied=True)


def inject_outliers(ds: Dataset, fraction: float, seed: int,
                    iqr: np.ndarray | None = None) -> tuple[Dataset, np.ndarray]:
    """Corrupt ``floor(fraction * n)`` rows with additive N(0, (10 IQR)^2) noise per feature.

    ``iqr`` defaults to the interquartile range of ``ds`` itself (the training
    set).  Returns the corrupted dataset and the corrupted row indices.
    """
    if not 0.0 <= fraction <= 0.10:
        raise ValueError("outlier fraction must lie in [0, 0.10]")
    cols = ds.columns.copy()
    n = cols.shape[0]
    k = math.floor(fraction * n + 1e-9)
    if k == 0:
        return ds.with_columns(cols), np.zeros(0, dtype=int)
    if iqr is None:
        q75, q25 = np.percentile(cols, [75, 25], axis=0)
        iqr = q75 - q25
    rng = np.random.default_rng(seed)
    rows = np.sort(rng.choice(n, size=k, replace=False))
    cols[rows] += rng.standard_normal((k, cols.shape[1])) * (OUTLIER_IQR_SCALE * iqr)
    return ds.with_columns(cols), rows


# --------------------------------------------------------------------------- splits


@dataclass(frozen=True)
class Sequential:
    train_frac: float = 0.6
    val_frac: float = 0.1

    def __post_init__(self):
        if self.train_frac < 0 or self.val_frac < 0 or self.train_frac + self.val_frac > 1:
            raise ValueError("fractions must be nonnegative and sum to at most 1")


@dataclass(frozen=True)
class RangePortion:
    portion_count: int = 20
    train_portions: tuple[int, ...] = ()
    val_portions: tuple[int, ...] = ()

    def __post_init__(self):
        tr, va = set(self.train_portions), set(self.val_portions)
        if tr & va:
            raise ValueError("train and validation portions must be disjoint")
        if any(not 0 <= p < self.portion_count for p in tr | va):
            raise ValueError("portion index out of range")

    @property
    def test_portions(self) -> tuple[int, ...]:
        used = set(self.train_portions) | set(self.val_portions)
        return tuple(p for p in range(self.portion_count) if p not in used)

    @classmethod
    def interpolation(cls, portion_count: int = 20, test=(8, 9, 10, 11), val=(2, 5, 14, 17)):
        train = tuple(p for p in range(portion_count) if p not in set(test) | set(val))
        return cls(portion_count, train, tuple(val))

    @classmethod
    def extrapolation(cls, portion_count: int = 20, test=(16, 17, 18, 19), val=(2, 6, 10, 13)):
        train = tuple(p for p in range(portion_count) if p not in set(test) | set(val))
        return cls(portion_count, train, tuple(val))


@dataclass(frozen=True)
class SplitSpec:
    regime: Sequential | RangePortion = field(default_factory=Sequential)
    seed: int = 0


def portion_of(driver: np.ndarray, portion_count: int) -> np.ndarray:
    """Map the driver to [-1, 1] (observed min/max) and bin into equal-width portions."""
    lo, hi = float(np.min(driver)), float(np.max(driver))
    scaled = 2.0 * (driver - lo) / (hi - lo) - 1.0 if hi > lo else np.zeros_like(driver)
    return np.minimum(np.floor((scaled + 1.0) / 2.0 * portion_count).astype(int), portion_count - 1)


def split(ds: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Split into (train, val, test).

    Sequential: contiguous prefix/middle/suffix.  RangePortion: by the binned
    driver; each part's ``meta['portion']`` holds the per-sample portion.
    """
    n = len(ds)
    if isinstance(spec.regime, Sequential):
        n_train = round(spec.regime.train_frac * n)
        n_val = round((spec.regime.train_frac + spec.regime.val_frac) * n) - n_train
        idx = [np.arange(n_train), np.arange(n_train, n_train + n_val), np.arange(n_train + n_val, n)]
        parts = [ds.subset(i) for i in idx]
    else:
        reg = spec.regime
        por = portion_of(ds.driver, reg.portion_count)
        parts = []
        for group in (reg.train_portions, reg.val_portions, reg.test_portions):
            idx = np.flatnonzero(np.isin(por, group))
            part = ds.subset(idx)
            part.meta["portion"] = por[idx]
            parts.append(part)
    for name, part in zip(("train", "validation", "test"), parts):
        if len(part) == 0:
            raise EmptySplit(f"{name} split is empty")
    return tuple(parts)


@dataclass(frozen=True, eq=False)
class Normalizer:
    """Per-feature z-score; features with std below ``1e-6`` get unit scale."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, a: np.ndarray) -> Normalizer:
        mean = a.mean(axis=0)
        std = a.std(axis=0)
        std = np.where(std > STD_FLOOR, std, 1.0)
        return cls(mean, std)

    def transform(self, a):
        return (a - self.mean) / self.std

    def inverse(self, z):
        return z * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d) -> Normalizer:
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["std"], dtype=float))


# --------------------------------------------------------------------------- files


def write_dataset(ds: Dataset, path: str | Path, meta: dict | None = None) -> None:
    """CSV with one sample per row plus a ``.json`` metadata sidecar."""
    path = Path(path)
    header = ["step", "driver", *ds.x_names, *ds.v_names, *ds.s_names]
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(ds)):
            row = [str(int(ds.step[i])), repr(float(ds.driver[i]))]
            row += [repr(float(v)) for v in np.concatenate([ds.x[i], ds.v[i], ds.s[i]])]
            w.writerow(row)
    tmp.replace(path)
    side = {"noise_applied": ds.noise_applied, **ds.meta, **(meta or {})}
    side = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in side.items()}
    mpath = path.with_suffix(".json")
    mtmp = mpath.with_suffix(".json.tmp")
    mtmp.write_text(json.dumps(side, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    mtmp.replace(mpath)


def read_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    xn = tuple(h for h in header if h.startswith("x_"))
    vn = tuple(h for h in header if h.startswith(("mu_", "omega_")))
    sn = tuple(h for h in header if h.startswith(("p_", "q_")))
    a = np.array(body, dtype=float).reshape(len(body), len(header))
    nx, nv = len(xn), len(vn)
    meta = {}
    mpath = path.with_suffix(".json")
    if mpath.exists():
        meta = json.loads(mpath.read_text(encoding="utf-8"))
    noise = bool(meta.pop("noise_applied", False))
    return Dataset(a[:, 2:2 + nx], a[:, 2 + nx:2 + nx + nv], a[:, 2 + nx + nv:],
                   a[:, 0].astype(int), a[:, 1], xn, vn, sn, noise, meta)
