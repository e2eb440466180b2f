"""Evaluation harness: solver and modeling comparisons, range-split generalization,
outlier robustness and admittance recovery.

Every experiment is a pure function of its configuration and seeds.  Reports
serialize to CSV with fixed formatting so identical runs give identical bytes.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .case_model import AdjacencyMatrix, AdmittanceMatrix, BusSystem, adjacency, build_admittance
from .data import (Dataset, RangePortion, Sequential, SplitSpec, add_noise, build_samples,
                   gen_load_profiles, inject_outliers, load_buses, scale_to_capacity, split)
from .models import (Bnn, LinearModel, TrainConfig, build_model, fit_bnn, fit_linear,
                     make_decoder, train, train_decoder)
from .nn import LossWeights

__all__ = [
    "ALPHA_GRID",
    "ExperimentConfig",
    "ExperimentReport",
    "GapReport",
    "MetricSet",
    "MODELING_METHODS",
    "RecoveryReport",
    "RobustnessReport",
    "SOLVER_METHODS",
    "analyze_recovery",
    "compute_metrics",
    "make_dataset",
    "run_interp_extrap",
    "run_modeling_comparison",
    "run_outlier_robustness",
    "run_solver_comparison",
    "select_alpha",
    "write_gnuplot",
]

log = logging.getLogger(__name__)

SOLVER_METHODS = ("lr", "mlp", "mlp+mlp", "mlp+bnn", "mlp+tpbnn")
MODELING_METHODS = ("lr", "mlp", "bnn", "tpbnn")
PGNN_METHODS = ("mlp+mlp", "mlp+bnn", "mlp+tpbnn")
ALPHA_GRID = (1.0, 0.3, 0.1, 0.03)
QUANTILE_GRID = tuple(round(0.01 * k, 2) for k in range(1, 101))
RECOVERY_THRESHOLD = 0.01
ZERO_TARGET = 1e-9


def _fmt(v: float) -> str:
    return f"{v:.9g}"


# --------------------------------------------------------------------------- metrics


@dataclass(frozen=True)
class MetricSet:
    """Error summary in p.u.; MAPE quantiles are ``(quantile, percent)`` pairs.

    ``mape_excluded`` counts entries whose target is zero (magnitude at most
    1e-9 p.u., i.e. zero up to solver round-off), left out of MAPE.
    """

    rmse: float
    mae: float
    mape_quantiles: tuple[tuple[float, float], ...]
    mape_excluded: int = 0

    def mape_at(self, q: float) -> float:
        for qq, v in self.mape_quantiles:
            if abs(qq - q) < 1e-9:
                return v
        raise KeyError(q)


def compute_metrics(pred: np.ndarray, target: np.ndarray, grid=QUANTILE_GRID) -> MetricSet:
    pred, target = np.asarray(pred, dtype=float), np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    err = pred - target
    rmse = float(np.sqrt(np.mean(err * err))) if err.size else 0.0
    mae = float(np.mean(np.abs(err))) if err.size else 0.0
    nz = np.abs(target) > ZERO_TARGET
    ape = np.abs(err[nz]) / np.abs(target[nz]) * 100.0
    if ape.size:
        vals = np.quantile(ape, grid)
        vals = np.maximum.accumulate(vals)
    else:
        vals = np.zeros(len(grid))
    return MetricSet(rmse, mae, tuple(zip(grid, map(float, vals))), int(np.count_nonzero(~nz)))


# --------------------------------------------------------------------------- configuration


@dataclass(frozen=True)
class ExperimentConfig:
    """Knobs shared by all experiments (desk-scale defaults)."""

    n_steps: int = 2000
    data_seed: int = 7
    seeds: tuple[int, ...] = (0, 1, 2)
    aux_seeds: tuple[int, ...] = (0,)
    noise: float = 0.01
    modeling_noise: float = 0.0
    alpha_sup: float = 1.0
    alpha_unsup: float = 0.03  # validation-grid choice, see select_alpha
    hidden: tuple[int, ...] = (128, 128)
    decoder_hidden: tuple[int, ...] = (128,)
    lr: float = 1e-3
    decoder_lr: float = 1e-2
    batch_size: int = 32
    max_epochs: int = 300
    patience: int = 50
    decoder_epochs: int = 400
    bnn_fit: str = "lstsq"
    outlier_levels: tuple[float, ...] = (0.0, 0.02, 0.05, 0.10)
    methods: tuple[str, ...] = SOLVER_METHODS
    modeling_methods: tuple[str, ...] = MODELING_METHODS

    def __post_init__(self):
        bad = [m for m in self.methods if m not in SOLVER_METHODS]
        bad += [m for m in self.modeling_methods if m not in MODELING_METHODS]
        if bad:
            raise ValueError(f"unknown method(s) {bad}; valid solver methods: "
                             f"{', '.join(SOLVER_METHODS)}; valid modeling methods: "
                             f"{', '.join(MODELING_METHODS)}")
        if self.bnn_fit not in ("lstsq", "adam"):
            raise ValueError("bnn_fit must be 'lstsq' or 'adam'")
        if any(not 0.0 <= lv <= 0.10 for lv in self.outlier_levels):
            raise ValueError("outlier levels must lie in [0, 0.10]")
        if not self.seeds:
            raise ValueError("at least one seed is required")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha_sup, self.alpha_unsup)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(lr=self.lr, decoder_lr=self.decoder_lr, batch_size=self.batch_size,
                           max_epochs=self.max_epochs, patience=self.patience, seed=seed)


def make_dataset(sys: BusSystem, cfg: ExperimentConfig) -> tuple[Dataset, dict]:
    """Synthetic profiles, capacity scaling and Newton solves for every step."""
    prof = gen_load_profiles(cfg.n_steps, len(load_buses(sys)), cfg.data_seed)
    return build_samples(sys, scale_to_capacity(sys, prof))


def _noisy(ds: Dataset, level: float, seed: int) -> Dataset:
    return add_noise(ds, level, seed) if level > 0 else ds


def _training_parts(ds: Dataset, regime, cfg: ExperimentConfig, seed: int, noise: float):
    tr, va, te = split(ds, SplitSpec(regime, seed))
    return _noisy(tr, noise, 2 * seed + 1), _noisy(va, noise, 2 * seed + 2), te


# --------------------------------------------------------------------------- reports


@dataclass
class ExperimentReport:
    """Per-method, per-target metrics over seeds plus scenario provenance."""

    name: str
    scenario: dict
    targets: tuple[str, ...]
    methods: tuple[str, ...]
    results: dict = field(default_factory=dict)
    models: dict = field(default_factory=dict)

    def add(self, method: str, seed: int, metrics: dict[str, MetricSet]) -> None:
        self.results.setdefault(method, {})[seed] = metrics

    def values(self, method: str, target: str, stat: str = "rmse") -> np.ndarray:
        return np.array([getattr(m[target], stat) for _, m in sorted(self.results[method].items())])

    def mean(self, method: str, target: str, stat: str = "rmse") -> float:
        return float(np.mean(self.values(method, target, stat)))

    def std(self, method: str, target: str, stat: str = "rmse") -> float:
        return float(np.std(self.values(method, target, stat)))

    def _provenance(self) -> list[str]:
        return [str(self.scenario.get(k, "")) for k in ("case", "seeds", "split", "noise", "outlier")]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["experiment", "case", "seeds", "split", "noise", "outlier", "method",
                    "target", "rmse_mean", "rmse_std", "mae_mean", "mae_std", "mape_p50",
                    "mape_p90", "mape_excluded"])
        for method in self.methods:
            for tgt in self.targets:
                p50 = np.mean([m[tgt].mape_at(0.5) for m in self.results[method].values()])
                p90 = np.mean([m[tgt].mape_at(0.9) for m in self.results[method].values()])
                excl = sum(m[tgt].mape_excluded for m in self.results[method].values())
                w.writerow([self.name, *self._provenance(), method, tgt,
                            _fmt(self.mean(method, tgt)), _fmt(self.std(method, tgt)),
                            _fmt(self.mean(method, tgt, "mae")), _fmt(self.std(method, tgt, "mae")),
                            _fmt(p50), _fmt(p90), excl])
        return buf.getvalue()

    def cdf_csv(self, target: str = "all") -> str:
        """MAPE CDF per method (seed-averaged quantiles), one column per method.

        The ``pgnn_aggregate`` column, when present, pools the PGNN variants.
        """
        cols = list(self.methods)
        pg = [m for m in self.methods if m in PGNN_METHODS]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["quantile", *cols] + (["pgnn_aggregate"] if pg else []))
        for k, q in enumerate(QUANTILE_GRID):
            row = [np.mean([m[target].mape_quantiles[k][1] for m in self.results[c].values()])
                   for c in cols]
            if pg:
                row.append(np.mean([row[cols.index(c)] for c in pg]))
            w.writerow([_fmt(q)] + [_fmt(v) for v in row])
        return buf.getvalue()


def _voltage_metrics(pred: np.ndarray, target: np.ndarray, n: int) -> dict[str, MetricSet]:
    return {"mu": compute_metrics(pred[:, :n], target[:, :n]),
            "omega": compute_metrics(pred[:, n:], target[:, n:]),
            "all": compute_metrics(pred, target)}


def _injection_metrics(pred: np.ndarray, target: np.ndarray, n: int) -> dict[str, MetricSet]:
    return {"p": compute_metrics(pred[:, :n], target[:, :n]),
            "q": compute_metrics(pred[:, n:], target[:, n:]),
            "all": compute_metrics(pred, target)}


def _fit_solver(method: str, tr: Dataset, va: Dataset, cfg: ExperimentConfig, seed: int,
                adj: AdjacencyMatrix, weights: LossWeights | None = None):
    """Train one voltage predictor; returns an object with ``predict_v``."""
    if method == "lr":
        lm = fit_linear(tr.x, tr.v)
        return _LinearSolver(lm)
    model = build_model(method, tr, seed, weights or cfg.weights, cfg.hidden, cfg.decoder_hidden,
                        adj.a)
    train(model, tr, va, cfg.train_config(seed))
    return model


@dataclass(frozen=True, eq=False)
class _LinearSolver:
    lm: LinearModel
    kind: str = "lr"

    def predict_v(self, x):
        return self.lm.predict(x)


def _scenario(sys: BusSystem, cfg: ExperimentConfig, seeds, split_name: str, noise: float,
              outlier: float = 0.0) -> dict:
    return {"case": sys.name, "seeds": " ".join(map(str, seeds)), "split": split_name,
            "noise": _fmt(noise), "outlier": _fmt(outlier)}


# --------------------------------------------------------------------------- experiments


def run_solver_comparison(sys: BusSystem, cfg: ExperimentConfig,
                          ds: Dataset | None = None) -> ExperimentReport:
    """Train every configured solver on identical sequential splits for each seed."""
    ds = make_dataset(sys, cfg)[0] if ds is None else ds
    adj = adjacency(sys)
    n = sys.n_bus
    rep = ExperimentReport("solver_comparison", _scenario(sys, cfg, cfg.seeds, "sequential",
                                                          cfg.noise),
                           ("mu", "omega", "all"), tuple(cfg.methods))
    for seed in cfg.seeds:
        tr, va, te = _training_parts(ds, Sequential(), cfg, seed, cfg.noise)
        for method in cfg.methods:
            model = _fit_solver(method, tr, va, cfg, seed, adj)
            rep.add(method, seed, _voltage_metrics(model.predict_v(te.x), te.v, n))
            rep.models.setdefault(method, {})[seed] = model
    return rep


def select_alpha(sys: BusSystem, cfg: ExperimentConfig, method: str = "mlp+tpbnn",
                 ds: Dataset | None = None, grid=ALPHA_GRID) -> tuple[float, dict[float, float]]:
    """Pick ``alpha_unsup`` from ``grid`` by validation voltage RMSE (first seed)."""
    ds = make_dataset(sys, cfg)[0] if ds is None else ds
    seed = cfg.seeds[0]
    tr, va, _ = _training_parts(ds, Sequential(), cfg, seed, cfg.noise)
    adj = adjacency(sys)
    scores = {}
    for a in grid:
        model = _fit_solver(method, tr, va, cfg, seed, adj, LossWeights(cfg.alpha_sup, a))
        scores[a] = compute_metrics(model.predict_v(va.x), va.v).rmse
    best = min(grid, key=lambda a: (scores[a], -a))
    return best, scores


def _fit_modeler(method: str, tr: Dataset, va: Dataset, cfg: ExperimentConfig, seed: int,
                 adj: AdjacencyMatrix):
    """Train one voltage-to-injection model; returns a callable ``v -> s``."""
    n = tr.n_bus
    if method == "lr":
        return fit_linear(tr.v, tr.s).predict, None
    from .data import Normalizer

    s_norm = Normalizer.fit(tr.s)
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(3)[1])
    dec = make_decoder(method, n, rng, Normalizer.fit(tr.v), s_norm, cfg.decoder_hidden, adj.a)
    if isinstance(dec, Bnn) and cfg.bnn_fit == "lstsq":
        fit_bnn(dec, tr)
    else:
        tc = replace(cfg.train_config(seed), max_epochs=cfg.decoder_epochs)
        train_decoder(dec, s_norm, tr, va, tc)
    return (lambda v: dec.forward(v)[0]), dec


def run_modeling_comparison(sys: BusSystem, cfg: ExperimentConfig,
                            ds: Dataset | None = None) -> ExperimentReport:
    """Fit decoders standalone on (voltage -> injection) pairs.

    Trained decoders are kept in ``report.models[method][seed]`` for recovery
    analysis.
    """
    ds = make_dataset(sys, cfg)[0] if ds is None else ds
    adj = adjacency(sys)
    n = sys.n_bus
    rep = ExperimentReport("modeling_comparison",
                           _scenario(sys, cfg, cfg.seeds, "sequential", cfg.modeling_noise),
                           ("p", "q", "all"), tuple(cfg.modeling_methods))
    for seed in cfg.seeds:
        tr, va, te = _training_parts(ds, Sequential(), cfg, seed, cfg.modeling_noise)
        for method in cfg.modeling_methods:
            predict, dec = _fit_modeler(method, tr, va, cfg, seed, adj)
            rep.add(method, seed, _injection_metrics(predict(te.v), te.s, n))
            rep.models.setdefault(method, {})[seed] = dec
    return rep


@dataclass
class GapReport:
    """Per-portion RMSE curves and generalization gaps for one regime.

    ``curves[method][seed]`` maps ``(role, portion)`` to RMSE over all voltage
    outputs; ``gap = mean(test portions) - mean(validation portions)``.
    """

    regime: str
    scenario: dict
    methods: tuple[str, ...]
    curves: dict = field(default_factory=dict)

    def gap(self, method: str) -> float:
        gaps = []
        for curve in self.curves[method].values():
            test = [v for (role, _), v in curve.items() if role == "test"]
            val = [v for (role, _), v in curve.items() if role == "val"]
            gaps.append(np.mean(test) - np.mean(val))
        return float(np.mean(gaps))

    @property
    def pgnn_gap(self) -> float:
        """Mean gap over the PGNN variants present."""
        return float(np.mean([self.gap(m) for m in self.methods if m in PGNN_METHODS]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["experiment", "case", "seeds", "regime", "noise", "method", "seed", "role",
                    "portion", "rmse"])
        sc = self.scenario
        for m in self.methods:
            for seed, curve in sorted(self.curves[m].items()):
                for (role, por), v in sorted(curve.items()):
                    w.writerow(["interp_extrap", sc["case"], sc["seeds"], self.regime, sc["noise"],
                                m, seed, role, por, _fmt(v)])
        return buf.getvalue()

    def gaps_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["regime", "method", "gap"])
        for m in self.methods:
            w.writerow([self.regime, m, _fmt(self.gap(m))])
        if any(m in PGNN_METHODS for m in self.methods):
            w.writerow([self.regime, "pgnn_aggregate", _fmt(self.pgnn_gap)])
        return buf.getvalue()


def _portion_rmse(pred, target, portions, role) -> dict:
    out = {}
    for p in np.unique(portions):
        m = portions == p
        out[(role, int(p))] = float(np.sqrt(np.mean((pred[m] - target[m]) ** 2)))
    return out


def run_interp_extrap(sys: BusSystem, cfg: ExperimentConfig, ds: Dataset | None = None,
                      regimes: dict | None = None) -> dict[str, GapReport]:
    """Train on range portions of total demand; evaluate inside and outside the trained range."""
    ds = make_dataset(sys, cfg)[0] if ds is None else ds
    regimes = regimes or {"interpolation": RangePortion.interpolation(),
                          "extrapolation": RangePortion.extrapolation()}
    adj = adjacency(sys)
    methods = tuple(cfg.methods)
    out = {}
    for name, regime in regimes.items():
        rep = GapReport(name, _scenario(sys, cfg, cfg.aux_seeds, name, cfg.noise), methods)
        for seed in cfg.aux_seeds:
            tr, va, te = _training_parts(ds, regime, cfg, seed, cfg.noise)
            for method in methods:
                model = _fit_solver(method, tr, va, cfg, seed, adj)
                # validation curve on clean targets so both curves measure the same thing
                clean_va = split(ds, SplitSpec(regime, seed))[1]
                curve = _portion_rmse(model.predict_v(clean_va.x), clean_va.v,
                                      clean_va.meta["portion"], "val")
                curve.update(_portion_rmse(model.predict_v(te.x), te.v, te.meta["portion"], "test"))
                rep.curves.setdefault(method, {})[seed] = curve
        out[name] = rep
    return out


@dataclass
class RobustnessReport:
    """Test MAE (all voltage outputs) per outlier level, method and seed."""

    scenario: dict
    levels: tuple[float, ...]
    methods: tuple[str, ...]
    mae: dict = field(default_factory=dict)

    def mean_mae(self, method: str, level: float) -> float:
        return float(np.mean(list(self.mae[method][level].values())))

    def slope(self, method: str) -> float:
        """MAE at the highest level divided by MAE at level 0."""
        return self.mean_mae(method, max(self.levels)) / self.mean_mae(method, 0.0)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["experiment", "case", "seeds", "split", "noise", "outlier", "method",
                    "mae_mean", "mae_std"])
        sc = self.scenario
        for m in self.methods:
            for lv in self.levels:
                vals = list(self.mae[m][lv].values())
                w.writerow(["outlier_robustness", sc["case"], sc["seeds"], sc["split"], sc["noise"],
                            _fmt(lv), m, _fmt(np.mean(vals)), _fmt(np.std(vals))])
        return buf.getvalue()

    def slopes_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "slope"])
        for m in self.methods:
            w.writerow([m, _fmt(self.slope(m))])
        return buf.getvalue()


def run_outlier_robustness(sys: BusSystem, cfg: ExperimentConfig, ds: Dataset | None = None,
                           levels=None) -> RobustnessReport:
    """Corrupt a fraction of training rows with heavy outliers and measure test MAE."""
    levels = tuple(cfg.outlier_levels if levels is None else levels)
    if 0.0 not in levels:
        raise ValueError("levels must include 0 (the reference level)")
    if any(not 0.0 <= lv <= 0.10 for lv in levels):
        raise ValueError("outlier levels must lie in [0, 0.10]")
    ds = make_dataset(sys, cfg)[0] if ds is None else ds
    adj = adjacency(sys)
    methods = tuple(cfg.methods)
    rep = RobustnessReport(_scenario(sys, cfg, cfg.aux_seeds, "sequential", cfg.noise), levels,
                           methods)
    for seed in cfg.aux_seeds:
        tr, va, te = _training_parts(ds, Sequential(), cfg, seed, cfg.noise)
        for lv in levels:
            tr_o, _ = inject_outliers(tr, lv, 1000 + seed)
            for method in methods:
                model = _fit_solver(method, tr_o, va, cfg, seed, adj)
                mae = compute_metrics(model.predict_v(te.x), te.v).mae
                rep.mae.setdefault(method, {}).setdefault(lv, {})[seed] = mae
    return rep


# --------------------------------------------------------------------------- recovery


@dataclass
class RecoveryReport:
    pattern_precision: float
    pattern_recall: float
    weight_rmse_on_pattern: float
    heatmaps: dict[str, np.ndarray]

    def write_heatmaps(self, directory: str | Path, prefix: str = "") -> list[Path]:
        directory = Path(directory)
        paths = []
        for name, mat in self.heatmaps.items():
            path = directory / f"{prefix}{name}.csv"
            _atomic_write(path, _matrix_csv(mat))
            paths.append(path)
        return paths


def _matrix_csv(mat: np.ndarray) -> str:
    return "".join(",".join(_fmt(v) for v in row) + "\n" for row in mat)


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def analyze_recovery(decoder: Bnn, y: AdmittanceMatrix, a: AdjacencyMatrix) -> RecoveryReport:
    """Compare learned ``(W_G, W_B)`` with ``(G, B)``.

    Masked decoders: an entry is learned when it is nonzero.  Unmasked: when
    its magnitude exceeds 1% of the largest weight magnitude in its matrix.
    The true pattern is the adjacency (self-loops included).  Weight RMSE is
    taken over both matrices on the true pattern.
    """
    truth = np.asarray(a.a) != 0
    if decoder.mask is not None:
        learned = (decoder.w_g != 0) | (decoder.w_b != 0)
    else:
        learned = np.zeros_like(truth)
        for w in (decoder.w_g, decoder.w_b):
            top = np.max(np.abs(w))
            if top > 0:
                learned |= np.abs(w) > RECOVERY_THRESHOLD * top
    hits = np.count_nonzero(learned & truth)
    precision = hits / np.count_nonzero(learned) if learned.any() else 0.0
    recall = hits / np.count_nonzero(truth)
    d = np.concatenate([(decoder.w_g - y.g)[truth], (decoder.w_b - y.b)[truth]])
    heat = {"w_g": decoder.w_g.copy(), "g": np.array(y.g), "w_b": decoder.w_b.copy(),
            "b": np.array(y.b)}
    return RecoveryReport(float(precision), float(recall), float(np.sqrt(np.mean(d * d))), heat)


# --------------------------------------------------------------------------- plotting


def write_gnuplot(path: str | Path, data_file: str, title: str, columns: list[str],
                  xlabel: str = "x", ylabel: str = "y", logscale: bool = False) -> None:
    """Emit a gnuplot command file plotting ``columns`` (2..k) of a CSV against column 1."""
    lines = ["set datafile separator ','", f"set title '{title}'", f"set xlabel '{xlabel}'",
             f"set ylabel '{ylabel}'", "set key left top"]
    if logscale:
        lines.append("set logscale y")
    plots = [f"'{data_file}' using 1:{i + 2} skip 1 with lines title '{c}'"
             for i, c in enumerate(columns)]
    lines.append("plot " + ", \\\n     ".join(plots))
    _atomic_write(Path(path), "\n".join(lines) + "\n")
