"""Run configuration and the end-to-end pipelines behind the command-line tool.

Every pipeline writes its artifacts into ``config.out``:

* ``checkpoint.json``: model document plus normalisation and the run config
* ``trace.csv``: training trace (see ``training.TRACE_HEADER``)
* ``report.json``: held-out metrics
* ``predictions.csv``: inputs in original units, outputs in the model's target space
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import (
    TOY_DENSE_CAP,
    TOY_NOISE_STD,
    Dataset,
    EvalReport,
    Normalization,
    ar_lag,
    evaluate,
    gen_square_wave,
    gen_toy_gp,
    load_csv,
    predict_observed,
    report_from_predictions,
    split_indices,
)
from .errors import ConfigError, SchemaError
from .exact_gp import DEFAULT_MAX_N, ExactGP
from .kernels import GPHyperparams, init_eq, init_sm, parse_kernel_spec
from .svgp import BlitzModel
from .training import Trace, TrainConfig, build_grid, train

logger = logging.getLogger(__name__)

RUN_SCHEMA = "blitzgp.run/1"
SOURCES = ("toy", "square_wave", "csv")
NOISE_INIT_FRACTION = 0.1
TIMING_FIELDS = ("wall_seconds", "fit_seconds")


@dataclass
class DataSpec:
    """Where the data comes from and how it is split and transformed."""

    source: str = "toy"
    path: str | None = None
    target: str | None = None
    features: list | None = None
    test_path: str | None = None
    test_fraction: float = 1.0 / 6.0
    normalize: bool | None = None
    log_target: bool = False
    ar_lags: int | None = None
    n: int = 600
    noise: float = TOY_NOISE_STD
    blocks: int = 7

    def problems(self) -> list[str]:
        errs = []
        if self.source not in SOURCES:
            errs.append(f"data.source must be one of {SOURCES}, got {self.source!r}")
        if self.source == "csv":
            if not self.path:
                errs.append("data.path is required for csv data")
            elif not Path(self.path).is_file():
                errs.append(f"data.path {self.path!r} does not exist")
            if not self.target:
                errs.append("data.target is required for csv data")
            if self.test_path and not Path(self.test_path).is_file():
                errs.append(f"data.test_path {self.test_path!r} does not exist")
        elif self.path or self.test_path:
            errs.append(f"data.path/test_path given but source is {self.source!r}; exactly one data source is allowed")
        if not self.test_path and not 0.0 < self.test_fraction < 1.0:
            errs.append("data.test_fraction must lie in (0, 1)")
        if self.n < 2:
            errs.append("data.n must be >= 2")
        if self.noise < 0:
            errs.append("data.noise must be >= 0")
        if self.blocks < 2:
            errs.append("data.blocks must be >= 2")
        if self.ar_lags is not None and self.ar_lags < 1:
            errs.append("data.ar_lags must be >= 1")
        return errs

    @property
    def normalizes(self) -> bool:
        return self.source == "csv" if self.normalize is None else bool(self.normalize)


@dataclass
class RunConfig:
    data: DataSpec = field(default_factory=DataSpec)
    model: str = "blitz"
    kernel: str = "eq"
    grid: list | None = None
    grid_padding: float = 0.0
    whiten: bool = True
    optimize_grid: bool = False
    train: TrainConfig = field(default_factory=TrainConfig)
    exact_iterations: int = 500
    exact_max_n: int = DEFAULT_MAX_N
    dense_cap: int = TOY_DENSE_CAP
    frontier_sizes: list = field(default_factory=lambda: [4, 9, 16])
    seed: int = 0
    out: str = "runs/default"

    def problems(self) -> list[str]:
        errs = self.data.problems()
        if self.model not in ("blitz", "exact"):
            errs.append(f"model must be 'blitz' or 'exact', got {self.model!r}")
        try:
            parse_kernel_spec(self.kernel)
        except (ValueError, AttributeError) as exc:
            errs.append(f"kernel: {exc}")
        if self.grid is not None and (not self.grid or any(int(g) < 1 for g in self.grid)):
            errs.append("grid sizes must be positive integers")
        if self.grid_padding < 0:
            errs.append("grid_padding must be >= 0")
        try:
            self.train.validate()
        except ConfigError as exc:
            errs += [f"train: {e}" for e in exc.errors]
        if self.exact_iterations < 0:
            errs.append("exact_iterations must be >= 0")
        if self.exact_max_n < 1 or self.dense_cap < 1:
            errs.append("dense guards must be >= 1")
        if not self.frontier_sizes or any(int(s) < 1 for s in self.frontier_sizes):
            errs.append("frontier_sizes must be a non-empty list of positive integers")
        return errs

    def validate(self) -> "RunConfig":
        errs = self.problems()
        if errs:
            raise ConfigError(f"{len(errs)} configuration error(s)", errs)
        self.train.seed = self.seed
        return self

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        """Build and validate; every unknown key and invalid value is reported together."""
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        errs = []
        top = {f.name for f in fields(cls)}
        errs += [f"unknown config key {k!r}" for k in sorted(set(doc) - top)]
        data_doc = dict(doc.get("data") or {})
        data_keys = {f.name for f in fields(DataSpec)}
        errs += [f"unknown data key {k!r}" for k in sorted(set(data_doc) - data_keys)]
        data = DataSpec(**{k: v for k, v in data_doc.items() if k in data_keys})
        train_doc = dict(doc.get("train") or {})
        train_keys = {f.name for f in fields(TrainConfig)}
        errs += [f"unknown train key {k!r}" for k in sorted(set(train_doc) - train_keys)]
        if "seed" in train_doc:
            errs.append("train.seed is not allowed; use the top-level seed")
        tc = TrainConfig.__new__(TrainConfig)
        for f in fields(TrainConfig):
            setattr(tc, f.name, train_doc.get(f.name, f.default))
        rest = {k: v for k, v in doc.items() if k in top and k not in ("data", "train")}
        try:
            cfg = cls(data=data, train=tc, **rest)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        try:
            errs += cfg.problems()
        except (TypeError, ValueError) as exc:
            errs.append(f"malformed value: {exc}")
        if errs:
            raise ConfigError(f"{len(errs)} configuration error(s)", errs)
        cfg.train.seed = cfg.seed
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["train"].pop("seed", None)
        return doc

    def grid_sizes(self, ndim: int) -> list[int]:
        if self.grid is None:
            return [10] * ndim
        sizes = [int(g) for g in self.grid]
        if len(sizes) == 1:
            sizes *= ndim
        if len(sizes) != ndim:
            raise ConfigError(f"grid has {len(sizes)} sizes for {ndim}-d data")
        return sizes

    @property
    def out_dir(self) -> Path:
        return Path(self.out)


# ---------------------------------------------------------------------------
# data preparation
# ---------------------------------------------------------------------------


@dataclass
class PreparedData:
    train: Dataset
    test: Dataset
    normalization: Normalization
    extra: dict = field(default_factory=dict)


def prepare_data(cfg: RunConfig) -> PreparedData:
    """Load or generate, split and normalise (statistics from the training part only)."""
    spec = cfg.data
    extra = {}
    if spec.source == "toy":
        full = gen_toy_gp(cfg.seed, n=spec.n, noise=spec.noise, dense_cap=cfg.dense_cap)
    elif spec.source == "square_wave":
        full, excised = gen_square_wave(cfg.seed, n=spec.n, blocks=spec.blocks)
        extra["excised"] = excised
    else:
        full = load_csv(spec.path, spec.target, spec.features)
        if spec.ar_lags:
            full = ar_lag(full.y, spec.ar_lags, spec.target)
    if spec.test_path:
        test = load_csv(spec.test_path, spec.target, spec.features)
        if spec.ar_lags:
            test = ar_lag(test.y, spec.ar_lags, spec.target)
        train_ds = full
    else:
        tr, te = split_indices(full.n, spec.test_fraction, cfg.seed)
        train_ds, test = full.subset(tr), full.subset(te)
    if spec.normalizes:
        norm = Normalization.fit(train_ds.x, train_ds.y, spec.log_target)
    else:
        norm = Normalization.identity(train_ds.ndim)
    out = PreparedData(train_ds.normalized(norm), test.normalized(norm), norm, extra)
    if "excised" in extra and extra["excised"] is not None:
        out.extra["excised"] = extra["excised"].normalized(norm)
    return out


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------


def model_id(cfg: RunConfig, sizes=None) -> str:
    if cfg.model == "exact":
        return f"exact-{cfg.kernel}"
    return f"blitz-{cfg.kernel}-{'x'.join(str(s) for s in sizes)}"


def initial_hyper(cfg: RunConfig, x, y, grid_points) -> GPHyperparams:
    """Deterministic start: data-range lengthscales (EQ) or seeded spectral means (SM).

    Noise variance starts at a tenth of the target variance.
    """
    kind, q = parse_kernel_spec(cfg.kernel)
    kern = init_eq(x, y) if kind == "eq" else init_sm(x, y, grid_points, q, cfg.seed)
    var = float(np.var(y)) if y.size > 1 and np.var(y) > 0 else 1.0
    return GPHyperparams(kern, -math.log(NOISE_INIT_FRACTION * var))


def build_model(cfg: RunConfig, train_ds: Dataset, sizes=None):
    sizes = sizes or cfg.grid_sizes(train_ds.ndim)
    grid = build_grid(train_ds.x, sizes, cfg.grid_padding)
    hyper = initial_hyper(cfg, train_ds.x, train_ds.y, grid.points)
    if cfg.model == "exact":
        return ExactGP(train_ds.x, train_ds.y, hyper, max_n=cfg.exact_max_n)
    return BlitzModel(grid, hyper, optimize_grid=cfg.optimize_grid, whiten=cfg.whiten)


def fit(cfg: RunConfig, model, train_ds: Dataset) -> tuple[object, Trace, float]:
    start = time.perf_counter()
    if isinstance(model, ExactGP):
        tc = TrainConfig(iterations=cfg.exact_iterations, seed=cfg.seed, optimizer="lbfgs")
    else:
        tc = cfg.train
    model, trace = train(model, train_ds.x, train_ds.y, tc)
    return model, trace, time.perf_counter() - start


def checkpoint_doc(cfg: RunConfig, model, norm: Normalization, train_ds: Dataset, mid: str) -> dict:
    lo, hi = np.min(train_ds.x, axis=0), np.max(train_ds.x, axis=0)
    bounds = np.stack([norm.x_mean + norm.x_scale * lo, norm.x_mean + norm.x_scale * hi], axis=1)
    return {
        "schema": RUN_SCHEMA,
        "model_type": "exact" if isinstance(model, ExactGP) else "blitz",
        "model_id": mid,
        "model": model.to_dict(),
        "normalization": norm.to_dict(),
        "input_bounds": bounds.tolist(),
        "features": list(train_ds.features),
        "config": cfg.to_dict(),
    }


def load_checkpoint(path):
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise SchemaError(f"checkpoint {path} not found") from None
    if doc.get("schema") != RUN_SCHEMA:
        raise SchemaError(f"unsupported checkpoint schema {doc.get('schema')!r}")
    kind = doc.get("model_type")
    if kind == "blitz":
        model = BlitzModel.from_dict(doc["model"])
    elif kind == "exact":
        model = ExactGP.from_dict(doc["model"])
    else:
        raise SchemaError(f"unknown model_type {kind!r}")
    return model, Normalization.from_dict(doc["normalization"]), doc


# ---------------------------------------------------------------------------
# writers
# ---------------------------------------------------------------------------


def write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def write_predictions(path, x_orig, mean, latent_var, pred_var, target=None) -> None:
    x_orig = np.atleast_2d(x_orig)
    header = [f"x_{d}" for d in range(x_orig.shape[1])] + ["mean", "latent_variance", "predictive_variance"]
    if target is not None:
        header.append("target")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(x_orig.shape[0]):
            row = [repr(float(v)) for v in x_orig[i]]
            row += [repr(float(mean[i])), repr(float(latent_var[i])), repr(float(pred_var[i]))]
            if target is not None:
                row.append(repr(float(target[i])))
            w.writerow(row)


def read_predictions(path) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], np.array(rows[1:], dtype=np.float64)
    return {h: body[:, j] for j, h in enumerate(header)}


def _original_x(norm: Normalization, x) -> np.ndarray:
    return norm.x_mean + norm.x_scale * np.asarray(x)


def query_grid(bounds, per_dim: int) -> np.ndarray:
    axes = [np.linspace(lo, hi, per_dim) for lo, hi in bounds]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(axes))


# ---------------------------------------------------------------------------
# pipelines
# ---------------------------------------------------------------------------


def run_train(cfg: RunConfig) -> dict:
    """Fit, checkpoint, and evaluate on the held-out split."""
    cfg.validate()
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    data = prepare_data(cfg)
    sizes = cfg.grid_sizes(data.train.ndim)
    model = build_model(cfg, data.train, sizes)
    model, trace, fit_seconds = fit(cfg, model, data.train)
    mid = model_id(cfg, sizes)
    write_json(out / "checkpoint.json", checkpoint_doc(cfg, model, data.normalization, data.train, mid))
    trace.write_csv(out / "trace.csv")
    report = _evaluate_and_write(model, data, mid, fit_seconds, out)
    return {"model": model, "trace": trace, "report": report, "data": data}


def _evaluate_and_write(model, data: PreparedData, mid: str, fit_seconds: float, out: Path) -> EvalReport:
    start = time.perf_counter()
    mean, lvar, pvar = predict_observed(model, data.test.x)
    report = report_from_predictions(data.test.y, mean, pvar, mid, fit_seconds + time.perf_counter() - start)
    write_predictions(out / "predictions.csv", _original_x(data.normalization, data.test.x), mean, lvar, pvar, data.test.y)
    doc = report.to_dict()
    doc["fit_seconds"] = fit_seconds
    write_json(out / "report.json", doc)
    return report


def run_evaluate(cfg: RunConfig, checkpoint_path=None) -> EvalReport:
    """Re-evaluate a saved model on the held-out split its config defines."""
    cfg.validate()
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    model, norm, doc = load_checkpoint(checkpoint_path or out / "checkpoint.json")
    data = prepare_data(cfg)
    saved = doc.get("config", {})
    if saved.get("data") != cfg.to_dict()["data"] or saved.get("seed") != cfg.seed:
        raise SchemaError("checkpoint was trained on different data or a different split seed")
    if norm.to_dict() != data.normalization.to_dict():
        raise SchemaError("checkpoint normalisation does not match this config's training split")
    return _evaluate_and_write(model, data, doc.get("model_id", "model"), 0.0, out)


def run_predict(checkpoint_path, out, query=None, grid_per_dim: int = 50) -> Path:
    """Predict at ``query`` (original units) or on a regular grid over the training range."""
    model, norm, doc = load_checkpoint(checkpoint_path)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    xq = query_grid(doc["input_bounds"], grid_per_dim) if query is None else np.atleast_2d(np.asarray(query, dtype=np.float64))
    mean, lvar, pvar = predict_observed(model, norm.transform_x(xq))
    path = out / "predictions.csv"
    write_predictions(path, xq, mean, lvar, pvar)
    return path


FRONTIER_HEADER = ("grid_per_dim", "inducing_points", "wall_seconds", "final_l3", "rmse", "mean_log_likelihood")
FRONTIER_TRACE_HEADER = ("grid_per_dim", "iteration", "wall_seconds", "l3_estimate", "best_so_far")


def run_frontier(cfg: RunConfig) -> list[dict]:
    """Train one Blitzkriging model per grid size; emit runtime against held-out likelihood."""
    cfg.validate()
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    data = prepare_data(cfg)
    rows = []
    with open(out / "frontier_traces.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(FRONTIER_TRACE_HEADER)
        for s in cfg.frontier_sizes:
            sizes = [int(s)] * data.train.ndim
            sub = RunConfig(**{**cfg.__dict__, "model": "blitz", "grid": sizes})
            model = build_model(sub, data.train, sizes)
            model, trace, fit_seconds = fit(sub, model, data.train)
            report = evaluate(model, data.test, model_id(sub, sizes), fit_seconds)
            best = trace.best_so_far()
            for r, b in zip(trace.rows, best):
                w.writerow([s, r.iteration, repr(r.wall_seconds), repr(r.l3_estimate), repr(float(b))])
            rows.append(
                {
                    "grid_per_dim": int(s),
                    "inducing_points": int(np.prod(sizes)),
                    "wall_seconds": report.wall_seconds,
                    "final_l3": float(best[-1]) if best.size else float("nan"),
                    "rmse": report.rmse,
                    "mean_log_likelihood": report.mean_log_likelihood,
                }
            )
    with open(out / "frontier.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(FRONTIER_HEADER)
        for r in rows:
            w.writerow([r[h] if isinstance(r[h], int) else repr(r[h]) for h in FRONTIER_HEADER])
    return rows


def run_replicate_toy(cfg: RunConfig, tolerance: float = 0.2) -> dict:
    """In-model toy: Blitzkriging against the exact GP on the same split."""
    cfg.validate()
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    data = prepare_data(cfg)
    sizes = cfg.grid_sizes(data.train.ndim)
    reports = {}
    models = {}
    for kind in ("blitz", "exact"):
        sub = RunConfig(**{**cfg.__dict__, "model": kind})
        model = build_model(sub, data.train, sizes)
        model, trace, fit_seconds = fit(sub, model, data.train)
        mid = model_id(sub, sizes)
        reports[kind] = evaluate(model, data.test, mid, fit_seconds)
        models[kind] = model
        if kind == "blitz":
            trace.write_csv(out / "trace.csv")
            write_json(out / "checkpoint.json", checkpoint_doc(sub, model, data.normalization, data.train, mid))
    gap = reports["exact"].mean_log_likelihood - reports["blitz"].mean_log_likelihood
    doc = {
        "blitz": reports["blitz"].to_dict(),
        "exact": reports["exact"].to_dict(),
        "mean_log_likelihood_gap": gap,
        "tolerance": tolerance,
        "within_tolerance": bool(gap <= tolerance),
    }
    write_json(out / "report.json", doc)
    return {"report": doc, "models": models, "data": data}


def run_replicate_signal(cfg: RunConfig, grid_per_dim: int = 50) -> dict:
    """Square-wave extrapolation: compare RMSE inside the excised strips with held-out observed RMSE."""
    cfg.validate()
    if cfg.data.source != "square_wave":
        raise ConfigError("replicate-signal needs data.source = 'square_wave'")
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    data = prepare_data(cfg)
    sizes = cfg.grid_sizes(data.train.ndim)
    model = build_model(cfg, data.train, sizes)
    model, trace, fit_seconds = fit(cfg, model, data.train)
    mid = model_id(cfg, sizes)
    trace.write_csv(out / "trace.csv")
    write_json(out / "checkpoint.json", checkpoint_doc(cfg, model, data.normalization, data.train, mid))
    observed = evaluate(model, data.test, mid, fit_seconds)
    strips = evaluate(model, data.extra["excised"], mid, fit_seconds)
    ratio = strips.rmse / observed.rmse
    doc = {
        "observed": observed.to_dict(),
        "strips": strips.to_dict(),
        "rmse_ratio": ratio,
        "extrapolates": bool(ratio <= 2.0),
    }
    write_json(out / "report.json", doc)
    xq = query_grid([[0.0, cfg.data.blocks]] * 2, grid_per_dim)
    mean, lvar, pvar = predict_observed(model, data.normalization.transform_x(xq))
    write_predictions(out / "predictions.csv", xq, mean, lvar, pvar)
    return {"report": doc, "model": model, "trace": trace}


def strip_timing(doc):
    """Copy of a report document without wall-clock fields, for reproducibility checks."""
    if isinstance(doc, dict):
        return {k: strip_timing(v) for k, v in doc.items() if k not in TIMING_FIELDS}
    return doc
