"""Experiment runners producing plot-ready CSV text and a JSON summary.

Every random draw comes from a stream derived from ``(seed, path)``, so the
artifacts depend on the config alone. Per-model work in ``diag-corr`` can be
spread over processes without changing a byte of output.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .. import __version__
from ..geometry import (
    INV, MetricKind, OrbitCurve, TangentPair, metric_norm, orbit_point, riemannian_gradient,
)
from ..models import (
    ClassificationBatch, DivergenceError, MatrixNetParams, RegressionData, ScalarParams,
    generate_classification_batch, generate_sparse_regression, load_idx, matrixnet_to_pair,
    pair_to_matrixnet, scalar_euclidean_grad, scalar_euclidean_hessian, scalar_loss,
    scalar_riemannian_hessian_trace, scalar_to_pair, train_diagonal,
)
from ..numerics import SeededRng, kendall_tau, sample_gl_matrix
from ..sharpness import (
    DiagonalObjective, MatrixNetObjective, ScalarObjective, SharpnessConfig,
    adaptive_sharpness_worst, batch_mean_sharpness, geodesic_sharpness_worst,
)
from ..trace import (
    exact_trace, hutchinson, hutchpp, matrixnet_operators, operator_spectrum, orbit_trace_sweep,
)
from .config import ExperimentConfig

__all__ = [
    "ExperimentError", "RunArtifacts", "run_experiment", "run_diag_corr", "run_orbit_trace",
    "run_scalar_demo", "run_sharpness_single", "format_csv",
]


class ExperimentError(RuntimeError):
    """The experiment ran but could not produce a valid result."""


# ------------------------------------------------------------------ artifacts

def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "" if not math.isfinite(v) else repr(v)
    return str(v)


def format_csv(header, rows) -> str:
    """CSV text with a header row, ``\\n`` line endings and ``repr`` floats."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_cell(r[k]) for k in header])
    return buf.getvalue()


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else None
    return v


@dataclass
class RunArtifacts:
    """Summary dictionary plus CSV files keyed by relative path."""

    summary: dict
    files: dict = field(default_factory=dict)

    def summary_json(self) -> str:
        return json.dumps(_jsonable(self.summary), indent=2, sort_keys=True) + "\n"

    def write(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        for rel, text in {**self.files, "summary.json": self.summary_json()}.items():
            path = os.path.join(out_dir, rel)
            os.makedirs(os.path.dirname(path), exist_ok=True)
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)


def _summary(cfg: ExperimentConfig, **results):
    return dict(experiment=cfg.experiment, version=__version__, seed=cfg.seed,
                config=cfg.to_dict(), results=results)


# ---------------------------------------------------------------- diag-corr

def _log_uniform(g, lo, hi):
    return float(np.exp(g.uniform(np.log(lo), np.log(hi))))


def _batches(data: RegressionData, n_batches):
    if n_batches == 1:
        return [DiagonalObjective(data)]
    parts = np.array_split(np.arange(data.X.shape[0]), n_batches)
    return [DiagonalObjective(RegressionData(data.X[p], data.y[p], data.beta_star)) for p in parts]


def _sharpness_suite(cfg: ExperimentConfig, objectives, params, rng: SeededRng):
    base = SharpnessConfig(rho=cfg.rho, n_iter=cfg.n_iter, restarts=cfg.restarts)
    out = {}
    out["adaptive"] = batch_mean_sharpness(adaptive_sharpness_worst, objectives, params,
                                           config=base, rng=rng.derive(0))
    for j, kind in enumerate(("inv", "mix"), start=1):
        sc = replace(base, metric=MetricKind(kind, epsilon=cfg.epsilon), geodesic=cfg.geodesic,
                     horizontal=cfg.horizontal)
        out[kind] = batch_mean_sharpness(geodesic_sharpness_worst, objectives, params, config=sc,
                                         rng=rng.derive(j))
    return out


def _diag_model(task):
    """Train and measure one model; everything it needs travels in ``task``."""
    cfg, data, X_test, y_test, lam, i = task
    r = SeededRng(cfg.seed).derive(2).derive(i)
    g = r.generator
    lr_rel = _log_uniform(g, *cfg.lr_range)
    scale = cfg.resolved_init_scale() * _log_uniform(g, *cfg.init_scale_range)
    row = dict(model=i, lr=lr_rel / lam, lr_relative=lr_rel, init_scale=scale, converged=False,
               diverged=False, iterations=None, train_loss=None, test_loss=None,
               sharpness_adaptive=None, sharpness_inv=None, sharpness_mix=None)
    try:
        params, trace = train_diagonal(data, lr_rel / lam, scale, cfg.tol, cfg.max_iters, r.derive(0),
                                       log_every=0)
    except DivergenceError:
        row["diverged"] = True
        return row
    row.update(converged=trace.converged, iterations=trace.iterations, train_loss=trace.final_loss)
    row["test_loss"] = float(np.mean((X_test @ params.beta - y_test) ** 2))
    if not trace.converged:
        return row
    s = _sharpness_suite(cfg, _batches(data, cfg.n_batches), params, r.derive(1))
    row.update(sharpness_adaptive=s["adaptive"], sharpness_inv=s["inv"], sharpness_mix=s["mix"])
    return row


def _map(fn, tasks, jobs):
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as ex:
        return list(ex.map(fn, tasks))


_MODEL_COLUMNS = ["model", "lr", "lr_relative", "init_scale", "converged", "diverged", "iterations",
                  "train_loss", "test_loss", "sharpness_adaptive", "sharpness_inv", "sharpness_mix"]


def run_diag_corr(cfg: ExperimentConfig) -> RunArtifacts:
    """Train diagonal nets, measure sharpness, and rank-correlate it with test loss."""
    rng = SeededRng(cfg.seed)
    data = generate_sparse_regression(cfg.n, cfg.d, cfg.sparsity, cfg.noise, rng.derive(0))
    g = rng.derive(1).generator
    X_test = g.standard_normal((cfg.test_factor * cfg.n, cfg.d))
    y_test = X_test @ data.beta_star
    if cfg.noise:
        y_test = y_test + cfg.noise * g.standard_normal(y_test.shape[0])
    lam = float(np.linalg.eigvalsh(data.X.T @ data.X)[-1])
    tasks = [(cfg, data, X_test, y_test, lam, i) for i in range(cfg.n_models)]
    rows = _map(_diag_model, tasks, cfg.jobs)

    kept = [r for r in rows if r["converged"]]
    needed = min(cfg.min_converged, cfg.n_models)
    if len(kept) < max(needed, 2):
        raise ExperimentError(f"only {len(kept)} of {cfg.n_models} models converged "
                              f"(need {max(needed, 2)})")
    test = [r["test_loss"] for r in kept]
    tau = {k: kendall_tau([r[f"sharpness_{k}"] for r in kept], test)
           for k in ("adaptive", "inv", "mix")}
    results = dict(
        tau=tau,
        n_converged=len(kept),
        dropped=[r["model"] for r in rows if not r["converged"]],
        lambda_max_XtX=lam,
        ordering_holds=abs(tau["inv"]) >= abs(tau["adaptive"]) and abs(tau["mix"]) >= abs(tau["adaptive"]),
    )
    return RunArtifacts(_summary(cfg, **results), {"models.csv": format_csv(_MODEL_COLUMNS, rows)})


# -------------------------------------------------------------- orbit-trace

def _trace_setup(cfg: ExperimentConfig, rng: SeededRng):
    if cfg.idx_images is not None:
        images, labels = load_idx(cfg.idx_images), load_idx(cfg.idx_labels)
        if images.shape[0] != labels.shape[0]:
            raise ExperimentError("image and label files have different sample counts")
        N = min(cfg.N, images.shape[0])
        n_classes = max(cfg.D_out, int(labels[:N].max()) + 1)
        batch = ClassificationBatch(images[:N], labels[:N], n_classes)
    else:
        batch = generate_classification_batch(cfg.N, cfg.D_in, cfg.D_out, rng.derive(0))
    D_in, D_out = batch.inputs.shape[1], batch.n_classes
    g = rng.derive(1).generator
    params = MatrixNetParams(cfg.weight_scale * g.standard_normal((cfg.h, D_in)) / np.sqrt(D_in),
                             cfg.weight_scale * g.standard_normal((D_out, cfg.h)) / np.sqrt(cfg.h))
    A = sample_gl_matrix(cfg.h, rng.derive(2))
    return batch, params, A


def _relative_range(values):
    values = np.asarray(values, dtype=float)
    return float((values.max() - values.min()) / abs(values.mean()))


def run_orbit_trace(cfg: ExperimentConfig) -> RunArtifacts:
    """Hessian traces, estimator error curves and spectra along a GL(h) orbit."""
    rng = SeededRng(cfg.seed)
    batch, params, A = _trace_setup(cfg, rng)
    sweep = orbit_trace_sweep(params, batch, A, cfg.alpha_grid, budget=cfg.budget, k=cfg.k,
                              rng=rng.derive(3))
    files = {"trace_sweep.csv": format_csv(
        ["alpha", "operator", "estimator", "mean", "std", "mean_std", "exact", "mvp_count"], sweep)}

    curve = OrbitCurve(matrixnet_to_pair(params), A)
    curves = []
    final_err = {}
    for ia, alpha in enumerate(cfg.curve_alphas):
        p = pair_to_matrixnet(orbit_point(curve, alpha))
        for io, (name, op) in enumerate(zip(("euclidean", "riemannian"), matrixnet_operators(p, batch))):
            exact = exact_trace(op)
            for ie, est in enumerate(("hutchinson", "hutchpp")):
                sub = rng.derive(4).derive(ia).derive(io).derive(ie)
                r = hutchinson(op, cfg.budget, sub) if est == "hutchinson" else hutchpp(op, cfg.k, cfg.budget, sub)
                for m, value in enumerate(r.running, start=1):
                    err = abs(value - exact) / abs(exact) if np.isfinite(value) else None
                    curves.append(dict(alpha=float(alpha), operator=name, estimator=est, mvp=m,
                                       estimate=value, exact=exact, relative_error=err))
                final_err[f"{name}/{est}/alpha={alpha!r}"] = abs(r.mean - exact) / abs(exact)
    files["relerr_curves.csv"] = format_csv(
        ["alpha", "operator", "estimator", "mvp", "estimate", "exact", "relative_error"], curves)

    spectra = []
    max_imag = {}
    for alpha in cfg.spectrum_alphas:
        p = pair_to_matrixnet(orbit_point(curve, alpha))
        for name, op in zip(("euclidean", "riemannian"), matrixnet_operators(p, batch)):
            s = operator_spectrum(op)
            max_imag[f"{name}/alpha={alpha!r}"] = s.max_imag
            spectra.extend(dict(alpha=float(alpha), operator=name, index=i, eigenvalue=ev)
                           for i, ev in enumerate(s.eigenvalues))
    files["spectra.csv"] = format_csv(["alpha", "operator", "index", "eigenvalue"], spectra)

    exact_rows = [r for r in sweep if r["estimator"] == "exact"]
    ranges = {name: _relative_range([r["exact"] for r in exact_rows if r["operator"] == name])
              for name in ("euclidean", "riemannian")}
    results = dict(
        D_in=int(batch.inputs.shape[1]), D_out=int(batch.n_classes), N=int(batch.inputs.shape[0]),
        A=A.tolist(),
        exact_trace_relative_range=ranges,
        riemannian_constant=ranges["riemannian"] <= 1e-6,
        final_relative_error=final_err,
        spectrum_max_imag=max_imag,
    )
    return RunArtifacts(_summary(cfg, **results), files)


# -------------------------------------------------------------- scalar-demo

_GRIDS = ("loss", "euclidean_grad_norm", "riemannian_grad_norm", "euclidean_hessian_trace",
          "riemannian_hessian_trace")


def _scalar_quantities(t1, t2, x, y):
    p = ScalarParams(t1, t2)
    eg = scalar_euclidean_grad(p, x, y)  # (θ2, θ1) ordering
    pair = scalar_to_pair(p)
    rg = riemannian_gradient(INV, pair, TangentPair([[eg[0]]], [[eg[1]]]))
    return dict(
        loss=scalar_loss(p, x, y),
        euclidean_grad_norm=float(np.linalg.norm(eg)),
        riemannian_grad_norm=metric_norm(INV, pair, rg),
        euclidean_hessian_trace=float(np.trace(scalar_euclidean_hessian(p, x, y))),
        riemannian_hessian_trace=scalar_riemannian_hessian_trace(p, x, y),
    )


def _normalize(values):
    v = np.asarray(values, dtype=float)
    ok = np.isfinite(v)
    out = np.full_like(v, np.nan)
    if ok.any():
        lo, hi = v[ok].min(), v[ok].max()
        out[ok] = (v[ok] - lo) / (hi - lo) if hi > lo else 0.0
    return out


def run_scalar_demo(cfg: ExperimentConfig) -> RunArtifacts:
    """Grids of landscape quantities over ``(θ1, θ2)``, raw and scaled to [0, 1].

    Cells on the axes (a zero parameter) lie outside the quotient domain and
    are left empty in every grid.
    """
    axis = np.linspace(cfg.grid_min, cfg.grid_max, cfg.grid_size)
    x, y = np.asarray(cfg.x), np.asarray(cfg.y)
    cells = []
    for t1 in axis:
        for t2 in axis:
            if t1 == 0.0 or t2 == 0.0:
                cells.append((t1, t2, {k: np.nan for k in _GRIDS}))
            else:
                cells.append((t1, t2, _scalar_quantities(float(t1), float(t2), x, y)))
    files = {}
    ranges = {}
    for name in _GRIDS:
        raw = np.array([c[2][name] for c in cells])
        norm = _normalize(raw)
        ok = np.isfinite(raw)
        ranges[name] = [float(raw[ok].min()), float(raw[ok].max())] if ok.any() else None
        rows = [dict(theta1=float(c[0]), theta2=float(c[1]), value=raw[i], normalized=norm[i])
                for i, c in enumerate(cells)]
        files[f"grids/{name}.csv"] = format_csv(["theta1", "theta2", "value", "normalized"], rows)
    results = dict(grid_axis=axis.tolist(), raw_ranges=ranges,
                   missing_cells=int(sum(1 for c in cells if c[0] == 0.0 or c[1] == 0.0)))
    return RunArtifacts(_summary(cfg, **results), files)


# --------------------------------------------------------- sharpness-single

def run_sharpness_single(cfg: ExperimentConfig) -> RunArtifacts:
    """Adaptive and geodesic sharpness of one model under the configured metric."""
    rng = SeededRng(cfg.seed)
    sc = SharpnessConfig(rho=cfg.rho, n_iter=cfg.n_iter, restarts=cfg.restarts,
                         metric=MetricKind(cfg.metric, epsilon=cfg.epsilon), geodesic=cfg.geodesic,
                         horizontal=cfg.horizontal)
    extra = {}
    if cfg.model == "diagonal":
        data = generate_sparse_regression(cfg.n, cfg.d, cfg.sparsity, cfg.noise, rng.derive(0))
        lam = float(np.linalg.eigvalsh(data.X.T @ data.X)[-1])
        lr = cfg.lr_range[0] / lam
        try:
            params, trace = train_diagonal(data, lr, cfg.resolved_init_scale(), cfg.tol,
                                           cfg.max_iters, rng.derive(1), log_every=0)
        except DivergenceError as exc:
            raise ExperimentError(f"training diverged: {exc}") from exc
        extra = dict(converged=trace.converged, iterations=trace.iterations, train_loss=trace.final_loss)
        objectives = _batches(data, cfg.n_batches)
    elif cfg.model == "scalar":
        params = ScalarParams(*cfg.theta)
        objectives = [ScalarObjective(cfg.x, cfg.y)]
    else:
        batch = generate_classification_batch(cfg.N, cfg.D_in, cfg.D_out, rng.derive(0))
        g = rng.derive(1).generator
        params = MatrixNetParams(g.standard_normal((cfg.h, cfg.D_in)) / np.sqrt(cfg.D_in),
                                 g.standard_normal((cfg.D_out, cfg.h)) / np.sqrt(cfg.h))
        objectives = [MatrixNetObjective(batch)]
    adaptive = batch_mean_sharpness(adaptive_sharpness_worst, objectives, params, config=sc,
                                    rng=rng.derive(2))
    geodesic = batch_mean_sharpness(geodesic_sharpness_worst, objectives, params, config=sc,
                                    rng=rng.derive(3))
    return RunArtifacts(_summary(cfg, adaptive=adaptive, geodesic=geodesic, **extra))


_RUNNERS = {
    "diag-corr": run_diag_corr,
    "orbit-trace": run_orbit_trace,
    "scalar-demo": run_scalar_demo,
    "sharpness-single": run_sharpness_single,
}


def run_experiment(cfg: ExperimentConfig) -> RunArtifacts:
    return _RUNNERS[cfg.experiment](cfg)
