import csv
import io
import json
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from geosharp.harness.cli import main
from geosharp.harness.config import ConfigError, ExperimentConfig, parse_config
from geosharp.harness.experiments import (
    ExperimentError, format_csv, run_diag_corr, run_orbit_trace, run_scalar_demo,
    run_sharpness_single,
)

SMALL_DIAG = dict(experiment="diag-corr", d=12, n=10, n_models=4, min_converged=2, n_iter=10,
                  restarts=1, init_scale_range=[0.3, 1.0])
SMALL_TRACE = dict(experiment="orbit-trace", N=16, D_in=5, D_out=3, budget=12, k=2,
                   alpha_grid=[0.5, 2.0], curve_alphas=[0.5], spectrum_alphas=[1.0])


def _cfg(**kw):
    return parse_config(json.dumps(kw))


def _rows(text):
    return list(csv.DictReader(io.StringIO(text)))


# ------------------------------------------------------------------ config

def test_defaults_filled():
    c = _cfg(experiment="diag-corr", seed=1)
    assert (c.d, c.n_models, c.sparsity, c.seed) == (200, 50, 0.9, 1)


def test_unknown_experiment_named():
    with pytest.raises(ConfigError, match="bogus"):
        _cfg(experiment="bogus")


@pytest.mark.parametrize("text, key", [
    ('{"experiment": "diag-corr", "colour": 1}', "colour"),
    ('{"seed": 1}', "experiment"),
    ('{"experiment": "diag-corr", "d": "200"}', "d"),
    ('{"experiment": "diag-corr", "d": 2.5}', "d"),
    ('{"experiment": "diag-corr", "horizontal": 1}', "horizontal"),
    ('{"experiment": "diag-corr", "rho": -1}', "rho"),
    ('{"experiment": "diag-corr", "seed": -3}', "seed"),
    ('{"experiment": "diag-corr", "seed": 18446744073709551616}', "seed"),
    ('{"experiment": "diag-corr", "metric": "riemann"}', "metric"),
    ('{"experiment": "orbit-trace", "budget": 10, "k": 20}', "budget"),
    ('{"experiment": "diag-corr", "lr_range": [1.0, 0.1]}', "lr_range"),
    ('{"experiment": "diag-corr", "alpha_grid": []}', "alpha_grid"),
    ('[1, 2]', "config"),
    ('{"experiment": ', "config"),
])
def test_config_errors_name_the_key(text, key):
    with pytest.raises(ConfigError, match=key):
        parse_config(text)


def test_config_rejects_bad_utf8():
    with pytest.raises(ConfigError):
        parse_config(b"\xff\xfe")


@given(seed=st.integers(0, 2**64 - 1), rho=st.floats(1e-3, 10), n_models=st.integers(1, 100),
       experiment=st.sampled_from(["diag-corr", "orbit-trace", "scalar-demo", "sharpness-single"]))
def test_config_round_trip(seed, rho, n_models, experiment):
    c = _cfg(experiment=experiment, seed=seed, rho=rho, n_models=n_models)
    assert parse_config(c.to_json()) == c


# -------------------------------------------------------------------- CSV

def test_csv_format():
    text = format_csv(["a", "b", "c"], [dict(a=1, b=0.1, c=None), dict(a=True, b=float("nan"), c="x")])
    assert text == "a,b,c\n1,0.1,\ntrue,,x\n"


# --------------------------------------------------------------- diag-corr

def test_diag_corr_small_run_and_determinism():
    cfg = _cfg(**SMALL_DIAG)
    a, b = run_diag_corr(cfg), run_diag_corr(cfg)
    assert a.files["models.csv"] == b.files["models.csv"]
    assert a.summary_json() == b.summary_json()
    rows = _rows(a.files["models.csv"])
    assert len(rows) == 4
    summary = json.loads(a.summary_json())
    assert summary["config"] == cfg.to_dict() and summary["seed"] == cfg.seed
    for tau in summary["results"]["tau"].values():
        assert -1 <= tau <= 1


def test_diag_corr_parallel_equals_serial():
    serial = run_diag_corr(_cfg(**SMALL_DIAG, jobs=1))
    parallel = run_diag_corr(_cfg(**SMALL_DIAG, jobs=3))
    assert serial.files == parallel.files
    s, p = json.loads(serial.summary_json()), json.loads(parallel.summary_json())
    s["config"].pop("jobs"), p["config"].pop("jobs")
    assert s == p


def test_diag_corr_two_models_tau_values():
    out = run_diag_corr(_cfg(**{**SMALL_DIAG, "n_models": 2}))
    for tau in json.loads(out.summary_json())["results"]["tau"].values():
        assert tau in (-1.0, 0.0, 1.0)


def test_diag_corr_too_few_converged():
    with pytest.raises(ExperimentError, match="converged"):
        run_diag_corr(_cfg(**{**SMALL_DIAG, "max_iters": 3}))


def test_diag_corr_batch_averaging_path():
    out = run_diag_corr(_cfg(**{**SMALL_DIAG, "n_batches": 2, "n_models": 2}))
    rows = _rows(out.files["models.csv"])
    assert all(r["sharpness_inv"] != "" for r in rows if r["converged"] == "true")


# ------------------------------------------------------------- orbit-trace

def test_orbit_trace_shapes_and_invariance():
    out = run_orbit_trace(_cfg(**SMALL_TRACE))
    sweep = _rows(out.files["trace_sweep.csv"])
    assert len(sweep) == 2 * 2 * 3
    curves = _rows(out.files["relerr_curves.csv"])
    for est in ("hutchinson", "hutchpp"):
        for op in ("euclidean", "riemannian"):
            mvps = [int(r["mvp"]) for r in curves if r["estimator"] == est and r["operator"] == op]
            assert mvps == list(range(1, 13))
    spectra = _rows(out.files["spectra.csv"])
    assert len(spectra) == 2 * 2 * (5 + 3)
    res = json.loads(out.summary_json())["results"]
    assert res["exact_trace_relative_range"]["riemannian"] <= 1e-6
    assert run_orbit_trace(_cfg(**SMALL_TRACE)).files == out.files


def test_orbit_trace_idx_input(tmp_path):
    g = np.random.default_rng(0)
    n = 12
    img = struct.pack(">IIII", 0x803, n, 28, 28) + g.integers(0, 256, n * 784, dtype=np.uint8).tobytes()
    lab = struct.pack(">II", 0x801, n) + bytes(g.integers(0, 10, n, dtype=np.uint8).tolist())
    (tmp_path / "img").write_bytes(img)
    (tmp_path / "lab").write_bytes(lab)
    cfg = _cfg(**{**SMALL_TRACE, "D_out": 10, "idx_images": str(tmp_path / "img"),
                  "idx_labels": str(tmp_path / "lab"), "alpha_grid": [1.0, 2.0], "spectrum_alphas": [1.0],
                  "curve_alphas": [1.0]})
    res = json.loads(run_orbit_trace(cfg).summary_json())["results"]
    assert res["D_in"] == 784 and res["N"] == 12


# ------------------------------------------------------------- scalar-demo

def _grid(out, name):
    return {(round(float(r["theta1"]), 9), round(float(r["theta2"]), 9)): r
            for r in _rows(out.files[f"grids/{name}.csv"])}


def test_scalar_demo_grids():
    cfg = _cfg(experiment="scalar-demo", x=[1.0, 0.5], y=[0.3, -0.2])
    out = run_scalar_demo(cfg)
    assert len(out.files) == 5
    for name in ("loss", "riemannian_grad_norm", "euclidean_hessian_trace"):
        g = _grid(out, name)
        assert len(g) == 41 * 41
        norm = [float(r["normalized"]) for r in g.values() if r["normalized"]]
        assert min(norm) == 0.0 and max(norm) == 1.0
        assert g[(0.0, 1.0)]["value"] == "" and g[(1.0, 0.0)]["normalized"] == ""

    rg = _grid(out, "riemannian_grad_norm")
    vals = np.array([float(rg[k]["value"]) for k in [(0.5, 2.0), (1.0, 1.0), (2.0, 0.5), (-0.5, -2.0)]])
    assert (vals.max() - vals.min()) / vals.mean() <= 1e-8

    et = _grid(out, "euclidean_hessian_trace")
    x = np.array(cfg.x)
    for (t1, t2), r in et.items():
        if r["value"]:
            assert float(r["value"]) == pytest.approx(np.sum(2 * x**2) * (t1**2 + t2**2), rel=1e-12)

    loss = _grid(out, "loss")
    assert float(loss[(0.5, 1.0)]["value"]) == pytest.approx(float(loss[(1.0, 0.5)]["value"]), rel=1e-12)
    assert float(loss[(0.4, 1.5)]["value"]) == pytest.approx(float(loss[(1.2, 0.5)]["value"]), rel=1e-12)


# --------------------------------------------------------- sharpness-single

@pytest.mark.parametrize("extra", [dict(model="scalar"), dict(model="matrix", N=16, D_in=4, D_out=3),
                                   dict(model="diagonal", d=10, n=8, lr_range=[0.5, 0.5],
                                        init_scale=0.5, metric="mix")])
def test_sharpness_single(extra):
    out = run_sharpness_single(_cfg(experiment="sharpness-single", n_iter=10, restarts=1, **extra))
    res = json.loads(out.summary_json())["results"]
    assert res["adaptive"] >= 0 and res["geodesic"] >= 0


# --------------------------------------------------------------------- CLI

def _write(tmp_path, obj, name="c.json"):
    p = tmp_path / name
    p.write_text(obj if isinstance(obj, str) else json.dumps(obj))
    return str(p)


def test_cli_validate(tmp_path, capsys):
    assert main(["validate", "--config", _write(tmp_path, {"experiment": "scalar-demo"})]) == 0
    assert json.loads(capsys.readouterr().out)["grid_size"] == 41


def test_cli_config_errors(tmp_path):
    assert main(["validate", "--config", _write(tmp_path, {"experiment": "x"})]) == 2
    assert main(["run", "--config", _write(tmp_path, "{not json")]) == 2
    assert main(["run", "--config", str(tmp_path / "missing.json")]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["run", "--config", _write(tmp_path, {"experiment": "scalar-demo"}), "--seed", "-1"])
    assert exc.value.code == 2


def test_cli_run_writes_artifacts_and_overrides(tmp_path):
    cfg = _write(tmp_path, {"experiment": "scalar-demo", "grid_size": 5})
    out = tmp_path / "out"
    assert main(["run", "--config", cfg, "--out", str(out), "--seed", "77"]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["seed"] == 77 and summary["config"]["output_dir"] == str(out)
    assert (out / "grids" / "loss.csv").read_text().startswith("theta1,theta2,value,normalized\n")


def test_cli_run_byte_identical(tmp_path):
    cfg = _write(tmp_path, SMALL_TRACE)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--config", cfg, "--out", str(a)]) == 0
    assert main(["run", "--config", cfg, "--out", str(b)]) == 0
    for name in ("trace_sweep.csv", "relerr_curves.csv", "spectra.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_cli_experiment_failure_exit_code(tmp_path):
    cfg = _write(tmp_path, {**SMALL_DIAG, "max_iters": 3})
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "o")]) == 3
