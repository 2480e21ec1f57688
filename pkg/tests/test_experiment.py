"""Sweep orchestration: plan parsing, row assembly, rate fits, CSV output."""

import copy
import json
import math
import os

import numpy as np
import pytest
from hypothesis import given, strategies as st

from chaoslab.core import ConfigError
from chaoslab.experiment import (
    RunResult,
    _fmt,
    fit_rate,
    load_plan,
    plan_from_dict,
    run_experiment,
    write_result,
)


def make_plan_dict():
    return {
        "label": "toy",
        "base": {
            "domain": {"kind": "euclidean", "dim": 1},
            "drift": {"name": "linear_pair", "params": {}},
            "n_particles": 4,
            "grid": {"t0": 0.0, "dt": 0.005, "steps": 20},
            "noise": {"kind": "brownian"},
            "initial_law": {"name": "gaussian", "params": {"mean": [0.2], "sigma": 0.5}},
            "seed": 97,
            "replicas": 400,
        },
        "sweep": {"n": [4, 6], "k": [1, 2], "t": [0.05, 0.1]},
        "estimators": ["girsanov", "knn", "histogram_tv"],
        "picard": {"m": 300, "iters": 2},
        "knn": {"neighbors": 4, "samples": 300},
        "tv": {"bins": 8},
        "bounds": {"C0": 0.05, "gamma": 1.0, "M": 1.0, "kappa": 1.0},
    }


class TestFitRate:
    def test_exact_inverse_square(self):
        pts = [(n, 3.0 / n**2) for n in (16, 32, 64, 128)]
        fit = fit_rate(pts)
        assert abs(fit.slope + 2.0) < 1e-9
        assert abs(fit.intercept - math.log(3.0)) < 1e-9
        assert fit.r_squared > 1.0 - 1e-12
        assert fit.n_points == 4 and fit.n_excluded == 0
        assert not fit.no_trend

    def test_exact_linear_growth(self):
        fit = fit_rate([(k, k / 50.0) for k in (1, 2, 4, 8)], axis="k")
        assert abs(fit.slope - 1.0) < 1e-9
        assert fit.axis == "k"

    def test_nonpositive_points_excluded(self):
        pts = [(16, 1.0), (32, 0.25), (64, 0.0625), (128, -0.01), (256, 0.0)]
        fit = fit_rate(pts)
        assert fit.n_points == 3 and fit.n_excluded == 2
        assert abs(fit.slope + 2.0) < 1e-9

    def test_too_few_usable_points(self):
        with pytest.raises(ValueError, match="need >= 3 usable points, have 1 \\(3 excluded\\)"):
            fit_rate([(16, 1.0), (32, -1.0), (64, 0.0), (128, math.nan)])

    def test_constant_input_flags_no_trend(self):
        fit = fit_rate([(n, 0.7) for n in (2, 4, 8)])
        assert fit.no_trend
        assert fit.slope == 0.0
        assert fit.r_squared == 0.0
        assert math.isclose(fit.intercept, math.log(0.7), rel_tol=1e-12)

    @given(
        st.floats(-3.0, 3.0),
        st.floats(0.1, 10.0),
    )
    def test_recovers_power_law(self, slope, amp):
        pts = [(float(2**j), amp * float(2**j) ** slope) for j in range(5)]
        fit = fit_rate(pts)
        assert abs(fit.slope - slope) < 1e-9
        assert abs(fit.intercept - math.log(amp)) < 1e-9


class TestPlanParsing:
    def test_round_trip_and_defaults(self):
        plan = plan_from_dict(
            {"base": make_plan_dict()["base"], "sweep": {"n": [4]}}
        )
        assert plan.sweep_n == (4,)
        assert plan.sweep_k == (1,)
        assert plan.sweep_t == (plan.base.grid.terminal,)
        assert plan.estimators == ("girsanov",)
        assert (plan.picard_m, plan.picard_iters) == (10_000, 3)
        assert (plan.knn_neighbors, plan.knn_samples) == (4, 10_000)
        assert plan.tv_bins == 32
        assert (plan.bound_c0, plan.bound_gamma, plan.bound_m, plan.kappa) == (0.05, 1.0, 1.0, 1.0)
        assert plan.label == "run"

    def test_full_dict_parsed(self):
        plan = plan_from_dict(make_plan_dict())
        assert plan.label == "toy"
        assert plan.sweep_n == (4, 6)
        assert plan.sweep_k == (1, 2)
        assert plan.sweep_t == (0.05, 0.1)
        assert plan.estimators == ("girsanov", "knn", "histogram_tv")
        assert plan.picard_m == 300

    def test_input_dict_not_mutated(self):
        data = make_plan_dict()
        snapshot = copy.deepcopy(data)
        plan_from_dict(data)
        assert data == snapshot

    @pytest.mark.parametrize(
        "mutate,message",
        [
            (lambda d: d.__setitem__("extra", 1), "unknown plan keys"),
            (lambda d: d["sweep"].__setitem__("m", [1]), "unknown sweep keys"),
            (lambda d: d["picard"].__setitem__("tol", 0.1), "unknown picard keys"),
            (lambda d: d["knn"].__setitem__("metric", "l2"), "unknown knn keys"),
            (lambda d: d["tv"].__setitem__("range", 2), "unknown tv keys"),
            (lambda d: d["bounds"].__setitem__("alpha", 0.0), "unknown bounds keys"),
            (lambda d: d.__setitem__("estimators", ["girsanov", "mine"]), "unknown estimator"),
            (lambda d: d["sweep"].__setitem__("k", [5]), "exceeds the smallest"),
            (lambda d: d["sweep"].__setitem__("k", [0]), "k must be >= 1"),
            (lambda d: d["sweep"].__setitem__("n", [1]), "n must be >= 2"),
            (lambda d: d["sweep"].__setitem__("t", [0.033]), "not a grid point"),
            (lambda d: d["sweep"].__setitem__("t", []), "sweep_t must not be empty"),
            (lambda d: d["picard"].__setitem__("m", 50), "picard_m"),
            (lambda d: d["picard"].__setitem__("iters", 0), "picard_iters"),
        ],
    )
    def test_fail_closed(self, mutate, message):
        data = make_plan_dict()
        mutate(data)
        with pytest.raises(ConfigError, match=message):
            plan_from_dict(data)

    def test_load_plan_file(self, tmp_path):
        path = tmp_path / "plan.json"
        path.write_text(json.dumps(make_plan_dict()))
        plan = load_plan(str(path))
        assert plan.label == "toy"
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        with pytest.raises(ConfigError, match="invalid JSON"):
            load_plan(str(bad))


@pytest.mark.filterwarnings("ignore:only \\d+ replicas")
class TestRunExperiment:
    def test_row_assembly(self):
        plan = plan_from_dict(make_plan_dict())
        result = run_experiment(plan)
        # per n: 2 t x 2 k x 3 estimators (d=1 keeps every k under the TV
        # dimension cap)
        assert len(result.entropy_rows) == 2 * 12
        assert len(result.bound_rows) == 2 * 4
        assert len(result.horizon_rows) == 2
        # per n: martingale per t, pinsker+subadditivity only at k=1 (the
        # k=2 histogram is too sparse for 300 samples at 8^2 bins)
        per_n = [r for r in result.check_rows if r["n"] == 4]
        assert sum(r["check"] == "martingale" for r in per_n) == 2
        assert sum(r["check"] == "pinsker" for r in per_n) == 2
        assert sum(r["check"] == "subadditivity" for r in per_n) == 2
        assert {r["k"] for r in per_n if r["check"] == "pinsker"} == {1}
        assert not result.errors and not result.any_blowup

    def test_row_schema_and_order(self):
        plan = plan_from_dict(make_plan_dict())
        result = run_experiment(plan)
        row = result.entropy_rows[0]
        assert set(row) == {"t", "n", "k", "estimator", "value", "stderr",
                            "ess", "eps", "dt", "seed"}
        keys = [(r["t"], r["n"], r["k"], r["estimator"]) for r in result.entropy_rows]
        assert keys == sorted(keys)
        bkeys = [(r["n"], r["k"], r["t"]) for r in result.bound_rows]
        assert bkeys == sorted(bkeys)
        for r in result.bound_rows:
            assert r["closed_form"] >= r["cascade"]

    def test_manifest_contents(self):
        plan = plan_from_dict(make_plan_dict())
        result = run_experiment(plan)
        man = result.manifest
        assert man["label"] == "toy"
        assert man["sweep"] == {"n": [4, 6], "k": [1, 2], "t": [0.05, 0.1]}
        assert set(man["points"]) == {"4", "6"}
        assert man["points"]["4"]["picard_residuals"]
        assert man["row_counts"]["entropy"] == len(result.entropy_rows)
        assert man["errors"] == []

    def test_thread_count_does_not_change_rows(self):
        plan = plan_from_dict(make_plan_dict())
        a = run_experiment(plan, threads=1)
        b = run_experiment(plan, threads=3)
        assert a.entropy_rows == b.entropy_rows
        assert a.bound_rows == b.bound_rows
        assert a.horizon_rows == b.horizon_rows
        assert a.check_rows == b.check_rows
        assert a.manifest == b.manifest

    @pytest.mark.filterwarnings("ignore:overflow encountered")
    def test_blowup_point_isolated(self):
        data = make_plan_dict()
        # per-step growth factor ~5e27 overflows the state within 20 steps
        data["base"]["drift"] = {"name": "restoring_b0", "params": {"rate": -1e30}}
        data["estimators"] = ["girsanov"]
        data["sweep"] = {"n": [4, 6], "k": [1], "t": [0.1]}
        plan = plan_from_dict(data)
        result = run_experiment(plan)
        assert result.any_blowup
        assert {e["n"] for e in result.errors} == {4, 6}
        assert all(e["kind"] == "blowup" for e in result.errors)
        assert "non-finite" in result.errors[0]["error"]
        assert result.entropy_rows == []
        assert result.manifest["errors"] == result.errors


class TestCsvOutput:
    def test_float_formatting_round_trips(self):
        assert _fmt(True) == "true" and _fmt(False) == "false"
        assert _fmt(np.float64(0.1)) == repr(0.1)
        assert _fmt(np.int64(7)) == "7"
        assert _fmt("girsanov") == "girsanov"

    @given(st.floats(allow_nan=False, allow_infinity=False))
    def test_repr_is_lossless(self, x):
        assert float(_fmt(x)) == x

    def test_write_result_files_and_headers(self, tmp_path):
        result = RunResult()
        result.manifest = {"label": "empty"}
        paths = write_result(result, str(tmp_path))
        assert set(paths) == {"entropy.csv", "bounds.csv", "horizons.csv",
                              "checks.csv", "manifest.json"}
        header = open(paths["entropy.csv"]).read().splitlines()
        assert header == ["t,n,k,estimator,value,stderr,ess,eps,dt,seed"]
        header = open(paths["checks.csv"]).read().splitlines()
        assert header == ["n,k,t,check,passed,margin,value,threshold"]
        man = json.loads(open(paths["manifest.json"]).read())
        assert man == {"label": "empty"}

    @pytest.mark.filterwarnings("ignore:only \\d+ replicas")
    def test_written_bytes_deterministic(self, tmp_path):
        plan = plan_from_dict(make_plan_dict())
        result = run_experiment(plan)
        pa = write_result(result, str(tmp_path / "a"))
        pb = write_result(run_experiment(plan, threads=2), str(tmp_path / "b"))
        for name in pa:
            ba = open(pa[name], "rb").read()
            bb = open(pb[name], "rb").read()
            assert ba == bb, name
