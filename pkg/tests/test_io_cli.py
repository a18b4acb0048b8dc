import json

import numpy as np
import pytest

from msprior import cli, io
from msprior.core import InducedMarginalEstimate, MarginalTargetPrior
from msprior.ctab import TableShape, induced_dirichlet_margin, noninformative_prior
from msprior.errors import ConfigError, ParameterError


def write_config(path, cfg):
    path.write_text(json.dumps(cfg))
    return path


def run(tmp_path, command, cfg, out="out", extra=(), capsys=None):
    cpath = write_config(tmp_path / f"{command}.json", cfg)
    code = cli.main([command, "--config", str(cpath), "--out", str(tmp_path / out), *extra])
    err = capsys.readouterr().err if capsys is not None else ""
    return code, err


def manifest(tmp_path, out="out"):
    return json.loads((tmp_path / out / "manifest.json").read_text())


# file formats -----------------------------------------------------------

def test_matrix_roundtrip_exact(tmp_path):
    x = np.random.default_rng(0).normal(size=(50, 3)) * np.array([1e-300, 1.0, 1e300])
    io.write_matrix(tmp_path / "x.csv", ["a", "b", "c"], x)
    header, y = io.read_matrix(tmp_path / "x.csv")
    assert header == ["a", "b", "c"]
    np.testing.assert_array_equal(x, y)


def test_read_matrix_rejects_text(tmp_path):
    (tmp_path / "x.csv").write_text("a,b\n1,zz\n")
    with pytest.raises(ParameterError):
        io.read_matrix(tmp_path / "x.csv")


def test_count_table_any_order_missing_cells(tmp_path):
    (tmp_path / "t.csv").write_text("v1,v2,count\n2,3,4\n1,1,2\n2,1,7\n")
    counts, shape = io.load_count_table(tmp_path / "t.csv")
    assert shape.d == (2, 3)
    np.testing.assert_array_equal(counts.counts, [2, 0, 0, 7, 0, 4])
    counts, shape = io.load_count_table(tmp_path / "t.csv", [2, 4])
    assert counts.counts.size == 8


@pytest.mark.parametrize("body", [
    "v1,v2,n\n1,1,2\n",
    "v1,v2,count\n0,1,2\n",
    "v1,v2,count\n1,1,-2\n",
    "v1,v2,count\n1,1,2.5\n",
])
def test_count_table_errors(tmp_path, body):
    (tmp_path / "t.csv").write_text(body)
    with pytest.raises(ParameterError):
        io.load_count_table(tmp_path / "t.csv")


def test_cell_table_roundtrip(tmp_path):
    s = TableShape([2, 3, 2])
    f = np.random.default_rng(1).dirichlet(np.ones(12))
    io.write_table(tmp_path / "f.csv", s, f)
    g, s2 = io.load_table(tmp_path / "f.csv")
    assert s2 == s
    np.testing.assert_array_equal(f, g)


def test_json_roundtrips(tmp_path):
    p1 = MarginalTargetPrior([
        {"family": "normal", "coords": [0], "params": {"mean": [0.1], "sd": [2.0]}},
        {"family": "inverse-gamma", "coords": [1], "params": {"shape": [3.0], "scale": [1.5]}},
    ])
    io.write_json(tmp_path / "p1.json", p1.to_dict())
    q = MarginalTargetPrior.from_dict(io.read_json(tmp_path / "p1.json"))
    for th in ([0.0, 1.0], [2.5, 0.3]):
        assert q.logpdf(np.array(th)) == p1.logpdf(np.array(th))
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError):
        io.read_json(tmp_path / "bad.json")


def test_bundled_old_faithful():
    d = io.load_old_faithful()
    assert d.y.shape == (272, 2)
    assert 1.5 < d.y[:, 0].min() and d.y[:, 1].max() < 100


def test_config_hash_is_order_free():
    assert io.config_hash({"a": 1, "b": [1, 2]}) == io.config_hash({"b": [1, 2], "a": 1})
    assert io.config_hash({"a": 1}) != io.config_hash({"a": 2})


# fit --------------------------------------------------------------------

DPMM = {
    "model": "dpmm",
    "prior": "noninformative",
    "data": "bundled:old_faithful",
    "split": {"prior_size": 30, "observed_size": 30},
    "seed": 7,
    "S": 200,
    "chain": {"iterations": 200, "thin": 2},
    "grid": {"size": 20},
}


def test_fit_dpmm_artifacts(tmp_path, capsys):
    code, err = run(tmp_path, "fit", DPMM, capsys=capsys)
    assert code == 0, err
    m = manifest(tmp_path)
    assert set(m["artifacts"]) >= {"theta_samples.csv", "predictive_marginals.csv", "predictive_grid.csv",
                                   "hyper.json"}
    assert m["seed"] == 7 and m["n_saved"] == 90
    assert set(m["ess"]) == {"m1", "m2", "v1", "v2"}
    header, th = io.read_matrix(tmp_path / "out" / "theta_samples.csv")
    assert header == ["m1", "m2", "v1", "v2"] and th.shape == (90, 4)
    _, grid = io.read_matrix(tmp_path / "out" / "predictive_grid.csv")
    assert grid.shape == (400, 3)
    assert not list(tmp_path.glob(".out.stage-*"))


@pytest.mark.slow
def test_fit_dpmm_full_length(tmp_path, capsys):
    cfg = dict(DPMM, S=1000, chain={"iterations": 25_000, "thin": 10, "burn_in": 0})
    code, err = run(tmp_path, "fit", cfg, capsys=capsys)
    assert code == 0, err
    _, th = io.read_matrix(tmp_path / "out" / "theta_samples.csv")
    assert th.shape == (2500, 4)


def test_fit_is_deterministic(tmp_path, capsys):
    assert run(tmp_path, "fit", DPMM, out="a", capsys=capsys)[0] == 0
    assert run(tmp_path, "fit", DPMM, out="b", capsys=capsys)[0] == 0
    assert manifest(tmp_path, "a")["artifacts"] == manifest(tmp_path, "b")["artifacts"]
    code, _ = run(tmp_path, "fit", DPMM, out="c", extra=("--seed", "8"), capsys=capsys)
    assert code == 0
    mc = manifest(tmp_path, "c")
    assert mc["seed"] == 8
    assert mc["artifacts"]["theta_samples.csv"] != manifest(tmp_path, "a")["artifacts"]["theta_samples.csv"]


def test_missing_data_is_validation_error(tmp_path, capsys):
    code, err = run(tmp_path, "fit", dict(DPMM, data="nowhere.csv"), capsys=capsys)
    assert code == 2
    msg = json.loads(err)
    assert msg["exit_code"] == 2 and "not found" in msg["message"]
    assert not (tmp_path / "out").exists() or not any((tmp_path / "out").iterdir())
    assert not list(tmp_path.glob(".out.stage-*"))


@pytest.mark.parametrize("patch", [
    {"seed": None},
    {"prior": "flat"},
    {"model": "glm"},
    {"chain": {"thin": 2}},
    {"chain": {"iterations": 10, "bogus": 1}},
])
def test_config_validation(tmp_path, capsys, patch):
    cfg = dict(DPMM, **patch)
    cfg = {k: v for k, v in cfg.items() if v is not None}
    code, err = run(tmp_path, "fit", cfg, capsys=capsys)
    assert code == 2
    assert json.loads(err)["error"] == "ConfigError"


def test_invalid_json_config(tmp_path, capsys):
    (tmp_path / "c.json").write_text("{")
    assert cli.main(["fit", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "o")]) == 2


def test_no_silent_overwrite(tmp_path, capsys):
    assert run(tmp_path, "fit", DPMM, capsys=capsys)[0] == 0
    code, err = run(tmp_path, "fit", DPMM, capsys=capsys)
    assert code == 2 and "--force" in json.loads(err)["message"]
    assert run(tmp_path, "fit", DPMM, extra=("--force",), capsys=capsys)[0] == 0


def ctab_data(tmp_path):
    (tmp_path / "counts.csv").write_text("v1,v2,count\n1,1,5\n1,2,3\n1,3,0\n2,1,4\n2,2,2\n2,3,6\n")
    return "counts.csv"


@pytest.mark.parametrize("prior", ["informative", "noninformative", "msp"])
def test_fit_ctab(tmp_path, capsys, prior):
    cfg = {"model": "ctab", "prior": prior, "data": ctab_data(tmp_path), "seed": 3,
           "target_margins": [[0.4, 0.6], [0.3, 0.3, 0.4]], "chain": {"iterations": 20_000, "thin": 20}}
    code, err = run(tmp_path, "fit", cfg, capsys=capsys)
    assert code == 0, err
    f, shape = io.load_table(tmp_path / "out" / "posterior_mean.csv")
    assert shape.d == (2, 3) and f.sum() == pytest.approx(1.0, abs=1e-9)
    assert 0 < manifest(tmp_path)["acceptance_rate"] <= 1


def test_fit_ctab_numeric_failure(tmp_path, capsys):
    cfg = {"model": "ctab", "prior": "msp", "data": ctab_data(tmp_path), "seed": 3,
           "target_margins": [[0.4, 0.6], [0.3, 0.3, 0.4]],
           "chain": {"iterations": 1000, "tuning": {"delta": 1e7}}}
    code, err = run(tmp_path, "fit", cfg, capsys=capsys)
    assert code == 3 and json.loads(err)["error"] == "NumericError"


# estimate-p0 ------------------------------------------------------------

def test_estimate_p0_small_sample_flag_and_reuse(tmp_path, capsys):
    cfg = dict(DPMM, fit_S=10, holdout=50)
    code, err = run(tmp_path, "estimate-p0", cfg, out="p0", capsys=capsys)
    assert code == 0, err
    art = json.loads((tmp_path / "p0" / "p0.json").read_text())
    assert art["estimate"]["diagnostics"]["small_sample"] is True
    assert manifest(tmp_path, "p0")["diagnostics"]["small_sample"] is True
    est = InducedMarginalEstimate.from_dict(art["estimate"])
    assert est.kind == "moment-fit-skew-t" and est.S == 10


def test_estimate_p0_loadable_by_fit(tmp_path, capsys):
    cfg = dict(DPMM, fit_S=500, holdout=200)
    assert run(tmp_path, "estimate-p0", cfg, out="p0", capsys=capsys)[0] == 0
    art = json.loads((tmp_path / "p0" / "p0.json").read_text())
    assert np.isfinite(art["estimate"]["diagnostics"]["holdout_mean_log_score"])
    fit = dict(DPMM, prior="msp", p0="p0/p0.json", p1_draws=500)
    code, err = run(tmp_path, "fit", fit, capsys=capsys)
    assert code == 0, err
    assert {"p1.json", "theta_samples.csv"} <= set(manifest(tmp_path)["artifacts"])
    assert "p0.json" not in manifest(tmp_path)["artifacts"]


def test_estimate_p0_ctab_closed_form(tmp_path, capsys):
    cfg = {"model": "ctab", "data": ctab_data(tmp_path), "seed": 1}
    assert run(tmp_path, "estimate-p0", cfg, capsys=capsys)[0] == 0
    est = InducedMarginalEstimate.from_dict(json.loads((tmp_path / "out" / "p0.json").read_text())["estimate"])
    s = TableShape([2, 3])
    assert est.kind == "product-of-dirichlet"
    for j, a in enumerate(est.params["alphas"]):
        np.testing.assert_array_equal(a, induced_dirichlet_margin(noninformative_prior(s), s, j).alpha)


# simulate ---------------------------------------------------------------

def test_simulate_replicates(tmp_path, capsys):
    cfg = {"seed": 4, "n": 100, "replicates": 3, "truth": {"generator": {"shape": [2, 3, 2]}}}
    code, err = run(tmp_path, "simulate", cfg, capsys=capsys)
    assert code == 0, err
    files = sorted((tmp_path / "out").glob("replicate_*.csv"))
    assert len(files) == 3
    for fp in files:
        c, shape = io.load_count_table(fp)
        assert c.n == 100 and shape.d == (2, 3, 2)
    seeds = json.loads((tmp_path / "out" / "seeds.json").read_text())
    assert [s["replicate"] for s in seeds] == [1, 2, 3]


def test_simulate_degenerate_and_lln(tmp_path, capsys):
    s = TableShape([2, 2])
    io.write_table(tmp_path / "deg.csv", s, [0.0, 0.0, 1.0, 0.0])
    cfg = {"seed": 5, "n": 40, "replicates": 1, "truth": {"table": "deg.csv"}}
    assert run(tmp_path, "simulate", cfg, capsys=capsys)[0] == 0
    c, _ = io.load_count_table(tmp_path / "out" / "replicate_001.csv")
    np.testing.assert_array_equal(c.counts, [0, 0, 40, 0])

    f = np.array([0.1, 0.2, 0.3, 0.4])
    io.write_table(tmp_path / "f.csv", s, f)
    n = 1_000_000
    cfg = {"seed": 6, "n": n, "replicates": 1, "truth": {"table": "f.csv"}}
    assert run(tmp_path, "simulate", cfg, out="big", capsys=capsys)[0] == 0
    c, _ = io.load_count_table(tmp_path / "big" / "replicate_001.csv")
    assert np.all(np.abs(c.counts / n - f) < 3 * np.sqrt(f * (1 - f) / n))


# replicate-study --------------------------------------------------------

def test_study_bookkeeping(tmp_path, capsys):
    cfg = {"seed": 8, "study": {"truth": {"generator": {"shape": [2, 2, 2]}}, "sizes": [100, 1000],
                                "replicates": 5, "priors": ["noninformative"]}}
    code, err = run(tmp_path, "replicate-study", cfg, capsys=capsys)
    assert code == 0, err
    rows = json.loads((tmp_path / "out" / "metrics.json").read_text())
    assert len(rows) == 10
    assert {tuple(sorted(r)) for r in rows} == {("L", "M", "acceptance_rate", "n", "prior", "replicate")}
    header, body = io.read_csv(tmp_path / "out" / "summary.csv")
    assert header == ["prior", "n", "replicates", "mean_M", "mean_L"] and len(body) == 2
    header, body = io.read_csv(tmp_path / "out" / "plot_data.csv")
    assert header == ["prior", "n", "replicate", "log_M", "log_L"] and {r[0] for r in body} == {"N"}


def test_study_prior_only_informative_is_exact(tmp_path, capsys):
    s = TableShape([2, 3])
    io.write_table(tmp_path / "ind.csv", s, np.outer([0.3, 0.7], [0.2, 0.3, 0.5]).ravel())
    cfg = {"seed": 9, "study": {"truth": {"table": "ind.csv"}, "sizes": [0], "replicates": 2,
                                "priors": ["informative"]}}
    assert run(tmp_path, "replicate-study", cfg, capsys=capsys)[0] == 0
    rows = json.loads((tmp_path / "out" / "metrics.json").read_text())
    assert all(r["M"] < 1e-12 and r["L"] < 1e-20 for r in rows)


def test_study_parallel_matches_serial(tmp_path, capsys):
    study = {"truth": {"generator": {"shape": [2, 2, 2]}}, "sizes": [50], "replicates": 3,
             "priors": ["noninformative", "msp"]}
    chain = {"iterations": 4000, "thin": 10}
    assert run(tmp_path, "replicate-study", {"seed": 10, "chain": chain, "study": study}, out="s",
               capsys=capsys)[0] == 0
    assert run(tmp_path, "replicate-study", {"seed": 10, "chain": chain, "study": dict(study, workers=2)}, out="p",
               capsys=capsys)[0] == 0
    assert (tmp_path / "s" / "metrics.json").read_bytes() == (tmp_path / "p" / "metrics.json").read_bytes()


def test_study_partial_failure(tmp_path, capsys):
    cfg = {"seed": 11, "chain": {"iterations": 500, "tuning": {"delta": 1e7}},
           "study": {"truth": {"generator": {"shape": [2, 2, 2]}}, "sizes": [100], "replicates": 2,
                     "priors": ["noninformative", "msp"]}}
    code, err = run(tmp_path, "replicate-study", cfg, capsys=capsys)
    assert code == 4 and json.loads(err)["exit_code"] == 4
    rows = json.loads((tmp_path / "out" / "metrics.json").read_text())
    fails = json.loads((tmp_path / "out" / "failures.json").read_text())
    assert len(rows) == 2 and all(r["prior"] == "noninformative" for r in rows)
    assert len(fails) == 2 and all(f["error"] == "NumericError" for f in fails)
    assert manifest(tmp_path)["n_failed"] == 2


def test_study_needs_grid(tmp_path, capsys):
    cfg = {"seed": 1, "study": {"truth": {"generator": {"shape": [2, 2]}}, "replicates": 2}}
    assert run(tmp_path, "replicate-study", cfg, capsys=capsys)[0] == 2
