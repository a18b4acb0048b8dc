"""Command-line front end.

Commands ``fit``, ``estimate-p0``, ``simulate`` and ``replicate-study`` each
read a JSON config (``--config``) and write artifacts plus ``manifest.json``
into ``--out``. Exit codes: 0 success, 2 validation error, 3 numeric error,
4 partial study failure. Errors are reported as one JSON object on stderr.

Config keys (paths are relative to the config file):

common
    ``model`` ("dpmm" or "ctab"), ``seed`` (required), ``prior``
    ("informative", "noninformative", "msp"), ``chain``
    (``iterations``, ``thin``, ``burn_in``, ``tuning``).
dpmm
    ``data`` (CSV path or ``"bundled:old_faithful"``), ``split``
    (``prior_size``, ``observed_size``: seeded prior/observed subsamples of
    the data), ``alpha``, ``hyper`` (explicit NIW base), ``prior_moments``
    (``m0``, ``v0``, ``n0`` and optional ``R``), ``p1`` (factor list),
    ``p0`` (artifact from ``estimate-p0``), ``S``, ``fit_S``, ``p0_kind``,
    ``holdout``, ``grid`` (``size``).
ctab
    ``data`` (count-table CSV), ``shape``, ``target_margins`` (list of
    margins) or ``truth`` (probability-table CSV), ``p0``.
simulate / replicate-study
    ``truth``: ``{"table": path}`` or ``{"generator": {"shape": [...],
    "n_source": 2000, "epsilon": 0.1, "n_classes": 3}}``. ``simulate`` takes
    ``n`` and ``replicates``; ``study`` takes ``sizes``, ``replicates``,
    ``priors`` and ``workers``.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
import tempfile
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import ctab as ct
from . import dpmm as dp
from . import io
from .core import ChainConfig, InducedMarginalEstimate, MarginalTargetPrior, estimate_induced_marginal, \
    product_dirichlet_estimate
from .distributions import RandomSource
from .errors import ConfigError, FitError, InvariantError, MSPError

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_PARTIAL = 0, 2, 3, 4
PRIORS = ("informative", "noninformative", "msp")
BUNDLED = "bundled:old_faithful"


class PartialFailure(MSPError):
    """Some study replicates failed; the rest were written."""


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

class ExperimentConfig:
    """Validated view of a JSON experiment config."""

    def __init__(self, raw, base_dir, seed=None):
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        self.raw = dict(raw)
        self.base = Path(base_dir)
        if seed is not None:
            self.raw["seed"] = int(seed)
        if "seed" not in self.raw:
            raise ConfigError("config needs a 'seed' (or pass --seed)")
        self.seed = int(self.raw["seed"])
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        self.model = self.raw.get("model")
        self.prior = self.raw.get("prior")

    def get(self, key, default=None):
        return self.raw.get(key, default)

    def path(self, key, value=None):
        v = self.raw.get(key) if value is None else value
        if v is None:
            raise ConfigError(f"config needs '{key}'")
        if v == BUNDLED:
            return v
        p = Path(v)
        p = p if p.is_absolute() else self.base / p
        if not p.exists():
            raise ConfigError(f"{key}: file not found: {p}")
        return p

    def need_model(self, *allowed):
        if self.model not in allowed:
            raise ConfigError(f"'model' must be one of {allowed}, got {self.model!r}")

    def need_prior(self):
        if self.prior not in PRIORS:
            raise ConfigError(f"'prior' must be one of {PRIORS}, got {self.prior!r}")

    def chain(self):
        c = self.raw.get("chain")
        if not isinstance(c, dict) or "iterations" not in c:
            raise ConfigError("config needs 'chain' with at least 'iterations'")
        unknown = set(c) - {"iterations", "thin", "burn_in", "tuning"}
        if unknown:
            raise ConfigError(f"unknown chain keys {sorted(unknown)}")
        return ChainConfig(c["iterations"], c.get("thin", 1), c.get("burn_in"), self.seed, dict(c.get("tuning", {})))


def load_config(path, seed=None):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return ExperimentConfig(io.read_json(path), path.parent, seed)


# --------------------------------------------------------------------------
# output staging
# --------------------------------------------------------------------------

def _check_out(out, force):
    out = Path(out)
    if out.exists():
        if not out.is_dir():
            raise ConfigError(f"--out {out} exists and is not a directory")
        if any(out.iterdir()) and not force:
            raise ConfigError(f"output directory {out} is not empty (use --force to overwrite)")
    return out


class _Stage:
    """Artifacts are written to a hidden sibling directory and moved on success."""

    def __init__(self, out):
        self.out = out
        out.parent.mkdir(parents=True, exist_ok=True)
        self.dir = Path(tempfile.mkdtemp(dir=out.parent, prefix=f".{out.name}.stage-"))
        self.files = []

    def path(self, name):
        self.files.append(name)
        return self.dir / name

    def commit(self, manifest):
        checksums = {f: io.sha256_file(self.dir / f) for f in sorted(self.files)}
        manifest["artifacts"] = checksums
        self.out.mkdir(parents=True, exist_ok=True)
        for f in self.files:
            os.replace(self.dir / f, self.out / f)
        io.atomic_write_json(self.out / "manifest.json", manifest)
        shutil.rmtree(self.dir, ignore_errors=True)

    def abort(self):
        shutil.rmtree(self.dir, ignore_errors=True)


def _manifest(command, cfg, t0, **fields):
    m = {
        "command": command,
        "version": __version__,
        "config_hash": io.config_hash(cfg.raw),
        "seed": cfg.seed,
        "wall_time": time.time() - t0,
    }
    m.update(fields)
    return m


def _ess_dict(out):
    return {n: (None if not np.isfinite(e) else float(e)) for n, e in zip(out.theta_names, out.ess)}


# --------------------------------------------------------------------------
# dpmm helpers
# --------------------------------------------------------------------------

def _dpmm_inputs(cfg):
    """Observed data, prior sample (or None) and base measures for a dpmm config."""
    src = cfg.path("data")
    full = io.load_old_faithful() if src == BUNDLED else io.load_dataset(src)
    alpha = float(cfg.get("alpha", 1.0))
    x0 = None
    split = cfg.get("split")
    if split is not None:
        n0, n = int(split.get("prior_size", 30)), int(split.get("observed_size", 30))
        if n0 < 2 or n < 2 or n0 + n > full.n:
            raise ConfigError(f"split sizes {n0} + {n} do not fit {full.n} rows")
        idx = RandomSource(cfg.seed, (0,)).gen.permutation(full.n)
        x0 = full.y[idx[:n0]]
        data = dp.Dataset(full.y[idx[n0:n0 + n]], full.names)
    else:
        data = full
    return data, x0, alpha


def _dpmm_hyper(cfg, data, x0, alpha, prior):
    if cfg.get("hyper") is not None:
        return dp.NiwHyper.from_dict({"alpha": alpha, **cfg.get("hyper")})
    if prior == "informative":
        pm = cfg.get("prior_moments")
        if pm is not None:
            m0, v0, n0 = pm["m0"], pm["v0"], pm["n0"]
        elif x0 is not None:
            m0, v0, n0 = x0.mean(axis=0), x0.var(axis=0, ddof=1), x0.shape[0]
        else:
            raise ConfigError("the informative dpmm prior needs 'hyper', 'prior_moments' or a 'split'")
        R = pm.get("R") if pm is not None and pm.get("R") is not None else np.atleast_2d(np.corrcoef(data.y, rowvar=False))
        return dp.informative_hyperparameters(m0, v0, n0, alpha, R)
    return dp.noninformative_hyperparameters(data, alpha)


def _dpmm_p1(cfg, data, x0, alpha, S):
    spec = cfg.get("p1")
    if isinstance(spec, dict) and "factors" in spec:
        return MarginalTargetPrior.from_dict(spec)
    if isinstance(spec, list):
        return MarginalTargetPrior(spec)
    if spec in (None, "from-prior-sample"):
        if x0 is None and cfg.get("prior_moments") is None:
            raise ConfigError("the msp prior needs 'p1' factors, a 'split' or 'prior_moments'")
        hi = _dpmm_hyper(ExperimentConfig({k: v for k, v in cfg.raw.items() if k != "hyper"}, cfg.base),
                         data, x0, alpha, "informative")
        draws = dp.prior_theta_sampler(hi, data.n, S)(RandomSource(cfg.seed, (5,)), int(cfg.get("p1_draws", 10_000)))
        return dp.fit_product_target(draws, data.p)
    raise ConfigError("'p1' must be a factor list, a {'factors': ...} object or 'from-prior-sample'")


def _load_p0(cfg):
    if cfg.get("p0") is None:
        return None
    d = io.read_json(cfg.path("p0"))
    try:
        return InducedMarginalEstimate.from_dict(d.get("estimate", d))
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"p0 artifact is malformed: {exc}") from None


def _grid_axes(data, size):
    lo, hi = data.y.min(axis=0), data.y.max(axis=0)
    pad = 0.15 * (hi - lo)
    return [np.linspace(a, b, size) for a, b in zip(lo - pad, hi + pad)]


def _fit_dpmm(cfg, stage):
    cfg.need_prior()
    chain_cfg = cfg.chain()
    data, x0, alpha = _dpmm_inputs(cfg)
    S = int(cfg.get("S", dp.DEFAULT_ATOMS))
    hyper = _dpmm_hyper(cfg, data, x0, alpha, cfg.prior)
    kw = {}
    if cfg.prior == "msp":
        kw["p1"] = _dpmm_p1(cfg, data, x0, alpha, S)
        kw["p0"] = _load_p0(cfg)
        kw["fit_S"] = int(cfg.get("fit_S", dp.DEFAULT_FIT_S))
        kw["p0_kind"] = cfg.get("p0_kind", "moment-fit-skew-t")
    out = dp.run_dpmm_chain(data, cfg.prior, chain_cfg, hyper=hyper, S=S, **kw)
    io.write_matrix(stage.path("theta_samples.csv"), out.theta_names, out.theta_samples)
    axes = _grid_axes(data, int(cfg.get("grid", {}).get("size", 60)))
    rows = []
    for j, ax in enumerate(axes):
        dens = dp.marginal_predictive_density(out, ax, j)
        rows += [(j + 1, x, d) for x, d in zip(ax, dens)]
    io.write_csv(stage.path("predictive_marginals.csv"), ["coordinate", "x", "density"], rows)
    if data.p == 2:
        X, Y = np.meshgrid(axes[0], axes[1], indexing="ij")
        pts = np.column_stack([X.ravel(), Y.ravel()])
        dens = dp.posterior_predictive_density(out, pts)
        io.write_matrix(stage.path("predictive_grid.csv"), data.names + ["density"], np.column_stack([pts, dens]))
    io.write_json(stage.path("hyper.json"), hyper.to_dict())
    if cfg.prior == "msp":
        io.write_json(stage.path("p1.json"), kw["p1"].to_dict())
        if "p0" in out.extra:
            io.write_json(stage.path("p0.json"), out.extra["p0"].to_dict())
    return out


# --------------------------------------------------------------------------
# ctab helpers
# --------------------------------------------------------------------------

def _ctab_targets(cfg, shape):
    if cfg.get("target_margins") is not None:
        tm = [np.asarray(t, dtype=float) for t in cfg.get("target_margins")]
        if len(tm) != shape.p:
            raise ConfigError(f"need {shape.p} target margins")
        return [t / t.sum() for t in tm]
    if cfg.get("truth") is not None:
        f, sh = io.load_table(cfg.path("truth"), shape)
        return ct.all_marginals(f, sh)
    raise ConfigError("this prior needs 'target_margins' or 'truth'")


def _fit_ctab(cfg, stage):
    cfg.need_prior()
    chain_cfg = cfg.chain()
    counts, shape = io.load_count_table(cfg.path("data"), cfg.get("shape"))
    if cfg.prior == "informative":
        base, p1 = ct.informative_prior(shape, _ctab_targets(cfg, shape)), None
    else:
        base = ct.noninformative_prior(shape)
        p1 = None
        if cfg.prior == "msp":
            p1 = [ct.DirichletParams(shape.size * t) for t in _ctab_targets(cfg, shape)]
    p0 = _load_p0(cfg)
    p0_margins = None
    if p0 is not None:
        if p0.kind != "product-of-dirichlet":
            raise ConfigError("ctab p0 artifacts must be product-of-dirichlet")
        p0_margins = [ct.DirichletParams(a) for a in p0.params["alphas"]]
    out = ct.run_ctab_chain(counts, shape, base, p1_margins=p1, config=chain_cfg, p0_margins=p0_margins)
    io.write_matrix(stage.path("theta_samples.csv"), out.theta_names, out.theta_samples)
    if cfg.prior == "msp":
        fhat = out.extra["f_samples"].mean(axis=0)
    else:
        fhat = ct.conjugate_posterior_mean(base, counts)
    io.write_table(stage.path("posterior_mean.csv"), shape, fhat)
    return out


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_fit(cfg, out, force=False):
    t0 = time.time()
    cfg.need_model("dpmm", "ctab")
    out = _check_out(out, force)
    stage = _Stage(out)
    try:
        res = (_fit_dpmm if cfg.model == "dpmm" else _fit_ctab)(cfg, stage)
        man = _manifest("fit", cfg, t0, model=cfg.model, prior=cfg.prior, acceptance_rate=res.acceptance_rate,
                        n_saved=int(res.theta_samples.shape[0]), ess=_ess_dict(res))
        stage.commit(man)
    except BaseException:
        stage.abort()
        raise
    return man


def cmd_estimate_p0(cfg, out, force=False):
    t0 = time.time()
    cfg.need_model("dpmm", "ctab")
    out = _check_out(out, force)
    if cfg.model == "dpmm":
        data, x0, alpha = _dpmm_inputs(cfg)
        base = "noninformative" if cfg.get("hyper") is None else "explicit"
        hyper = _dpmm_hyper(cfg, data, x0, alpha, "noninformative")
        S = int(cfg.get("S", dp.DEFAULT_ATOMS))
        fit_S = int(cfg.get("fit_S", dp.DEFAULT_FIT_S))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            est = estimate_induced_marginal(dp.prior_theta_sampler(hyper, data.n, S), fit_S,
                                            cfg.get("p0_kind", "moment-fit-skew-t"), RandomSource(cfg.seed, (6,)),
                                            log_coords=range(data.p, 2 * data.p),
                                            holdout=int(cfg.get("holdout", 1000)))
    else:
        counts, shape = io.load_count_table(cfg.path("data"), cfg.get("shape")) if cfg.get("data") is not None \
            else (None, ct.TableShape(cfg.get("shape")))
        base = "noninformative"
        alpha = ct.noninformative_prior(shape)
        est = product_dirichlet_estimate([ct.induced_dirichlet_margin(alpha, shape, j).alpha for j in range(shape.p)])
    stage = _Stage(out)
    try:
        io.write_json(stage.path("p0.json"), {"model": cfg.model, "base_prior": base, "estimate": est.to_dict()})
        man = _manifest("estimate-p0", cfg, t0, model=cfg.model, kind=est.kind, S=est.S,
                        diagnostics=est.diagnostics)
        stage.commit(man)
    except BaseException:
        stage.abort()
        raise
    return man


def _truth(cfg, spec):
    if not isinstance(spec, dict):
        raise ConfigError("'truth' must be an object with 'table' or 'generator'")
    if "table" in spec:
        f, shape = io.load_table(cfg.path("truth.table", spec["table"]), spec.get("shape"))
        if np.any(f < 0) or abs(f.sum() - 1.0) > 1e-9:
            raise ConfigError("truth table must be a probability vector")
        return f, shape
    if "generator" in spec:
        g = dict(spec["generator"])
        shape = ct.TableShape(g.pop("shape", None) or [2, 3, 2, 4, 4])
        dominant = g.pop("dominant", None)
        if dominant is not None:
            dominant = {int(k): float(v) for k, v in dominant.items()}
        f = ct.synthetic_truth(shape, RandomSource(cfg.seed, (2,)), dominant=dominant, **g)
        return f, shape
    raise ConfigError("'truth' must contain 'table' or 'generator'")


def cmd_simulate(cfg, out, force=False):
    t0 = time.time()
    spec = cfg.get("simulate", cfg.raw)
    f, shape = _truth(cfg, spec.get("truth", cfg.get("truth")))
    n = int(spec.get("n", 0))
    reps = int(spec.get("replicates", 1))
    if n < 0 or reps < 1:
        raise ConfigError("need n >= 0 and replicates >= 1")
    out = _check_out(out, force)
    stage = _Stage(out)
    try:
        seeds = []
        for r in range(reps):
            src = RandomSource(cfg.seed, (3, n, r))
            y = ct.simulate_dataset(f, n, src)
            io.write_table(stage.path(f"replicate_{r + 1:03d}.csv"), shape, y.counts, column="count")
            seeds.append({"replicate": r + 1, "seed": cfg.seed, "stream": [3, n, r]})
        io.write_table(stage.path("truth.csv"), shape, f)
        io.write_json(stage.path("seeds.json"), seeds)
        stage.commit(_manifest("simulate", cfg, t0, n=n, replicates=reps, shape=list(shape.d)))
    except BaseException:
        stage.abort()
        raise
    return out


def _study_job(args):
    """One (n, replicate) cell of a study; runs in a worker process."""
    f, d, n, r, seed, chain, priors = args
    shape = ct.TableShape(d)
    rows, failures = [], []
    theta_true = ct.all_marginals(f, shape)
    y = ct.simulate_dataset(f, n, RandomSource(seed, (3, n, r)))
    chain_seed = int(RandomSource(seed, (4, n, r)).gen.integers(2**63))
    cfg = ChainConfig(chain["iterations"], chain.get("thin", 1), chain.get("burn_in"), chain_seed,
                      dict(chain.get("tuning", {})))
    for prior in priors:
        try:
            est = ct.study_posterior_means(y, shape, theta_true, cfg, priors=(prior,))
            fhat, acc = est[prior]
            m = ct.metrics(fhat, f, shape)
            rows.append({"prior": prior, "n": n, "replicate": r + 1, "M": m.M, "L": m.L, "acceptance_rate": acc})
        except (MSPError, ArithmeticError, ValueError) as exc:
            failures.append({"prior": prior, "n": n, "replicate": r + 1, "error": type(exc).__name__,
                             "message": str(exc)})
    return rows, failures


_LABELS = {"informative": "I", "noninformative": "N", "msp": "MSP"}


def cmd_replicate_study(cfg, out, force=False):
    t0 = time.time()
    study = cfg.get("study")
    if not isinstance(study, dict):
        raise ConfigError("config needs a 'study' object")
    f, shape = _truth(cfg, study.get("truth", cfg.get("truth")))
    sizes = [int(n) for n in study.get("sizes", [])]
    reps = int(study.get("replicates", 0))
    priors = list(study.get("priors", PRIORS))
    if not sizes or reps < 1 or any(n < 0 for n in sizes):
        raise ConfigError("study needs nonnegative 'sizes' and 'replicates' >= 1")
    if any(p not in PRIORS for p in priors):
        raise ConfigError(f"study priors must be among {PRIORS}")
    chain = cfg.get("chain") or {}
    if "msp" in priors:
        cfg.chain()  # validate
    elif "iterations" not in chain:
        chain = {"iterations": 1}
    workers = int(study.get("workers", 1))
    out = _check_out(out, force)
    jobs = [(f, shape.d, n, r, cfg.seed, chain, priors) for n in sizes for r in range(reps)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_study_job, jobs))
    else:
        results = [_study_job(j) for j in jobs]
    rows = [row for res in results for row in res[0]]
    failures = [fl for res in results for fl in res[1]]
    stage = _Stage(out)
    try:
        io.write_json(stage.path("metrics.json"), rows)
        summary = []
        for prior in priors:
            for n in sizes:
                sel = [r for r in rows if r["prior"] == prior and r["n"] == n]
                if sel:
                    summary.append((prior, n, len(sel), np.mean([r["M"] for r in sel]),
                                    np.mean([r["L"] for r in sel])))
        io.write_csv(stage.path("summary.csv"), ["prior", "n", "replicates", "mean_M", "mean_L"], summary)
        with np.errstate(divide="ignore"):
            plot = [(_LABELS[r["prior"]], r["n"], r["replicate"], np.log(r["M"]), np.log(r["L"])) for r in rows]
        io.write_csv(stage.path("plot_data.csv"), ["prior", "n", "replicate", "log_M", "log_L"], plot)
        io.write_table(stage.path("truth.csv"), shape, f)
        if failures:
            io.write_json(stage.path("failures.json"), failures)
        stage.commit(_manifest("replicate-study", cfg, t0, shape=list(shape.d), sizes=sizes, replicates=reps,
                               priors=priors, n_rows=len(rows), n_failed=len(failures)))
    except BaseException:
        stage.abort()
        raise
    if failures:
        raise PartialFailure(f"{len(failures)} replicate fits failed; see failures.json")
    return rows


COMMANDS = {
    "fit": cmd_fit,
    "estimate-p0": cmd_estimate_p0,
    "simulate": cmd_simulate,
    "replicate-study": cmd_replicate_study,
}


def _exit_code(exc):
    if isinstance(exc, PartialFailure):
        return EXIT_PARTIAL
    if isinstance(exc, (ArithmeticError, FitError, InvariantError)):
        return EXIT_NUMERIC
    return EXIT_VALIDATION


def main(argv=None):
    ap = argparse.ArgumentParser(prog="msprior", description="Marginally specified priors for DPMMs and tables.")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True)
        sp.add_argument("--out", required=True)
        sp.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        sp.add_argument("--force", action="store_true", help="allow a non-empty output directory")
    args = ap.parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed)
        COMMANDS[args.command](cfg, args.out, args.force)
    except (MSPError, ValueError, ArithmeticError, KeyError, TypeError, OSError) as exc:
        code = _exit_code(exc)
        if isinstance(exc, (KeyError, TypeError)):
            exc = ConfigError(f"malformed config: {exc}")
        err = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
        print(json.dumps(err), file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
