"""Config-driven experiment drivers.

Every driver takes a resolved configuration dictionary (see
:mod:`tokendyn.config`) and returns an :class:`ExperimentResult` holding CSV
rows and fitted rates. Trials are independent: trial ``k`` only uses streams
derived from ``(master_seed, k, ., .)`` and results are reduced in trial
order, so the output does not depend on the number of workers.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial

import numpy as np

from .config import attention_params, config_hash, kernel_spec, model_config
from .dynamics import (
    recorded_layers,
    run_common_noise,
    run_coupled_pair,
    run_euler,
    run_refinement_ladder,
    run_transformer,
)
from .errors import NotDissipative, NumericalFailure
from .kernel import KernelSpec, dissipation_rate, lyapunov_constants, relu_closed_forms
from .mlp import sample_mlp
from .noise import coupled_layer_fields
from .observables import (
    EnergyTrace,
    cosine_stats,
    decay_rate_fit,
    interaction_energy,
    lyapunov_estimate,
    w2_empirical,
)
from .seeding import Role, TrialStreams, derive_stream
from .sphere import sample_uniform_sphere


# --------------------------------------------------------------------- results


@dataclass(frozen=True, eq=False)
class RateFit:
    """Least-squares line through ``(log x, log y)``.

    ``stderr_slope`` propagates the Monte-Carlo error of the per-point trial
    means (delta method with their joint covariance), so it shrinks like
    ``1 / sqrt(trials)``.
    """

    x_values: np.ndarray
    y_values: np.ndarray
    slope: float
    intercept: float
    stderr_slope: float

    def as_dict(self) -> dict:
        return {
            "x_values": [float(v) for v in self.x_values],
            "y_values": [float(v) for v in self.y_values],
            "slope": self.slope,
            "intercept": self.intercept,
            "stderr_slope": self.stderr_slope,
        }


def fit_rate(x, samples) -> RateFit:
    """Fit ``log mean(samples[:, i])`` against ``log x[i]``.

    Parameters
    ----------
    x : (P,) array
        Positive abscissae, at least three.
    samples : (trials, P) array
        Per-trial positive observations for each abscissa.
    """
    x = np.asarray(x, dtype=float)
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if x.size < 3:
        raise ValueError("a rate fit needs at least three points")
    means = samples.mean(axis=0)
    if np.any(means <= 0):
        raise NumericalFailure("rate fit needs positive means")
    lx = np.log(x)
    ly = np.log(means)
    lc = lx - lx.mean()
    weights = lc / (lc @ lc)
    slope = float(weights @ ly)
    intercept = float(ly.mean() - slope * lx.mean())
    n = samples.shape[0]
    if n > 1:
        cov = np.cov(samples, rowvar=False) / n
        grad = weights / means
        stderr = float(np.sqrt(max(grad @ cov @ grad, 0.0)))
    else:
        stderr = float("nan")
    return RateFit(x, means, slope, intercept, stderr)


def nonincreasing_trend(samples) -> bool:
    """Trend test for a curve measured on common trials.

    Every consecutive step must satisfy ``mean_{k+1} <= mean_k + 2 se`` where
    ``se`` is the standard error of the paired difference, and the last mean
    must lie strictly below the first.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    n = samples.shape[0]
    means = samples.mean(axis=0)
    for k in range(samples.shape[1] - 1):
        diff = samples[:, k + 1] - samples[:, k]
        se = diff.std(ddof=1) / np.sqrt(n) if n > 1 else 0.0
        if diff.mean() > 2 * se:
            return False
    return bool(means[-1] < means[0])


@dataclass(eq=False)
class ExperimentResult:
    """Rows for the CSV plus summary data echoed in the JSON sidecar."""

    experiment: str
    config: dict
    rows: list = field(default_factory=list)
    fits: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    def add(self, trial: int, stat: str, **values) -> None:
        row = {
            "experiment": self.experiment,
            "master_seed": self.config["master_seed"],
            "trial": trial,
            "config_hash": self.config_hash,
            "stat": stat,
        }
        row.update(values)
        self.rows.append(row)


def _map_trials(fn, cfg: dict, workers: int = 1, trials=None):
    trials = list(range(cfg["trials"])) if trials is None else list(trials)
    if workers <= 1 or len(trials) <= 1:
        return [fn(cfg, t) for t in trials]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(partial(fn, cfg), trials))


def _init_cloud(cfg: dict, trial: int, n: int | None = None, dim: int | None = None):
    rng = derive_stream(cfg["master_seed"], trial, 0, Role.INIT)
    return sample_uniform_sphere(rng, n or cfg["n_tokens"], dim or cfg["model"]["dim"]).points


def _mean_se(values):
    v = np.asarray(values, dtype=float)
    n = v.size
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(n)) if n > 1 else float("nan")


# --------------------------------------------------------------------- kernel table


def run_kernel_table(cfg: dict, workers: int = 1) -> ExperimentResult:
    """Kernel constants for every activation, dimension and bias scale."""
    res = ExperimentResult("kernel_table", cfg)
    g = cfg["grids"]
    beta = g["beta"]
    for act in g["activations"]:
        for d in g["dims"]:
            for s in g["sigmas"]:
                spec = KernelSpec(act, s, s, d)
                vals = lyapunov_constants(spec)
                if spec.is_relu:
                    cf1, cfbar = relu_closed_forms(spec)
                else:
                    cf1 = cfbar = float("nan")
                try:
                    rate = dissipation_rate(spec, beta)
                    lbp, status = rate.lambda_bar_prime, "ok"
                except NotDissipative:
                    lbp, status = float("nan"), "not_dissipative"
                except NumericalFailure as exc:
                    lbp, status = float("nan"), type(exc).__name__
                res.add(
                    -1, "exact", activation=act, dim=d, sigma=s,
                    kappa_one=vals.kappa_one, kappa_prime_one=vals.kappa_prime_one,
                    lambda_one=vals.lambda_one, lambda_bar=vals.lambda_bar,
                    closed_lambda_one=cf1, closed_lambda_bar=cfbar,
                    beta=beta, lambda_bar_prime=lbp, dissipation_status=status,
                )
    return res


# --------------------------------------------------------------------- simulate


def _trial_simulate(cfg: dict, trial: int):
    model = model_config(cfg)
    streams = TrialStreams(cfg["master_seed"], trial)
    init = _init_cloud(cfg, trial)
    if model.scheme == "transformer_discrete":
        rec = run_transformer(model, init, streams, cfg["record_stride"])
    else:
        rec = run_euler(model, init, streams, cfg["record_stride"])
    beta = cfg["grids"]["beta"]
    out = []
    for layer, state in zip(rec.recorded_layers, rec.states):
        stats = cosine_stats(state)
        out.append((int(layer), interaction_energy(state, beta), stats))
    return out


def run_simulate(cfg: dict, workers: int = 1) -> ExperimentResult:
    """Energy and cosine statistics along trajectories of the configured model."""
    res = ExperimentResult("simulate", cfg)
    model = model_config(cfg)
    model.check_step_size()
    per_trial = _map_trials(_trial_simulate, cfg, workers)
    dt = model.dt
    for trial, series in enumerate(per_trial):
        for layer, energy, stats in series:
            res.add(trial, "trial", layer=layer, time=layer * dt, energy=energy,
                    cos_mean=stats["mean"], cos_median=stats["median"], cos_min=stats["min"])
    n_layers = len(per_trial[0])
    for k in range(n_layers):
        layer = per_trial[0][k][0]
        e_mean, e_se = _mean_se([s[k][1] for s in per_trial])
        med_mean, med_se = _mean_se([s[k][2]["median"] for s in per_trial])
        res.add(-1, "mean", layer=layer, time=layer * dt, energy=e_mean, energy_se=e_se,
                cos_median=med_mean, cos_median_se=med_se)
    finals = [s[-1][2]["median"] for s in per_trial]
    res.summary["final_median_cosine"] = finals
    return res


# --------------------------------------------------------------------- deep rate


def _trial_deep(cfg: dict, trial: int):
    depths = cfg["grids"]["depths"]
    model = model_config(cfg, depth=depths[0])
    streams = TrialStreams(cfg["master_seed"], trial)
    ladder = run_refinement_ladder(model, len(depths), _init_cloud(cfg, trial), streams)
    return ladder.gaps


def run_deep_rate(cfg: dict, workers: int = 1) -> ExperimentResult:
    """Squared self-convergence gap between depths ``L`` and ``2L`` and its rate in ``L``."""
    res = ExperimentResult("deep_rate", cfg)
    depths = cfg["grids"]["depths"]
    model_config(cfg, depth=depths[0]).check_step_size()
    gaps = np.array(_map_trials(_trial_deep, cfg, workers))
    for trial, row in enumerate(gaps):
        for depth, gap in zip(depths, row):
            res.add(trial, "trial", depth=depth, sq_gap=gap)
    for j, depth in enumerate(depths):
        m, se = _mean_se(gaps[:, j])
        res.add(-1, "mean", depth=depth, sq_gap=m, sq_gap_se=se)
    fit = fit_rate(depths, gaps)
    res.fits["deep"] = fit
    res.add(-1, "fit", slope=fit.slope, intercept=fit.intercept, stderr_slope=fit.stderr_slope)
    return res


# --------------------------------------------------------------------- wide rate


def _trial_wide(cfg: dict, trial: int):
    g = cfg["grids"]
    spec = kernel_spec(cfg)
    widths = g["widths"]
    pts = sample_uniform_sphere(
        derive_stream(cfg["master_seed"], trial, 0, Role.FROZEN_POINTS), g["static_points"], spec.dim
    ).points
    static = []
    for k, m in enumerate(widths):
        mlp = sample_mlp(derive_stream(cfg["master_seed"], trial, k, Role.MLP), spec, m)
        finite, limit = coupled_layer_fields(
            derive_stream(cfg["master_seed"], trial, k, Role.COUPLING), mlp, spec, pts
        )
        static.append(float(np.mean(np.sum((finite - limit) ** 2, axis=1))))
    traj = []
    if g["trajectory"]:
        streams = TrialStreams(cfg["master_seed"], trial)
        init = _init_cloud(cfg, trial)
        euler = model_config(cfg)
        for m in widths:
            discrete = model_config(cfg, scheme="transformer_discrete", width=m)
            _, _, err = run_coupled_pair(discrete, euler, init, streams)
            traj.append(float(err.max()))
    return static, traj


def run_wide_rate(cfg: dict, workers: int = 1) -> ExperimentResult:
    """Static coupling gap and coupled-trajectory gap as functions of the width."""
    res = ExperimentResult("wide_rate", cfg)
    widths = cfg["grids"]["widths"]
    out = _map_trials(_trial_wide, cfg, workers)
    static = np.array([o[0] for o in out])
    for trial, row in enumerate(static):
        for m, v in zip(widths, row):
            res.add(trial, "trial", curve="static", width=m, sq_gap=v)
    for j, m in enumerate(widths):
        mean, se = _mean_se(static[:, j])
        res.add(-1, "mean", curve="static", width=m, sq_gap=mean, sq_gap_se=se)
    fit = fit_rate(widths, static)
    res.fits["static"] = fit
    res.add(-1, "fit", curve="static", slope=fit.slope, intercept=fit.intercept,
            stderr_slope=fit.stderr_slope)
    if cfg["grids"]["trajectory"]:
        traj = np.array([o[1] for o in out])
        for trial, row in enumerate(traj):
            for m, v in zip(widths, row):
                res.add(trial, "trial", curve="trajectory", width=m, sq_gap=v)
        for j, m in enumerate(widths):
            mean, se = _mean_se(traj[:, j])
            res.add(-1, "mean", curve="trajectory", width=m, sq_gap=mean, sq_gap_se=se)
        tfit = fit_rate(widths, traj)
        res.fits["trajectory"] = tfit
        trend = nonincreasing_trend(traj)
        res.summary["trajectory_nonincreasing"] = trend
        res.add(-1, "fit", curve="trajectory", slope=tfit.slope, intercept=tfit.intercept,
                stderr_slope=tfit.stderr_slope, nonincreasing=int(trend))
    return res


# --------------------------------------------------------------------- chaos


def _trial_chaos(cfg: dict, trial: int):
    sizes = cfg["grids"]["sizes"]
    ref = _init_cloud(cfg, trial)
    # the N-system starts from the first N atoms of the reference cloud
    inits = [ref[:n] for n in sizes] + [ref]
    model = model_config(cfg)
    records = run_common_noise(model, inits, TrialStreams(cfg["master_seed"], trial), cfg["record_stride"])
    ref_states = records[-1].states
    out = []
    for rec in records[:-1]:
        w2sq = [w2_empirical(s, r).distance ** 2 for s, r in zip(rec.states, ref_states)]
        out.append(max(w2sq))
    return out


def run_chaos(cfg: dict, workers: int = 1) -> ExperimentResult:
    """Max-in-time squared W2 between the N-system and the reference system."""
    res = ExperimentResult("chaos", cfg)
    sizes = cfg["grids"]["sizes"]
    model_config(cfg).check_step_size()
    vals = np.array(_map_trials(_trial_chaos, cfg, workers))
    for trial, row in enumerate(vals):
        for n, v in zip(sizes, row):
            res.add(trial, "trial", n=n, n_ref=cfg["n_tokens"], max_w2_sq=v)
    medians = np.median(vals, axis=0)
    for j, n in enumerate(sizes):
        mean, se = _mean_se(vals[:, j])
        res.add(-1, "mean", n=n, n_ref=cfg["n_tokens"], max_w2_sq=mean, max_w2_sq_se=se,
                median=float(medians[j]))
    fit = fit_rate(sizes, vals)
    res.fits["chaos"] = fit
    monotone = bool(np.all(np.diff(medians) < 0))
    res.summary["median_decreasing"] = monotone
    res.add(-1, "fit", slope=fit.slope, intercept=fit.intercept, stderr_slope=fit.stderr_slope,
            median_decreasing=int(monotone))
    return res


# --------------------------------------------------------------------- sync


def _trial_sync(cfg: dict, trial: int):
    beta = cfg["grids"]["beta"]
    init = _init_cloud(cfg, trial)
    streams = TrialStreams(cfg["master_seed"], trial)
    out = []
    for scale in cfg["grids"]["scales"]:
        model = model_config(cfg, attention=attention_params(cfg, scale=scale))
        if model.scheme == "transformer_discrete":
            rec = run_transformer(model, init, streams, cfg["record_stride"])
        else:
            rec = run_euler(model, init, streams, cfg["record_stride"])
        energies = [interaction_energy(s, beta) for s in rec.states]
        medians = [cosine_stats(s)["median"] for s in rec.states]
        out.append((energies, medians))
    return out


def run_sync(cfg: dict, workers: int = 1) -> ExperimentResult:
    """Mean energy traces, cosine statistics and fitted decay rates per attention scale."""
    res = ExperimentResult("sync", cfg)
    g = cfg["grids"]
    spec = kernel_spec(cfg)
    model = model_config(cfg)
    model.check_step_size()
    layers = recorded_layers(model.depth, cfg["record_stride"])
    times = layers * model.dt
    vals = lyapunov_constants(spec)
    try:
        rate = dissipation_rate(spec, g["beta"])
        lbp, boundary, status = rate.lambda_bar_prime, rate.boundary_value, "ok"
    except NotDissipative:
        lbp, boundary, status = float("nan"), -vals.lambda_bar, "not_dissipative"
    res.summary.update(lambda_bar=vals.lambda_bar, lambda_bar_prime=lbp, boundary_value=boundary,
                       dissipation_status=status)
    out = _map_trials(_trial_sync, cfg, workers)
    window = tuple(g["fit_window"]) if g["fit_window"] is not None else None
    res.summary["scales"] = {}
    for k, scale in enumerate(g["scales"]):
        energies = np.array([o[k][0] for o in out])
        medians = np.array([o[k][1] for o in out])
        for trial in range(energies.shape[0]):
            for j, layer in enumerate(layers):
                res.add(trial, "trial", scale=scale, layer=int(layer), time=times[j],
                        energy=energies[trial, j], cos_median=medians[trial, j])
        mean_e = energies.mean(axis=0)
        se_e = energies.std(axis=0, ddof=1) / np.sqrt(energies.shape[0]) if energies.shape[0] > 1 else np.full_like(mean_e, np.nan)
        for j, layer in enumerate(layers):
            res.add(-1, "mean", scale=scale, layer=int(layer), time=times[j], energy=mean_e[j],
                    energy_se=se_e[j], cos_median=float(medians[:, j].mean()))
        fit = decay_rate_fit(EnergyTrace(g["beta"], times, mean_e), window)
        final_median = float(np.median(medians[:, -1]))
        res.summary["scales"][str(scale)] = {
            "rate": fit.rate, "r_squared": fit.r_squared, "final_median_cosine": final_median,
        }
        res.add(-1, "fit", scale=scale, rate=fit.rate, r_squared=fit.r_squared,
                lambda_bar=vals.lambda_bar, lambda_bar_prime=lbp, boundary_value=boundary,
                dissipation_status=status, final_median_cosine=final_median)
    return res


# --------------------------------------------------------------------- Lyapunov


def _chunk_lyapunov(cfg: dict, kernel_index: int, chunk: tuple[int, int]):
    g = cfg["grids"]
    k = g["kernels"][kernel_index]
    spec = KernelSpec(k["activation"], k["sigma_u"], k["sigma_w"], k["dim"])
    first, count = chunk
    est = lyapunov_estimate(
        spec, cfg["model"]["horizon"], cfg["model"]["depth"], count, g["initial_gap"],
        cfg["master_seed"], g["renorm_every"], first_trial=first,
    )
    return est.per_trial


def _lyapunov_task(cfg: dict, task):
    return _chunk_lyapunov(cfg, *task)


def run_lyapunov(cfg: dict, workers: int = 1) -> ExperimentResult:
    """Two-point Lyapunov estimates next to the analytic exponent for each kernel."""
    res = ExperimentResult("lyapunov", cfg)
    g = cfg["grids"]
    n = cfg["trials"]
    # trials are split into chunks only to spread the work; each trial's
    # stream is fixed by its index, so the chunking does not change results
    n_chunks = max(1, workers)
    bounds = np.linspace(0, n, n_chunks + 1).astype(int)
    chunks = [(int(a), int(b - a)) for a, b in zip(bounds, bounds[1:]) if b > a]
    tasks = [(i, c) for i in range(len(g["kernels"])) for c in chunks]
    if workers <= 1:
        parts = [_lyapunov_task(cfg, t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(partial(_lyapunov_task, cfg), tasks))
    res.summary["kernels"] = []
    for i, k in enumerate(g["kernels"]):
        per_trial = np.concatenate([p for (ki, _), p in zip(tasks, parts) if ki == i])
        spec = KernelSpec(k["activation"], k["sigma_u"], k["sigma_w"], k["dim"])
        lam1 = lyapunov_constants(spec).lambda_one
        mean, se = _mean_se(per_trial)
        rel = abs(mean - lam1) / abs(lam1) if lam1 != 0 else float("nan")
        res.add(-1, "mean", activation=k["activation"], dim=k["dim"], sigma_u=k["sigma_u"],
                sigma_w=k["sigma_w"], lambda_hat=mean, stderr=se, lambda_one=lam1, rel_error=rel)
        res.summary["kernels"].append(
            {"kernel": k, "lambda_hat": mean, "stderr": se, "lambda_one": lam1, "rel_error": rel}
        )
    return res


RUNNERS = {
    "kernel_table": run_kernel_table,
    "simulate": run_simulate,
    "deep_rate": run_deep_rate,
    "wide_rate": run_wide_rate,
    "chaos": run_chaos,
    "sync": run_sync,
    "lyapunov": run_lyapunov,
}


def run_experiment(cfg: dict, workers: int = 1) -> ExperimentResult:
    return RUNNERS[cfg["experiment"]](cfg, workers)
