"""Experiment drivers behind the ``metagap`` command line.

Each driver takes an ``ExperimentSpec`` and returns an ``Artifacts`` bundle of
named CSV tables and JSON documents; ``cli`` writes them to disk. Drivers only
use seeded generators, so a fixed spec always produces byte-identical files.
"""

from concurrent.futures import ThreadPoolExecutor
import copy
from dataclasses import dataclass, field
import io
import csv
import json
import math
from pathlib import Path

import numpy as np

from . import closedform as cf
from . import empirical as emp
from . import montecarlo as mc
from . import neuron as nn
from ._validation import ValidationError, as_rng, check_count, spawn
from .taskenv import (
    FinitePool,
    HardEasyMixture,
    LinearTask,
    TaskEnvironment,
    make_two_task_env,
    sample_dataset,
    split_episodes,
)

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


DEFAULTS = {
    "fig-hardness": {
        "params": {"rho_easy": 1.0, "dim": 10, "noise_var": 0.01, "m_values": [100, 2000],
                   "n_outer": 25, "nal_meta_lr": 0.025, "iterations": 2000},
        "sweep": {"name": "rho_hard",
                  "values": [1e-4, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]},
        "empirical_rho": [0.1, 0.5, 0.9],
        "seeds": [0, 1, 2],
    },
    "fig-geography": {
        "params": {"rho_hard": 0.1, "rho_easy": 1.0, "dim": 10, "m": 100_000,
                   "n_outer": 25, "nal_meta_lr": 0.025, "maml_meta_lr": 0.5, "iterations": 3000,
                   "regimes": [[0.5, 10.0], [10.0, 0.5]]},
        "sweep": {"name": "R", "values": [1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0]},
        "empirical": True,
        "seeds": [0, 1, 2],
    },
    "fig-envgrid": {
        "params": {"rho_hard": 0.1, "rho_easy": 0.9, "dim": 10, "m": 500, "samples": 100},
        "panels": {
            "a": {"rho_hard": 0.9, "center_dist": 2.0, "spread_hard": 0.1, "spread_easy": 1.0},
            "b": {"center_dist": 0.5, "spread_hard": 0.1, "spread_easy": 1.0},
            "c": {"center_dist": 2.0, "spread_hard": 2.0, "spread_easy": 1.0},
            "d": {"center_dist": 2.0, "spread_hard": 0.1, "spread_easy": 1.0},
        },
        "seeds": [0],
    },
    "convergence": {
        "environment": None,
        "params": {"rho_hard": 0.1, "rho_easy": 1.0, "center_dist": 2.0,
                   "spread_hard": 1.0, "spread_easy": 1.0, "dim": 10, "noise_var": 0.01,
                   "alpha": 1.0, "n": 4096, "n_inner": 32, "n_outer": 32, "pool_tasks": 8},
        "sweep": [{"name": "T", "values": [8, 32, 128, 512]},
                  {"name": "tau", "values": [8, 32, 128, 512]}],
        "seeds": list(range(20)),
    },
    "neuron": {
        "params": {"activation": "softplus", "n_samples": 20_000, "grid": [-3.0, 3.0, 41],
                   "grid_alpha": 1.5, "ratio_alpha": 0.2, "tol": 1e-6, "max_iters": 3000,
                   "stationary_samples": 100_000, "hard_var": 0.5,
                   "equal": [[1.5, 1.5], [-1.5, 1.5], [1.5, -1.5], [-1.5, -1.5]],
                   "hard": [2.0, 2.0], "easy": [[-1.0, 0.5], [0.5, -1.0], [-1.0, -1.0]]},
        "seeds": [0, 1, 2, 3, 4],
    },
    "upweight": {
        "environment": None,
        "params": {"rho_hard": 0.1, "rho_easy": 1.0, "center_dist": 2.0,
                   "spread_hard": 1.0, "spread_easy": 1.0, "dim": 10, "noise_var": 0.01,
                   "alpha": 1.0, "n_inner": 500, "n_outer": 25, "iterations": 4000,
                   "tasks_per_iter": 10, "nal_meta_lr": 0.025, "maml_meta_lr": 0.05},
        "sweep": {"name": "zeta", "values": [1.0, 2.0, 5.0, 10.0]},
        "seeds": [0, 1, 2, 3, 4],
    },
    "verify": {
        "environment": None,
        "params": {"moment_trials": 2_000_000, "risk_trials": 100_000, "pools": 10},
        "seeds": [0],
    },
}

COMMANDS = tuple(DEFAULTS)


@dataclass
class ExperimentSpec:
    name: str
    params: dict
    seeds: list
    trials: int = 100_000
    environment: object = None
    sweep: object = None
    extra: dict = field(default_factory=dict)
    output_path: str = "."

    def __post_init__(self):
        if not self.seeds:
            raise ValidationError("seeds must be nonempty")
        for s in self.seeds:
            check_count(s, "seed", minimum=0)
        sweeps = self.sweep if isinstance(self.sweep, list) else [self.sweep]
        for sw in sweeps:
            if sw is not None and not sw.get("values"):
                raise ValidationError(f"sweep {sw.get('name')!r} needs at least one value")

    def env(self):
        """The spec's environment (inline document or path to a JSON file), if any."""
        src = self.environment
        if src is None:
            return None
        if isinstance(src, str):
            try:
                text = Path(src).read_text()
            except OSError as exc:
                raise ValidationError(f"cannot read environment file {src!r}: {exc}") from exc
            return TaskEnvironment.from_json(text)
        if isinstance(src, dict):
            return TaskEnvironment.from_json(json.dumps(src))
        raise ValidationError("environment must be a JSON document or a file path")


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_spec_file(path):
    p = Path(path)
    try:
        raw = p.read_bytes()
    except OSError as exc:
        raise ValidationError(f"cannot read spec file {path!r}: {exc}") from exc
    try:
        if p.suffix.lower() == ".toml":
            return tomllib.loads(raw.decode())
        return json.loads(raw)
    except (ValueError, UnicodeDecodeError) as exc:
        raise ValidationError(f"spec file {path!r} is not valid: {exc}") from exc


def build_spec(command, overrides=None, seed=None, out=None):
    """Embedded defaults for ``command`` updated with ``overrides``.

    ``seed`` shifts every seed in the list by the same base offset, keeping
    the number of repetitions.
    """
    if command not in DEFAULTS:
        raise ValidationError(f"unknown command {command!r}")
    doc = _merge(DEFAULTS[command], overrides or {})
    known = {"params", "seeds", "trials", "environment", "sweep", "name", "output_path"}
    seeds = list(doc.get("seeds", [0]))
    if seed is not None:
        seeds = [seed + i for i in range(len(seeds))]
    return ExperimentSpec(
        name=doc.get("name", command), params=doc.get("params", {}), seeds=seeds,
        trials=doc.get("trials", 100_000), environment=doc.get("environment"),
        sweep=doc.get("sweep"), extra={k: v for k, v in doc.items() if k not in known},
        output_path=out or doc.get("output_path", "."))


@dataclass
class Artifacts:
    tables: dict = field(default_factory=dict)
    documents: dict = field(default_factory=dict)
    passed: bool = True

    def add_table(self, name, header, rows):
        self.tables[name] = (list(header), [list(r) for r in rows])


def fmt(value):
    """Stable text form for CSV cells: 12 significant digits, blank for missing."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        if math.isnan(value):
            return "nan"
        return f"{float(value):.12g}"
    return str(value)


def render_csv(header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for r in rows:
        writer.writerow([fmt(v) for v in r])
    return buf.getvalue()


def _pmap(fn, items):
    """Order-preserving map over ``METAGAP_THREADS`` worker threads."""
    items = list(items)
    workers = min(mc.worker_count(), max(len(items), 1))
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(fn, items))


def _mean_ci(values):
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        return float(v.mean()), float("nan")
    return float(v.mean()), float(1.96 * v.std(ddof=1) / np.sqrt(v.size))


def _mixture(p, **kw):
    keys = ("rho_hard", "rho_easy", "center_dist", "spread_hard", "spread_easy", "dim")
    vals = {k: kw.get(k, p.get(k)) for k in keys}
    return HardEasyMixture(**vals, noise_var=kw.get("noise_var", p.get("noise_var", 0.0)))


def cmd_fig_hardness(spec):
    p = spec.params
    rho_e, d = p["rho_easy"], p["dim"]
    alpha = p.get("alpha", 1.0 / rho_e)
    w1, w2 = np.ones(d), -np.ones(d)
    emp_rho = spec.extra.get("empirical_rho", [])
    rows = []
    for m in p["m_values"]:
        for rho_h in spec.sweep["values"]:
            env = make_two_task_env(rho_h, rho_e, w1, w2, p["noise_var"])
            w_nal = cf.population_nal(env)
            w_maml = cf.population_maml(env, alpha, m)
            row = [rho_h, m, w_nal[0], w_maml[0],
                   cf.excess_risk_nal(env, alpha, m).value,
                   cf.excess_risk_maml(env, alpha, m, m).value]
            if rho_h in emp_rho:
                row += _empirical_pair(env, p, alpha, m, spec.seeds)
            else:
                row += [None] * 4
            rows.append(row)
    art = Artifacts()
    art.add_table("hardness.csv", ["rho_H", "m", "coord1_nal", "coord1_maml", "risk_nal",
                                   "risk_maml", "emp_risk_nal_mean", "emp_risk_nal_ci",
                                   "emp_risk_maml_mean", "emp_risk_maml_ci"], rows)
    return art


def _empirical_pair(env, p, alpha, m, seeds):
    """SGD final-iterate excess risks for NAL and MAML, as (mean, 95% CI) pairs."""
    n_outer = p["n_outer"]
    iters = p["iterations"]
    maml_lr = p.get("maml_meta_lr", m / 10_000)
    nal_cfg = emp.SgdConfig(p["nal_meta_lr"], 0.0, iters, 1, 1.0, m + n_outer)
    maml_cfg = emp.SgdConfig(maml_lr, alpha, iters, 1, 1.0, m + n_outer)

    def one(seed):
        r_nal, r_maml = spawn(seed, 2)
        w_n = emp.sgd_nal(env, nal_cfg, r_nal, sampler="wishart").weights
        w_m = emp.sgd_maml(env, maml_cfg, m, n_outer, r_maml, sampler="wishart").weights
        return (cf.excess_risk_at(env, w_n, alpha, m).value,
                cf.excess_risk_at(env, w_m, alpha, m).value)

    res = np.array(_pmap(one, seeds))
    return [*_mean_ci(res[:, 0]), *_mean_ci(res[:, 1])]


def cmd_fig_geography(spec):
    p = spec.params
    alpha = p.get("alpha", 1.0 / p["rho_easy"])
    m = p["m"]
    rows = []
    for ratio_h, ratio_e in p["regimes"]:
        for R in spec.sweep["values"]:
            if R <= 0:
                raise ValidationError("geography regimes need R > 0")
            env = _mixture(p, center_dist=R, spread_hard=R ** 2 / ratio_h,
                           spread_easy=R ** 2 / ratio_e)
            nal, maml = cf.mixture_excess_risks(env, alpha, m)
            row = [R, f"{ratio_h:g}/{ratio_e:g}", nal, maml, nal / maml,
                   cf.geography_ratio_approx(R, env.spread_hard)]
            if spec.extra.get("empirical", False):
                e = _empirical_pair(env, p, alpha, m, spec.seeds)
                row += [e[0], e[2]]
            else:
                row += [None, None]
            rows.append(row)
    art = Artifacts()
    art.add_table("geography.csv", ["R", "regime", "risk_nal_cf", "risk_maml_cf", "ratio_cf",
                                    "ratio_approx", "emp_nal", "emp_maml"], rows)
    return art


def cmd_fig_envgrid(spec):
    p = spec.params
    art = Artifacts()
    summary = {}
    rng = as_rng(spec.seeds[0])
    for name, panel in sorted(spec.extra["panels"].items()):
        env = _mixture({**p, **panel})
        alpha = p.get("alpha", 1.0 / env.rho_easy)
        m = p["m"]
        w_nal = cf.population_nal(env)
        w_maml = cf.population_maml(env, alpha, m)
        nal, maml = cf.mixture_excess_risks(env, alpha, m)
        rows = []
        for i in range(check_count(p["samples"], "samples", minimum=0)):
            t = env.sample_task(rng)
            rows.append([t.label, i, *t.weights_star])
        rows.append(["nal", 0, *w_nal])
        rows.append(["maml", 0, *w_maml])
        art.add_table(f"envgrid_{name}.csv",
                      ["role", "index", *[f"coord_{k}" for k in range(env.dim)]], rows)
        summary[name] = {"environment": env.to_dict(), "alpha": alpha, "m": m,
                         "w_nal": w_nal.tolist(), "w_maml": w_maml.tolist(),
                         "risk_nal": nal, "risk_maml": maml,
                         "ratio": nal / maml if maml > 0 else None}
    art.documents["envgrid.json"] = summary
    return art


def _log_slope(xs, ys):
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])


def convergence_env(spec):
    env = spec.env()
    if env is None:
        env = _mixture(spec.params)
    return env


def convergence_distances(spec, axis, value):
    """Mean distances (NAL, MAML) to the population solutions over the spec's seeds.

    ``T``: ``value`` fresh tasks with ``n`` rows each, compared with the
    environment's population solutions. ``tau``: a fixed pool of
    ``pool_tasks`` tasks with ``value`` episodes each, compared with the pool's
    population solutions.
    """
    p = spec.params
    env = convergence_env(spec)
    alpha, n2, n1 = p["alpha"], p["n_inner"], p["n_outer"]
    if axis == "T":
        target_nal = cf.population_nal(env)
        target_maml = cf.population_maml(env, alpha, n2)
    elif axis != "tau":
        raise ValidationError(f"unknown sweep axis {axis!r}; expected 'T' or 'tau'")
    value = check_count(value, axis)

    def one(seed):
        rng = as_rng(seed)
        if axis == "T":
            tasks = [env.sample_task(rng) for _ in range(value)]
            rows = p["n"] - p["n"] % (n1 + n2)
            pool_nal, pool_maml = target_nal, target_maml
        else:
            tasks = [env.sample_task(rng) for _ in range(p["pool_tasks"])]
            rows = value * (n1 + n2)
            pool = FinitePool(tasks)
            pool_nal = cf.population_nal(pool)
            pool_maml = cf.population_maml(pool, alpha, n2)
        nal_rows = p["n"] if axis == "T" else rows
        data = [sample_dataset(t, nal_rows, rng) for t in tasks]
        w_nal = emp.solve_nal_exact(data).weights
        eps = [split_episodes(_prefix(ds, rows), n2, n1) for ds in data]
        w_maml = emp.solve_maml_exact(eps, alpha).weights
        return np.linalg.norm(w_nal - pool_nal), np.linalg.norm(w_maml - pool_maml)

    res = np.array(_pmap(one, spec.seeds))
    return float(res[:, 0].mean()), float(res[:, 1].mean())


def _prefix(ds, rows):
    return type(ds)(ds.inputs[:rows], ds.labels[:rows])


def cmd_convergence(spec):
    sweeps = spec.sweep if isinstance(spec.sweep, list) else [spec.sweep]
    rows, slopes = [], {}
    for sw in sweeps:
        axis = sw["name"]
        if axis not in ("T", "tau"):
            raise ValidationError(f"unknown sweep axis {axis!r}; expected 'T' or 'tau'")
        dists = [convergence_distances(spec, axis, v) for v in sw["values"]]
        for v, (dn, dm) in zip(sw["values"], dists):
            rows.append([axis, v, dn, dm, len(spec.seeds)])
        if len(sw["values"]) >= 2:
            xs = sw["values"]
            slopes[axis] = (_log_slope(xs, [d[0] for d in dists]),
                            _log_slope(xs, [d[1] for d in dists]))
            rows.append([f"slope_{axis}", None, *slopes[axis], len(spec.seeds)])
    art = Artifacts()
    art.add_table("convergence.csv", ["axis", "value", "dist_nal", "dist_maml", "seeds"], rows)
    return art


def neuron_environments(p):
    """Equal-hardness tasks, hard/easy tasks and the two-task hard/easy pair."""
    act = p["activation"]
    equal = [nn.NeuronTask(np.array(w, float), act, 1.0) for w in p["equal"]]
    hard = nn.NeuronTask(np.array(p["hard"], float), act, p["hard_var"], label="hard")
    easy = [nn.NeuronTask(np.array(w, float), act, 1.0, label="easy") for w in p["easy"]]
    return {"equal": equal, "hardeasy": [hard, *easy], "pair": [hard, easy[-1]]}


def neuron_diagnostics(spec):
    """Stationary-point diagnostics per seed: NAL norm equality and MAML ratio checks."""
    p = spec.params
    envs = neuron_environments(p)
    pair = envs["pair"]
    ns, tol, iters = p["stationary_samples"], p["tol"], p["max_iters"]
    a = p["ratio_alpha"]

    def one(seed):
        w0 = 0.1 * as_rng(seed + 10_000).standard_normal((2, 1))
        r_nal = nn.find_stationary(pair, nn.NAL, 0.0, w0, tol, iters, ns, seed)
        r_maml = nn.find_stationary(pair, nn.MAML, a, w0, tol, iters, ns, seed)
        bh = nn.estimate_hessian_bounds(pair[0], r_maml.point, ns, seed)
        be = nn.estimate_hessian_bounds(pair[1], r_maml.point, ns, seed)
        check = nn.check_gradient_ratio(r_maml, bh, be, a)
        g1, g2 = r_nal.grad_norms
        return {"seed": seed, "nal": r_nal.to_dict(),
                "nal_norm_rel_diff": abs(g1 - g2) / max(g1, g2),
                "maml": r_maml.to_dict(), "bounds_hard": vars(bh), "bounds_easy": vars(be),
                "ratio_check": check.to_dict()}

    return _pmap(one, spec.seeds)


def cmd_neuron(spec):
    p = spec.params
    envs = neuron_environments(p)
    art = Artifacts()
    seed = spec.seeds[0]
    grids = {}
    for env_name in ("equal", "hardeasy"):
        for kind in (nn.NAL, nn.MAML):
            alpha = p["grid_alpha"] if kind == nn.MAML else 0.0
            g = nn.landscape_grid(envs[env_name], kind, alpha, tuple(p["grid"]),
                                  p["n_samples"], seed)
            stem = f"neuron_{env_name}_{kind.lower()}"
            art.tables[f"{stem}.csv"] = g.to_csv()
            art.documents[f"{stem}.json"] = {**g.metadata(), "environment": env_name,
                                             "argmin": g.argmin_point().tolist()}
            grids[(env_name, kind)] = g
    hard = np.array(p["hard"], float)
    he = {k: grids[("hardeasy", k)].argmin_point() for k in (nn.NAL, nn.MAML)}
    diags = neuron_diagnostics(spec)
    art.documents["neuron_stationary.json"] = {
        "equal_argmin_match": bool(np.array_equal(grids[("equal", nn.NAL)].argmin_point(),
                                                  grids[("equal", nn.MAML)].argmin_point())),
        "hard_distance_nal": float(np.linalg.norm(he[nn.NAL] - hard)),
        "hard_distance_maml": float(np.linalg.norm(he[nn.MAML] - hard)),
        "seeds": diags,
    }
    return art


def upweight_env(spec):
    env = spec.env()
    if env is None:
        env = _mixture(spec.params)
    if not isinstance(env, HardEasyMixture):
        raise ValidationError("upweight needs a HardEasyMixture environment")
    return env


def upweight_runs(spec, zetas=None, include_maml=True):
    """Per-method lists of (mean coordinate, test error) over the spec's seeds.

    Test error is the closed-form post-adaptation loss ``F_m`` of the final
    iterate with ``m = n_inner``.
    """
    p = spec.params
    env = upweight_env(spec)
    alpha, n2, n1 = p["alpha"], p["n_inner"], p["n_outer"]
    zetas = spec.sweep["values"] if zetas is None else zetas
    floor = cf.noise_floor(env, alpha, n2)

    def score(w):
        return float(w.mean()), cf.excess_risk_at(env, w, alpha, n2).value + floor

    jobs = [("NAL", z) for z in zetas] + ([("MAML", 1.0)] if include_maml else [])

    def one(job_seed):
        (method, z), seed = job_seed
        rng = as_rng(seed)
        if method == "NAL":
            cfg = emp.SgdConfig(p["nal_meta_lr"], 0.0, p["iterations"], p["tasks_per_iter"],
                                z, n1 + n2)
            return score(emp.sgd_nal(env, cfg, rng, sampler="wishart").weights)
        cfg = emp.SgdConfig(p["maml_meta_lr"], alpha, p["iterations"], p["tasks_per_iter"],
                            1.0, n1 + n2)
        return score(emp.sgd_maml(env, cfg, n2, n1, rng, sampler="wishart").weights)

    flat = [(j, s) for j in jobs for s in spec.seeds]
    res = _pmap(one, flat)
    out = {}
    for (job, _), r in zip(flat, res):
        out.setdefault(job, []).append(r)
    return out


def cmd_upweight(spec):
    runs = upweight_runs(spec)
    rows = []
    for (method, z), vals in runs.items():
        v = np.array(vals)
        rows.append([method, z if method == "NAL" else None, v[:, 0].mean(), v[:, 0].std(ddof=1),
                     v[:, 1].mean(), v[:, 1].std(ddof=1), len(vals)])
    art = Artifacts()
    art.add_table("upweight.csv", ["method", "zeta", "mean_coord", "mean_coord_sd",
                                   "test_error", "test_error_sd", "seeds"], rows)
    return art


def random_pool(rng, max_tasks=4, max_dim=4):
    """Random finite pool with SPD covariances, labels and a safe step size."""
    d = int(rng.integers(2, max_dim + 1))
    k = int(rng.integers(2, max_tasks + 1))
    tasks = []
    top = 0.0
    for i in range(k):
        q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        ev = rng.uniform(0.2, 1.0, d)
        top = max(top, ev.max())
        cov = (q * ev) @ q.T
        tasks.append(LinearTask(rng.standard_normal(d), 0.5 * (cov + cov.T),
                                float(rng.uniform(0, 0.1))))
    probs = rng.dirichlet(np.ones(k))
    probs = probs / probs.sum()
    pool = FinitePool(tasks, probs)
    alpha = float(rng.uniform(0.1, 1.0) / top)
    m = int(rng.integers(5, 41))
    return pool, alpha, m


def _check(name, ok, **details):
    return {"property": name, "passed": bool(ok), **details}


def cmd_verify(spec):
    """Invariant suite; ``passed`` is false if any property fails."""
    p = spec.params
    seed = spec.seeds[0]
    rng = as_rng(seed)
    results = []

    cov = np.diag([1.0, 2.0, 0.5])
    a = np.array([[1.0, 0.3, 0.0], [0.3, 2.0, -0.5], [0.0, -0.5, 1.0]])
    rep = mc.verify_lemma4(cov, a, 5, p["moment_trials"], rng)
    results.append(_check("fourth_moment_random", rep.within(5.0), max_z=rep.max_z,
                          max_abs_err=rep.max_abs_err))
    rep = mc.verify_lemma4(np.eye(3), np.eye(3), 5, p["moment_trials"], rng)
    expected = np.allclose(rep.analytic, (1 + 4 / 5) * np.eye(3), atol=1e-12)
    results.append(_check("fourth_moment_identity", rep.within(5.0) and expected, max_z=rep.max_z))

    worst = 0.0
    for _ in range(p["pools"]):
        pool, alpha, m = random_pool(rng)
        for w, risk in ((cf.population_nal(pool), cf.excess_risk_nal(pool, alpha, m)),
                        (cf.population_maml(pool, alpha, m),
                         cf.excess_risk_maml(pool, alpha, m, m))):
            est = mc.estimate_excess(pool, w, alpha, m, p["risk_trials"], rng)
            worst = max(worst, abs(est.mean - risk.value) / est.stderr)
    results.append(_check("finite_pool_oracle", worst <= 3.0, max_z=worst))

    pool, alpha, m = random_pool(rng)
    mean, se = mc.estimate_q_moment(pool.tasks[0].covariance, alpha, m,
                                    p["risk_trials"], rng)
    q = cf.q_matrix(pool.tasks[0].covariance, alpha, m).matrix
    z = float(np.max(np.abs(mean - q) / se))
    results.append(_check("q_moment_identity", z <= 5.0, max_z=z))

    results.append(_check("maml_episode_gradient", _fd_linear(rng) < 1e-4))
    results.append(_check("neuron_gradient", _fd_neuron(rng) < 1e-4))

    gaps = []
    for _ in range(5):
        pool, _, m = random_pool(rng)
        gaps.append(np.abs(cf.population_maml(pool, 0.0, m) - cf.population_nal(pool)).max())
        gaps.append(abs(cf.excess_risk_maml(pool, 0.0, m, m).value
                        - cf.excess_risk_nal(pool, 0.0, m).value))
    results.append(_check("alpha_zero_collapse", max(gaps) < 1e-12, max_gap=float(max(gaps))))

    d = 10
    e1 = make_two_task_env(0.3, 1.0, np.ones(d), -np.ones(d))
    e2 = make_two_task_env(0.3, 1.0, -np.ones(d), np.ones(d))
    r1 = (cf.excess_risk_nal(e1, 1.0, 200).value, cf.excess_risk_maml(e1, 1.0, 200, 200).value)
    r2 = (cf.excess_risk_nal(e2, 1.0, 200).value, cf.excess_risk_maml(e2, 1.0, 200, 200).value)
    results.append(_check("two_task_symmetry", np.allclose(r1, r2, rtol=1e-12, atol=0)))

    env = spec.env()
    if env is not None:
        round_trip = TaskEnvironment.from_json(env.to_json()).to_dict() == env.to_dict()
        results.append(_check("environment_round_trip", round_trip, kind=env.kind))

    art = Artifacts()
    art.passed = all(r["passed"] for r in results)
    art.documents["verify.json"] = {"seed": seed, "passed": art.passed, "results": results}
    return art


def _fd_linear(rng, points=20, h=1e-5):
    worst = 0.0
    env = make_two_task_env(0.3, 1.0, np.ones(4), -np.ones(4), 0.05)
    for _ in range(points):
        task = env.sample_task(rng)
        (ep,) = split_episodes(sample_dataset(task, 15, rng), 8, 7)
        w = rng.standard_normal(4)
        alpha = float(rng.uniform(0, 0.5))
        g = emp.maml_episode_grad(w, ep, alpha)
        fd = np.array([(emp.maml_episode_loss(w + h * e, ep, alpha)
                        - emp.maml_episode_loss(w - h * e, ep, alpha)) / (2 * h)
                       for e in np.eye(4)])
        worst = max(worst, np.linalg.norm(g - fd) / max(np.linalg.norm(g), 1e-8))
    return worst


def _fd_neuron(rng, points=20, h=1e-5, n=2000):
    worst = 0.0
    acts = ("softplus", "sigmoid", "tanh")
    for i in range(points):
        task = nn.NeuronTask(rng.standard_normal((3, 2)), acts[i % 3])
        w = rng.standard_normal((3, 2))
        g = nn.neuron_grad(task, w, n, 7)
        fd = np.zeros_like(w)
        for idx in np.ndindex(w.shape):
            e = np.zeros_like(w)
            e[idx] = h
            fd[idx] = (nn.neuron_loss(task, w + e, n, 7) - nn.neuron_loss(task, w - e, n, 7)) / (2 * h)
        worst = max(worst, np.linalg.norm(g - fd) / max(np.linalg.norm(g), 1e-8))
    return worst


RUNNERS = {
    "fig-hardness": cmd_fig_hardness,
    "fig-geography": cmd_fig_geography,
    "fig-envgrid": cmd_fig_envgrid,
    "convergence": cmd_convergence,
    "neuron": cmd_neuron,
    "upweight": cmd_upweight,
    "verify": cmd_verify,
}


def run(command, spec):
    return RUNNERS[command](spec)
