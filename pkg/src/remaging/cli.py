"""Command-line batch runner.

Usage: ``remaging <command> [--config PATH] [--seed S] [--out DIR] ...``
with commands ``env``, ``spectral``, ``potential``, ``mixing``, ``aging``
and ``k-constant``.  A config file is INI-style: a ``[common]`` section
plus one section per command, flat ``key = value`` pairs.  Flags override
the file.  Every run writes ``manifest.json`` (resolved configuration,
package version, output checksums) into the output directory; passing that
manifest back as ``--config`` repeats the run.

Exit codes: 0 success, 2 invalid configuration, 3 budget exceeded,
4 an identity or inequality check failed.
"""

import argparse
import configparser
import csv
import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .exceptions import BudgetExceeded, ParameterError, SeparationError

log = logging.getLogger("remaging")

EXIT_OK, EXIT_CONFIG, EXIT_BUDGET, EXIT_VIOLATION = 0, 2, 3, 4

DEFAULTS = {
    "common": {"n": "8", "beta": "1.4", "alpha": "0.7", "seed": "0", "threads": "1",
               "kappa": "0.25", "C0": "6.56", "delta": "0.1", "K_ball": "9",
               "delta_shallow": "0.05", "max_N": "26"},
    "env": {"n_env": "1"},
    "spectral": {"pair_budget": str(2**28)},
    "potential": {"n_env": "1", "n_sets": "5", "random_g": "100", "max_targets": "10"},
    "mixing": {"n_samples": "10000", "k_max": "5"},
    "aging": {"n_sweep": "", "t_grid": "0.5,1,2", "lambda_grid": "0,0.5,1,2", "n_traj": "1000",
              "rn_samples": "200", "rn_exact": "32", "max_jumps": "2e11"},
    "k-constant": {"alphas": "0.3,0.5,0.7,0.9", "betas": "0.8,1.4"},
}


class Violation(Exception):
    """An identity or inequality check failed."""


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration

def load_config(command, path=None, overrides=None):
    """Resolved flat config for ``command``: defaults < file < overrides."""
    cp = configparser.ConfigParser()
    cp.optionxform = str
    cp.read_dict(DEFAULTS)
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file {path} not found")
        if str(path).endswith(".json"):
            return _from_manifest(command, path, overrides)
        try:
            cp.read(path)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from exc
    cfg = dict(cp["common"])
    if cp.has_section(command):
        cfg.update(cp[command])
    for k, v in (overrides or {}).items():
        if v is not None:
            cfg[k] = str(v)
    return cfg


def _from_manifest(command, path, overrides):
    """Resolved config stored in a previous run's ``manifest.json``."""
    try:
        m = json.loads(Path(path).read_text())
        cfg = {str(k): str(v) for k, v in m["config"].items()}
    except (ValueError, KeyError, AttributeError) as exc:
        raise ConfigError(f"{path} is not a run manifest") from exc
    if m.get("command") != command:
        raise ConfigError(f"manifest was written by {m.get('command')!r}, not {command!r}")
    for k, v in (overrides or {}).items():
        if v is not None:
            cfg[k] = str(v)
    return cfg


def _get(cfg, key, kind):
    try:
        raw = cfg[key]
        if kind is list:
            return [float(s) for s in raw.split(",") if s.strip()]
        if kind is int:
            return int(float(raw))
        return kind(raw)
    except KeyError:
        raise ConfigError(f"missing key {key!r}") from None
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {cfg.get(key)!r}") from None


def params_from(cfg, n=None, seed=None):
    from .environment import RemParams

    return RemParams(
        N=_get(cfg, "n", int) if n is None else n,
        beta=_get(cfg, "beta", float), alpha=_get(cfg, "alpha", float),
        env_seed=_get(cfg, "seed", int) if seed is None else seed,
        kappa=_get(cfg, "kappa", float), C0=_get(cfg, "C0", float), delta=_get(cfg, "delta", float),
        K_ball=_get(cfg, "K_ball", int), delta_shallow=_get(cfg, "delta_shallow", float),
        max_N=_get(cfg, "max_N", int))


def _sample(params):
    from .environment import sample_environment, validate_params

    validate_params(params)
    return sample_environment(params)


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out, command, cfg, files, status):
    m = {"command": command, "version": __version__, "config": cfg, "status": status,
         "outputs": {Path(f).name: _sha256(f) for f in files if os.path.exists(f)}}
    path = Path(out) / "manifest.json"
    path.write_text(json.dumps(m, indent=2, sort_keys=True))
    return path


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(type(o))


def _dump(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default))
    return str(path)


# ---------------------------------------------------------------------------
# commands

def cmd_env(cfg, out):
    from .environment import check_separation, save_environment, write_summary_csv

    files, summary = [], []
    base = _get(cfg, "seed", int)
    for i in range(_get(cfg, "n_env", int)):
        env = _sample(params_from(cfg, seed=base + i))
        stem = Path(out) / f"env_N{env.N}_s{base + i}"
        save_environment(env, f"{stem}.bin")
        write_summary_csv(env, f"{stem}.csv")
        files += [f"{stem}.bin", f"{stem}.csv"]
        sep = check_separation(env)
        summary.append({"env_seed": base + i, "n": env.N, "n_deep": int(len(env.deep)),
                        "deep_size_ratio": env.deep_size_ratio(), "z_ratio": env.z_ratio(),
                        "min_deep_distance": sep.min_distance, "separated": sep.separated})
    files.append(_dump(Path(out) / "env_summary.json", summary))
    print(json.dumps(summary, indent=2, default=_json_default))
    return files


def cmd_spectral(cfg, out):
    from .spectral import spectral_report

    env = _sample(params_from(cfg))
    rep = spectral_report(env, pair_budget=_get(cfg, "pair_budget", int))
    path = Path(out) / "spectral.json"
    path.write_text(rep.to_json())
    print(rep.to_json())
    if rep.bound_le_gap is False:
        raise Violation("canonical-path bound exceeds the spectral gap")
    return [str(path)]


def cmd_potential(cfg, out):
    from .potential import (PotentialReport, bound_check_appendix, effective_conductance,
                            extremal_check, mean_hitting_exact)

    p0 = params_from(cfg)
    if p0.N > 20:
        raise BudgetExceeded("potential solves are limited to N <= 20")
    reports, bad = [], []
    for i in range(_get(cfg, "n_env", int)):
        env = _sample(params_from(cfg, seed=p0.env_seed + i))
        rng = np.random.default_rng(np.random.SeedSequence([p0.env_seed + i, 23]))
        targets = env.deep if len(env.deep) else np.array([int(np.argmax(env.log_tau))])
        for x in targets[: _get(cfg, "max_targets", int)]:
            x = int(x)
            sol = mean_hitting_exact(env, x)
            ext = extremal_check(env, x, _get(cfg, "random_g", int), seed=p0.env_seed + i, sol=sol)
            for _ in range(_get(cfg, "n_sets", int)):
                k = int(rng.integers(1, env.size))
                B = rng.choice(np.delete(np.arange(env.size), x), size=k, replace=False)
                e1, e2, gap = effective_conductance(env, x, B)
                b = bound_check_appendix(env, x, B, sol=sol)
                rep = PotentialReport(x, int(len(B)), e1, gap, sol.e_nu, ext.extremal_residual, b.slack)
                reports.append(dict(asdict(rep), env_seed=p0.env_seed + i))
                if ext.extremal_residual >= 1e-8 or ext.n_violations or gap >= 1e-10 or b.slack < 0:
                    bad.append(reports[-1])
    files = [_dump(Path(out) / "potential.json", reports)]
    print(f"{len(reports)} instances, {len(bad)} violations")
    if bad:
        raise Violation(f"{len(bad)} potential-theory checks failed")
    return files


def cmd_mixing(cfg, out):
    from .spectral import (DENSE_MAX_N, build_generator, kernel_spectral, mixing_scale,
                           sample_strong_stationary_time)

    env = _sample(params_from(cfg))
    if env.N > DENSE_MAX_N:
        raise BudgetExceeded(f"exact kernels are limited to N <= {DENSE_MAX_N}")
    gen = build_generator(env)
    m_star, eig = mixing_scale(env, gen)
    P = kernel_spectral(gen, env.nu, m_star, eig)
    n = _get(cfg, "n_samples", int)
    s = sample_strong_stationary_time(env.nu, P, m_star, "stationary", _get(cfg, "seed", int), n)
    counts = np.bincount(s.end_state, minlength=env.size)
    tv = 0.5 * float(np.abs(counts / n - env.nu).sum())
    surv = [{"k": k, "empirical": float(np.mean(s.blocks >= k)), "theory": math.exp(-(k - 1))}
            for k in range(1, _get(cfg, "k_max", int) + 1)]
    rep = {"n": env.N, "m_star": m_star, "m_N": env.scales.m_N, "gap": float(eig[0][1]),
           "tv": tv, "survival": surv, "mean_blocks": float(s.blocks.mean())}
    print(json.dumps(rep, indent=2))
    return [_dump(Path(out) / "mixing.json", rep)]


def _aging_one(cfg, N, out):
    from .analysis import (CSV_COLUMNS, empirical_laplace, estimate_RN, local_time_functional,
                           shallow_contribution)
    from .chain import check_jump_budget, simulate_clocks

    env = _sample(params_from(cfg, n=N))
    if len(env.deep) == 0:
        raise Violation(f"N={N}: empty deep set")
    t_grid = np.array(sorted(_get(cfg, "t_grid", list)))
    lam = np.array(_get(cfg, "lambda_grid", list))
    n_traj = _get(cfg, "n_traj", int)
    seed = _get(cfg, "seed", int)
    R = estimate_RN(env, _get(cfg, "rn_samples", int), seed, n_exact=_get(cfg, "rn_exact", int))
    check_jump_budget(env, t_grid.max() * R.R_N, n_traj, _get(cfg, "max_jumps", float))
    batch = simulate_clocks(env, t_grid * R.R_N, n_traj, seed)
    lap = empirical_laplace(env, R.R_N, batch, t_grid, lam)
    LN = local_time_functional(env, R.R_N, t_grid, batch)
    k1 = int(np.argmin(np.abs(t_grid - 1.0)))
    sh = shallow_contribution(env, R.R_N, batch, t=float(t_grid[k1]), k=k1)
    rows = list(lap.rows())
    summary = {"n": N, "R_N": R.summary(), "L_N_mean": LN.mean, "L_N_var": LN.var,
               "shallow_median": sh.median, "shallow_mean": sh.mean,
               "very_shallow_bound_ok": sh.very_shallow_ok, "t_grid": t_grid}
    return rows, summary, CSV_COLUMNS


def cmd_aging(cfg, out):
    sweep = [int(v) for v in _get(cfg, "n_sweep", list)] or [_get(cfg, "n", int)]
    rows, summaries, cols = [], [], None
    for N in sweep:
        r, s, cols = _aging_one(cfg, N, out)
        rows += r
        summaries.append(s)
        log.info("N=%d R_N=%.4g", N, s["R_N"]["R_N"])
    csv_path = Path(out) / "aging.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        w.writerows(rows)
    files = [str(csv_path), _dump(Path(out) / "aging_summary.json", summaries)]
    if any(abs(r["empirical"] - 1.0) > 0 for r in rows if r["lambda"] == 0):
        raise Violation("lambda = 0 column differs from 1")
    return files


def cmd_k_constant(cfg, out):
    from .analysis import constant_K

    rows = []
    for a in _get(cfg, "alphas", list):
        for b in _get(cfg, "betas", list):
            k = constant_K(a, b)
            rows.append({"alpha": a, "beta": b, "K": k.value, "gamma_1_minus_alpha": k.reference,
                         "abs_error": k.abs_error})
    path = Path(out) / "k_constant.csv"
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    for r in rows:
        print(f"alpha={r['alpha']:.2f} beta={r['beta']:.2f} K={r['K']:.12f} "
              f"Gamma(1-alpha)={r['gamma_1_minus_alpha']:.12f}")
    if max(r["abs_error"] for r in rows) >= 1e-8:
        raise Violation("quadrature disagrees with Gamma(1 - alpha)")
    return [str(path)]


COMMANDS = {"env": cmd_env, "spectral": cmd_spectral, "potential": cmd_potential,
            "mixing": cmd_mixing, "aging": cmd_aging, "k-constant": cmd_k_constant}


def build_parser():
    ap = argparse.ArgumentParser(prog="remaging", description=__doc__.split("\n")[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", help="INI-style configuration file")
    ap.add_argument("--seed", type=int, help="experiment seed")
    ap.add_argument("--out", default=".", help="output directory")
    ap.add_argument("--threads", type=int,
                    help="worker count (recorded; kernels run serially, results do not depend on it)")
    ap.add_argument("--n", type=int, help="hypercube dimension N")
    ap.add_argument("--beta", type=float)
    ap.add_argument("--alpha", type=float)
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    overrides = {"seed": args.seed, "threads": args.threads, "n": args.n, "beta": args.beta,
                 "alpha": args.alpha}
    out = Path(args.out)
    try:
        cfg = load_config(args.command, args.config, overrides)
        threads = _get(cfg, "threads", int)
        if threads < 1:
            raise ConfigError("threads must be >= 1")
        out.mkdir(parents=True, exist_ok=True)
        params_from(cfg)  # fail early on malformed numbers
    except (ConfigError, ParameterError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    status, code, files = "ok", EXIT_OK, []
    try:
        files = COMMANDS[args.command](cfg, out)
    except (ConfigError, ParameterError) as exc:
        cond = getattr(exc, "condition", None)
        print(f"invalid configuration: {exc}" + (f" [{cond}]" if cond else ""), file=sys.stderr)
        status, code = "invalid-config", EXIT_CONFIG
    except BudgetExceeded as exc:
        print(f"budget exceeded: {exc}", file=sys.stderr)
        status, code = "budget-exceeded", EXIT_BUDGET
    except (Violation, SeparationError) as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        status, code = "violation", EXIT_VIOLATION
    write_manifest(out, args.command, cfg, files, status)
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
