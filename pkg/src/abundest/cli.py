"""Command-line front end: fit, ci, test, simulate and cross-validate.

Count and design tables are CSV with a header row of taxon (or column)
names and a sample-ID first column; options live in a YAML config;
results are written as JSON records with a schema version.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys

import numpy as np
import yaml

from .inference import (BootstrapConfig, BootstrapError, TestSpec,
                        bootstrap_params, lrt, marginal_ci)
from .model import (CountMatrix, DesignSet, DomainError, ModelSpec, ParamSet,
                    ShapeError, make_mask, rmse)
from .reweight import WeightTable
from .simulate import SimScenario, analysis_spec, simulate
from .solver import SolverError, SolverOptions, fit

SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_SOLVER = 3
EXIT_INFERENCE = 4


class InputError(ValueError):
    """Invalid file contents or inconsistent configuration."""


# ---------------------------------------------------------------------------
# file formats


def read_table(path):
    """CSV table with header and sample-ID first column -> (ids, cols, array)."""
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InputError(f"{path}: empty file") from None
        cols = header[1:]
        ids, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise InputError(
                    f"{path}: row {lineno} has {len(row)} fields, "
                    f"expected {len(header)}")
            ids.append(row[0])
            try:
                rows.append([float(x) for x in row[1:]])
            except ValueError as exc:
                raise InputError(f"{path}: row {lineno}: {exc}") from exc
    if not rows:
        raise InputError(f"{path}: no data rows")
    return ids, cols, np.array(rows)


def write_table(path, ids, cols, data):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id"] + list(cols))
        for sid, row in zip(ids, np.asarray(data)):
            writer.writerow([sid] + [repr(float(x)) for x in row])


def write_json(path, payload):
    payload = dict(payload)
    payload["schema_version"] = SCHEMA_VERSION
    text = json.dumps(payload, sort_keys=True, indent=1, default=_tolist)
    if path is None or path == "-":
        sys.stdout.write(text + "\n")
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")


def _tolist(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj)!r}")


# ---------------------------------------------------------------------------
# config handling


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = yaml.safe_load(fh)
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from exc
    except yaml.YAMLError as exc:
        raise InputError(f"{path}: invalid YAML: {exc}") from exc
    if not isinstance(cfg, dict):
        raise InputError(f"{path}: config must be a mapping")
    return cfg


def _mask_from_config(cfg, J, K, K_tilde, p_cov, n_groups):
    m = cfg.get("mask", {})
    known_p = {int(k): np.asarray(v, dtype=float)
               for k, v in (m.get("known_p") or {}).items()}
    known_pt = {int(k): np.asarray(v, dtype=float)
                for k, v in (m.get("known_p_tilde") or {}).items()}
    fixed_beta = {(int(q), int(j)): float(v)
                  for (q, j), v in
                  {tuple(k.split(",")): v
                   for k, v in (m.get("fixed_beta") or {}).items()}.items()}
    ref = m.get("reference_taxon")
    return make_mask(
        J, K, K_tilde, p_cov, n_groups,
        known_p=known_p,
        zero_p=[tuple(e) for e in (m.get("zero_p") or [])],
        known_p_tilde=known_pt,
        zero_p_tilde=[tuple(e) for e in (m.get("zero_p_tilde") or [])],
        fixed_beta=fixed_beta,
        reference_taxon=None if ref is None else int(ref),
        fixed_gamma_tilde={int(k): float(v)
                           for k, v in (m.get("fixed_gamma_tilde") or {}).items()},
        fixed_alpha_tilde={int(g): float(v)
                           for g, v in (m.get("fixed_alpha_tilde") or {}).items()},
    )


def load_problem(cfg):
    """Read all tables referenced by the config -> (W, spec, ids, taxa)."""
    for key in ("counts", "design"):
        if key not in cfg:
            raise InputError(f"config is missing the '{key}' section")
    ids, taxa, W = read_table(cfg["counts"])
    d = cfg["design"]
    _, _, Z = read_table(d["z"])
    _, _, X = read_table(d["x"])
    _, _, Zt = read_table(d["z_tilde"])
    groups = None
    if d.get("spurious_groups"):
        _, _, g = read_table(d["spurious_groups"])
        groups = g[:, 0].astype(int)
    designs = DesignSet(Z=Z, X=X, Z_tilde=Zt, spurious_groups=groups)
    mask = _mask_from_config(cfg, len(taxa), designs.K, designs.K_tilde,
                             designs.p_cov, designs.n_groups)
    spec = ModelSpec(designs=designs, mask=mask)
    Wm = CountMatrix(W)
    spec.validate(Wm)
    return Wm, spec, ids, taxa


def solver_options(cfg):
    opts = cfg.get("solver") or {}
    allowed = {f for f in SolverOptions.__dataclass_fields__}
    bad = set(opts) - allowed
    if bad:
        raise InputError(f"unknown solver options: {sorted(bad)}")
    return SolverOptions(**opts)


def bootstrap_config(cfg, args):
    b = dict(cfg.get("bootstrap") or {})
    if args.bootstrap_B is not None:
        b["B"] = args.bootstrap_B
    if args.alpha is not None:
        b["alpha"] = args.alpha
    if args.seed is not None:
        b["seed"] = args.seed
    m_rule = None
    m_fixed = b.pop("m", None) or args.m_rule
    if m_fixed is not None:
        m_fixed = int(m_fixed)
        m_rule = lambda n, m=m_fixed: m  # noqa: E731
    return BootstrapConfig(B=int(b.get("B", 1000)), m_rule=m_rule,
                           seed=b.get("seed"),
                           alpha=float(b.get("alpha", 0.05)))


def _estimates_payload(result, ids, taxa):
    p = result.params
    return {
        "estimates": {
            "beta": p.beta, "p": p.p, "p_tilde": p.p_tilde,
            "gamma_tilde": p.gamma_tilde, "gamma": p.gamma,
            "alpha_tilde": p.alpha_tilde,
        },
        "taxa": taxa, "sample_ids": ids,
        "objective": result.objective,
        "converged": result.converged,
        "diagnostics": {k: v for k, v in result.diagnostics.items()
                        if k not in ("barrier_trace", "stage2_trace",
                                     "barrier_trace_weighted")},
    }


# ---------------------------------------------------------------------------
# commands


def cmd_fit(args):
    cfg = load_config(args.config)
    W, spec, ids, taxa = load_problem(cfg)
    result = fit(W=W, spec=spec,
                 estimator=args.estimator or cfg.get("estimator", "unweighted"),
                 opts=solver_options(cfg), seed=args.seed)
    payload = _estimates_payload(result, ids, taxa)
    payload["config"] = cfg
    payload["seed"] = args.seed
    write_json(args.out or cfg.get("out"), payload)
    return EXIT_OK


def cmd_ci(args):
    cfg = load_config(args.config)
    W, spec, ids, taxa = load_problem(cfg)
    bcfg = bootstrap_config(cfg, args)
    result = fit(W=W, spec=spec,
                 estimator=args.estimator or cfg.get("estimator", "unweighted"),
                 opts=solver_options(cfg), seed=args.seed)
    draws = bootstrap_params(spec, W, result, bcfg, opts=solver_options(cfg))
    table = marginal_ci(draws, bcfg.alpha)
    payload = _estimates_payload(result, ids, taxa)
    payload["config"] = cfg
    payload["intervals"] = {
        "names": table.names, "estimate": table.estimate,
        "lower": table.lower, "upper": table.upper,
        "lower_unclipped": table.lower_unclipped,
        "upper_unclipped": table.upper_unclipped,
        "alpha": table.alpha, "B": bcfg.B, "m": draws.m,
        "n_failed": draws.n_failed,
    }
    write_json(args.out or cfg.get("out"), payload)
    return EXIT_OK


def _test_spec_from_config(cfg):
    raw = cfg.get("test", {}).get("constraints")
    if not raw:
        raise InputError("config is missing test.constraints")
    cons = []
    for entry in raw:
        kind = entry[0]
        if kind in ("beta", "p", "p_tilde"):
            cons.append((kind, int(entry[1]), int(entry[2]), float(entry[3])))
        elif kind in ("gamma_tilde", "alpha_tilde"):
            cons.append((kind, int(entry[1]), float(entry[2])))
        else:
            raise InputError(f"unknown constraint kind {kind!r}")
    return TestSpec(constraints=tuple(cons))


def cmd_test(args):
    cfg = load_config(args.config)
    W, spec, ids, taxa = load_problem(cfg)
    test = _test_spec_from_config(cfg)
    bcfg = bootstrap_config(cfg, args)
    out = lrt(spec, W, test, bcfg,
              estimator=args.estimator or cfg.get("estimator", "unweighted"),
              opts=solver_options(cfg))
    payload = {
        "config": cfg,
        "test": {
            "name": cfg.get("test", {}).get("name", "lrt"),
            "statistic": out.statistic, "p_value": out.p_value,
            "null_quantile": out.null_quantile, "reject": out.reject,
            "alpha": out.alpha, "B": out.B, "m": out.m,
            "n_failed": out.n_failed,
        },
    }
    write_json(args.out or cfg.get("out"), payload)
    return EXIT_OK


def cmd_simulate(args):
    cfg = load_config(args.config) if args.config else {}
    scn_cfg = dict(cfg.get("scenario") or {})
    if args.seed is not None:
        scn_cfg["seed"] = args.seed
    if "dilutions" in scn_cfg:
        scn_cfg["dilutions"] = tuple(scn_cfg["dilutions"])
    scn = SimScenario(**scn_cfg)
    W, designs, truth = simulate(scn)
    prefix = args.out or cfg.get("out") or "sim"
    taxa = [f"taxon{j}" for j in range(W.J)]
    ids = [f"sample{i}" for i in range(W.n)]
    write_table(f"{prefix}_counts.csv", ids, taxa, W.W)
    write_table(f"{prefix}_z.csv", ids,
                [f"specimen{k}" for k in range(designs.K)], designs.Z)
    write_table(f"{prefix}_x.csv", ids,
                [f"cov{q}" for q in range(designs.p_cov)], designs.X)
    write_table(f"{prefix}_z_tilde.csv", ids,
                [f"source{k}" for k in range(designs.K_tilde)], designs.Z_tilde)
    spec = analysis_spec(scn, designs)
    fit_cfg = {
        "counts": f"{prefix}_counts.csv",
        "design": {"z": f"{prefix}_z.csv", "x": f"{prefix}_x.csv",
                   "z_tilde": f"{prefix}_z_tilde.csv"},
        "mask": {
            "known_p": {int(k): spec.mask.p_fixed_rows[k].tolist()
                        for k in np.flatnonzero(spec.mask.p_known)},
            "reference_taxon": scn.J - 1,
        },
    }
    with open(f"{prefix}_config.yaml", "w", encoding="utf-8") as fh:
        yaml.safe_dump(fit_cfg, fh, sort_keys=True)
    write_json(f"{prefix}_truth.json", {
        "beta": truth.beta, "p": truth.p, "p_tilde": truth.p_tilde,
        "gamma_tilde": truth.gamma_tilde, "gamma": truth.gamma,
        "scenario": scn_cfg,
    })
    return EXIT_OK


def _cv_fold_spec(spec, fold_rows):
    """Remap held-out samples onto fresh unknown specimen rows.

    Held-out samples keep their data but lose their composition labels:
    each distinct original Z row among them becomes a new unknown
    specimen, and the held-out samples form a new spurious-scale group
    so contamination intensity may differ in the fold.
    """
    d, m = spec.designs, spec.mask
    n, K = d.n, d.K
    keys = {}
    for i in fold_rows:
        key = tuple(np.round(d.Z[i], 12))
        keys.setdefault(key, []).append(i)
    K_new = K + len(keys)
    Z = np.zeros((n, K_new))
    Z[:, :K] = d.Z
    for extra, (_, rows) in enumerate(sorted(keys.items())):
        for i in rows:
            Z[i, :K] = 0.0
            Z[i, K + extra] = 1.0
    groups = np.full(n, -1) if d.spurious_groups is None \
        else np.array(d.spurious_groups)
    g_new = groups.max(initial=-1) + 1
    groups[list(fold_rows)] = g_new
    designs = DesignSet(Z=Z, X=d.X, Z_tilde=d.Z_tilde, spurious_groups=groups)
    J = spec.J
    mask = make_mask(
        J, K_new, d.K_tilde, d.p_cov, designs.n_groups,
        known_p={int(k): m.p_fixed_rows[k] for k in np.flatnonzero(m.p_known)},
        zero_p=[(int(k), int(j)) for k, j in np.argwhere(m.p_zero)],
        known_p_tilde={int(k): m.p_tilde_fixed_rows[k]
                       for k in np.flatnonzero(m.p_tilde_known)},
        zero_p_tilde=[(int(k), int(j)) for k, j in np.argwhere(m.p_tilde_zero)],
        fixed_beta={(int(q), int(j)): float(m.beta_fixed[q, j])
                    for q, j in np.argwhere(~m.beta_estimable)},
        fixed_gamma_tilde={int(k): float(m.gamma_tilde_fixed[k])
                           for k in np.flatnonzero(~m.gamma_tilde_estimable)},
        fixed_alpha_tilde={int(g): float(m.alpha_tilde_fixed[g])
                           for g in np.flatnonzero(~m.alpha_tilde_estimable)},
    )
    held_row_of = {}
    for extra, (_, rows) in enumerate(sorted(keys.items())):
        for i in rows:
            held_row_of[i] = K + extra
    return ModelSpec(designs=designs, mask=mask), held_row_of


def cmd_cv(args):
    cfg = load_config(args.config)
    W, spec, ids, taxa = load_problem(cfg)
    cv_cfg = cfg.get("cv") or {}
    n_folds = int(cv_cfg.get("folds", args.folds or 0))
    if n_folds < 1:
        raise InputError("cv requires a positive fold count (cv.folds)")
    opts = solver_options(cfg)
    estimator = args.estimator or cfg.get("estimator", "unweighted")
    truth = None
    if cv_cfg.get("truth"):
        _, _, truth = read_table(cv_cfg["truth"])
        if truth.shape != W.W.shape:
            raise InputError("cv truth table must match the count table shape")
    if n_folds == 1:
        result = fit(W=W, spec=spec, estimator=estimator, opts=opts,
                     seed=args.seed)
        payload = _estimates_payload(result, ids, taxa)
        payload["config"] = cfg
        write_json(args.out or cfg.get("out"), payload)
        return EXIT_OK
    rng = np.random.default_rng(args.seed if args.seed is not None
                                else cv_cfg.get("seed"))
    assignment = rng.permutation(W.n) % n_folds
    plugin = W.W / W.row_totals[:, None]
    folds_out = []
    for f in range(n_folds):
        fold_rows = np.flatnonzero(assignment == f)
        try:
            fold_spec, held_row_of = _cv_fold_spec(spec, fold_rows)
            result = fit(W=W, spec=fold_spec, estimator=estimator, opts=opts)
        except (SolverError, DomainError, ShapeError) as exc:
            folds_out.append({"fold": f, "skipped": str(exc),
                              "samples": fold_rows})
            continue
        rec = {"fold": f, "samples": fold_rows, "converged": result.converged,
               "estimates": {ids[i]: result.params.p[held_row_of[i]]
                             for i in fold_rows}}
        if truth is not None:
            model_err = [rmse(result.params.p[held_row_of[i]], truth[i])
                         for i in fold_rows]
            plug_err = [rmse(plugin[i], truth[i]) for i in fold_rows]
            rec["rmse_model"] = float(np.mean(model_err))
            rec["rmse_plugin"] = float(np.mean(plug_err))
        folds_out.append(rec)
    write_json(args.out or cfg.get("out"), {"config": cfg, "folds": folds_out})
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser():
    parser = argparse.ArgumentParser(
        prog="abundest",
        description="Relative-abundance estimation with detection effects "
                    "and contamination from dilution-series designs.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, func in (("fit", cmd_fit), ("ci", cmd_ci), ("test", cmd_test),
                       ("simulate", cmd_simulate), ("cv", cmd_cv)):
        p = sub.add_parser(name)
        p.set_defaults(func=func)
        p.add_argument("--config", required=(name != "simulate"))
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--out")
        p.add_argument("--estimator", choices=["unweighted", "reweighted"])
        p.add_argument("--bootstrap-B", type=int)
        p.add_argument("--m-rule", type=int,
                       help="fixed bootstrap subsample size m")
        p.add_argument("--alpha", type=float)
        if name == "cv":
            p.add_argument("--folds", type=int)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (InputError, ShapeError, DomainError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except SolverError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except BootstrapError as exc:
        print(f"inference error: {exc}", file=sys.stderr)
        return EXIT_INFERENCE


if __name__ == "__main__":
    sys.exit(main())
