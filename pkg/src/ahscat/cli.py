"""Batch front door: config ingestion, experiment orchestration, emission.

Subcommands
    lens             scattering relation over a ray bundle -> lens CSV
    scatter          all three kernel pipelines + consistency report
    verify           invariant suite with machine-readable residuals
    validate-metric  metric positivity / derivative diagnostics

Configs are strict JSON: a versioned schema, unknown fields rejected, and
identical config (plus seed) produces byte-identical outputs.  All floats
are printed with 17 significant digits so values round-trip exactly.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import charts, geometry, phase_flow, scatop, spectral, wave1d

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


# allowed keys and value schemas; nested dicts are validated recursively
_METRIC_KEYS = {"model": str, "phi": dict, "x_max": (int, float), "n": int}
_PHI_KEYS = {"poly": list, "bumps": list}
_BUMP_KEYS = {"amp": (int, float), "center": (int, float), "width": (int, float)}
_LENS_KEYS = {
    "sigma": (int, float),
    "n_rays": int,
    "y_in": (int, float),
    "theta_min": (int, float),
    "theta_max": (int, float),
    "include_head_on": bool,
    "branch": str,
    "rtol": (int, float),
    "atol": (int, float),
    "gamma_max": (int, float),
}
_SCATTER_KEYS = {
    "modes": int,
    "drho": (int, float),
    "dt_ratio": (int, float),
    "rho_max": (int, float),
    "t_max": (int, float),
    "band": list,
    "band_taper": (int, float),
    "n_probes": int,
    "probe_support": list,
    "reg": (int, float),
    "ds_out": (int, float),
    "sigma_span": list,
    "record_ds": (int, float),
    "epsilons": list,
    "lambda_grid": list,
    "angle_pairs": int,
    "tolerances": dict,
    "manifest": str,
}
_TOL_KEYS = {"pipeline": (int, float), "limit_l2": (int, float), "unitarity": (int, float)}
_VERIFY_KEYS = {"grid": int, "n_rays": int, "mutate_chart": bool}
_TOP_KEYS = {
    "schema_version": int,
    "seed": int,
    "metric": dict,
    "lens": dict,
    "scatter": dict,
    "verify": dict,
}


def _check_keys(d: dict, allowed: dict, path: str):
    for k, v in d.items():
        if k not in allowed:
            raise ConfigError(f"unknown config field {path}{k!r}")
        if not isinstance(v, allowed[k]):
            raise ConfigError(
                f"config field {path}{k!r} has type {type(v).__name__}, "
                f"expected {allowed[k]}"
            )


def load_config(path) -> dict:
    try:
        with open(path) as f:
            cfg = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config parse error at line {e.lineno}, column {e.colno}: {e.msg}")
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    _check_keys(cfg, _TOP_KEYS, "")
    if cfg.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}")
    if "metric" not in cfg:
        raise ConfigError("config requires a 'metric' section")
    _check_keys(cfg["metric"], _METRIC_KEYS, "metric.")
    if "phi" in cfg["metric"]:
        _check_keys(cfg["metric"]["phi"], _PHI_KEYS, "metric.phi.")
        for i, b in enumerate(cfg["metric"]["phi"].get("bumps", [])):
            _check_keys(b, _BUMP_KEYS, f"metric.phi.bumps[{i}].")
    for sec, keys in (("lens", _LENS_KEYS), ("scatter", _SCATTER_KEYS), ("verify", _VERIFY_KEYS)):
        if sec in cfg:
            _check_keys(cfg[sec], keys, sec + ".")
    if "tolerances" in cfg.get("scatter", {}):
        _check_keys(cfg["scatter"]["tolerances"], _TOL_KEYS, "scatter.tolerances.")
    return cfg


def _fmt(x: float) -> str:
    return "%.17g" % x


def _write(path: Path, rows: list[str]):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(rows) + "\n")


# ---------------------------------------------------------------------------
# lens
# ---------------------------------------------------------------------------


def _lens_bundle(cfg: dict):
    lc = cfg.get("lens", {})
    sigma = float(lc.get("sigma", -1.0))
    n = int(lc.get("n_rays", 64))
    y0 = float(lc.get("y_in", 0.0))
    th_min = float(lc.get("theta_min", 0.15))
    th_max = float(lc.get("theta_max", math.pi))
    include_head_on = bool(lc.get("include_head_on", True))
    rays = []
    ths = np.linspace(th_min, th_max, n, endpoint=True)
    for j, th in enumerate(ths):
        if th >= math.pi - 1e-12:
            eta = 0.0 if include_head_on else 1e-3
        else:
            eta = abs(sigma) / math.tan(th / 2)
            if j % 2 == 1:
                eta = -eta
        rays.append((0.0, y0, eta, sigma))
    return rays, lc


def cmd_lens(cfg: dict, out: Path, threads: int = 1) -> int:
    metric = geometry.metric_from_config(cfg["metric"])
    rays, lc = _lens_bundle(cfg)
    branch = phase_flow.Branch(lc.get("branch", "plus"))
    rtol = float(lc.get("rtol", 1e-12))
    atol = float(lc.get("atol", 1e-13))
    gmax = float(lc.get("gamma_max", 1e3))

    def run(ray):
        try:
            return phase_flow.scattering_relation(
                metric, ray, branch, rtol=rtol, atol=atol, gamma_max=gmax
            )
        except phase_flow.TrappingError:
            return None

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(run, rays))
    else:
        results = [run(r) for r in rays]
    data = [d for d in results if d is not None]
    trapped = sum(1 for d in results if d is None)
    _write(out / "lens.csv", phase_flow.lens_csv_rows(data))
    summary = {
        "rays": len(rays),
        "trapping_failures": trapped,
        "max_null_residual": max((d.residual for d in data), default=0.0),
        "max_transversality_residual": max((d.transversality for d in data), default=0.0),
    }
    _write(out / "lens_summary.json", [json.dumps(summary, indent=1, sort_keys=True)])
    print(f"lens: {len(data)} rays, {trapped} trapping failures")
    return 0


# ---------------------------------------------------------------------------
# scatter
# ---------------------------------------------------------------------------


def _kernel_config(cfg: dict) -> scatop.KernelConfig:
    sc = dict(cfg.get("scatter", {}))
    kw = {}
    for k in ("drho", "dt_ratio", "rho_max", "t_max", "band_taper", "n_probes",
              "reg", "ds_out", "record_ds"):
        if k in sc:
            kw[k] = sc[k]
    for k in ("band", "probe_support", "sigma_span", "epsilons"):
        if k in sc:
            kw[k] = tuple(sc[k])
    kw["seed"] = int(cfg.get("seed", 20240))
    return scatop.KernelConfig(**kw)


def cmd_scatter(cfg: dict, out: Path, threads: int = 1) -> int:
    metric = geometry.metric_from_config(cfg["metric"])
    profile = metric.profile
    sc = cfg.get("scatter", {})
    modes = int(sc.get("modes", 4))
    if modes < 0:
        raise ConfigError("scatter.modes must be >= 0")
    kcfg = _kernel_config(cfg)
    eps = tuple(sc.get("epsilons", kcfg.epsilons))
    if not all(a > b for a, b in zip(eps, eps[1:])):
        raise ConfigError("scatter.epsilons must be strictly decreasing")
    lg = sc.get("lambda_grid", [0.5, 5.0, 0.25])
    lams = np.arange(lg[0], lg[1] + 1e-12, lg[2])
    tol = {"pipeline": 1e-2, "limit_l2": 5e-2, "unitarity": 1e-6}
    tol.update(sc.get("tolerances", {}))

    mode_list = list(range(modes + 1))
    kt = scatop.scattering_kernel_time(profile, mode_list, kcfg)
    kl, conv = scatop.scattering_kernel_limit(profile, mode_list, kcfg, eps)
    samples = spectral.radial_sweep(
        profile, [(m, float(l)) for m in mode_list for l in lams]
    )

    manifest_path = sc.get("manifest")
    if manifest_path:
        man = scatop.load_manifest(manifest_path)
    else:
        man = scatop.calibrate_conventions(kt, samples, kernels_limit=kl,
                                           meta={"model": cfg["metric"].get("model")})
        scatop.save_manifest(man, out / "convention_manifest.json")
    c0 = complex(man["c_spec"]["c0_re"], man["c_spec"]["c0_im"])
    alpha = man["c_spec"]["alpha"]
    c_lim = man["c_lim"]
    if c_lim is None:
        num = sum(float(np.dot(next(k for k in kt if k.m == x.m).k_time, x.k_time)) for x in kl)
        den = sum(float(np.dot(x.k_time, x.k_time)) for x in kl)
        c_lim = num / den

    rows = ["mode,sigma,k_time,k_limit_scaled"]
    checks = []
    for klm in kl:
        ktm = next(k for k in kt if k.m == klm.m)
        for sgv, a, b in zip(ktm.sigma_grid, ktm.k_time, c_lim * klm.k_time):
            rows.append(f"{ktm.m},{_fmt(sgv)},{_fmt(a)},{_fmt(b)}")
        rel = float(
            np.linalg.norm(ktm.k_time - c_lim * klm.k_time) / np.linalg.norm(ktm.k_time)
        )
        checks.append({"check": f"limit_vs_time_m{klm.m}", "value": rel,
                       "tolerance": tol["limit_l2"], "pass": rel < tol["limit_l2"]})
    _write(out / "kernels.csv", rows)
    _write(out / "convergence.csv", conv.csv_rows())

    sp_rows = [spectral.SPECTRAL_CSV_HEADER]
    worst_pipe = 0.0
    worst_unit = 0.0
    for s in samples:
        sp_rows.append(f"{s.m}," + ",".join(_fmt(v) for v in (s.lam, s.a.real, s.a.imag, s.cond)))
        k = next(k for k in kt if k.m == s.m)
        sh = np.interp(s.lam, k.lam_grid, k.a_freq.real) + 1j * np.interp(
            s.lam, k.lam_grid, k.a_freq.imag
        )
        worst_pipe = max(worst_pipe, abs(sh - scatop.c_spec_model(s.lam, c0, alpha) * s.a))
        worst_unit = max(worst_unit, abs(abs(s.a) - 1.0))
    _write(out / "spectral.csv", sp_rows)
    checks.append({"check": "pipeline_equivalence", "value": worst_pipe,
                   "tolerance": tol["pipeline"], "pass": worst_pipe < tol["pipeline"]})
    checks.append({"check": "spectral_unitarity", "value": worst_unit,
                   "tolerance": tol["unitarity"], "pass": worst_unit < tol["unitarity"]})
    report = {
        "c_lim": c_lim,
        "c_spec": {"c0_re": c0.real, "c0_im": c0.imag, "alpha": alpha},
        "checks": checks,
        "monotone_convergence": conv.monotone,
    }
    _write(out / "consistency.json", [json.dumps(report, indent=1, sort_keys=True)])
    ok = all(c["pass"] for c in checks)
    for c in checks:
        print(f"{'PASS' if c['pass'] else 'FAIL'} {c['check']}: "
              f"{c['value']:.3e} (tol {c['tolerance']:.1e})")
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------


def cmd_verify(cfg: dict, out: Path, threads: int = 1) -> int:
    metric = geometry.metric_from_config(cfg["metric"])
    vc = cfg.get("verify", {})
    seed = int(cfg.get("seed", 1234))
    rng = np.random.default_rng(seed)
    mutate = bool(vc.get("mutate_chart", False))
    results = []

    def add(name, residual, tolerance):
        results.append(
            {"invariant": name, "residual": float(residual),
             "tolerance": float(tolerance), "pass": bool(residual < tolerance)}
        )

    # metric validation
    rep = geometry.validate_metric(metric, n_x=int(vc.get("grid", 60)), n_y=16)
    add("metric_positivity_failures", float(len(rep.failures)), 1.0)
    add("metric_derivative_consistency", rep.derivative_residual, 1e-6)

    # chart round trips and symplectic form on random overlap points
    worst_rt = 0.0
    worst_omega = 0.0
    worst_sigma = 0.0
    worst_bdf = 0.0
    targets = [charts.ChartId.R1_L, charts.ChartId.R3_LR, charts.ChartId.R2_Lff,
               charts.ChartId.R2_Rff, charts.ChartId.R4_corner]
    for _ in range(50):
        c = np.array([
            rng.uniform(-1, 1), rng.uniform(0.2, 2.0) * rng.choice([-1, 1]),
            rng.uniform(0.05, 0.5), rng.uniform(0.3, 0.6),
            rng.uniform(-2, 2), rng.uniform(-2, 2),
            rng.uniform(0.05, 0.5), rng.uniform(-0.2, 0.2),
            rng.uniform(-2, 2), rng.uniform(-2, 2),
        ])
        p = charts.ChartPoint(charts.ChartId.INTERIOR, c)
        for tgt in targets:
            try:
                q = charts.to_chart(p, tgt)
            except charts.ChartDomainError:
                continue
            if mutate and tgt is charts.ChartId.R2_Lff:
                qc = q.coords.copy()
                qc[8] += 1e-3  # injected fault (test hook)
                q = q.with_coords(qc)
            back = charts.to_chart(q, charts.ChartId.INTERIOR)
            scale = np.maximum(np.abs(c), 1.0)
            worst_rt = max(worst_rt, float(np.max(np.abs(back.coords - c) / scale)))
            worst_sigma = max(worst_sigma, abs(q.sigma - p.coords[1]))
            rl, rr, rff = charts.face_defining_functions(q)
            xi = c[2]
            xpi = c[6]
            worst_bdf = max(worst_bdf, abs(rl * rff - xi) / xi, abs(rr * rff - xpi) / xpi)
            # symplectic form under finite-difference pushforward
            h = 1e-6
            v1 = rng.standard_normal(10)
            v2 = rng.standard_normal(10)
            def push(v):
                a = charts.to_chart(p.with_coords(c + h * v), tgt).coords
                b = charts.to_chart(p.with_coords(c - h * v), tgt).coords
                return (a - b) / (2 * h)
            om_src = charts.pullback_symplectic_form(p, v1, v2)
            om_tgt = charts.pullback_symplectic_form(q, push(v1), push(v2))
            worst_omega = max(worst_omega, abs(om_src - om_tgt))
    add("chart_round_trip", worst_rt, 1e-12)
    add("chart_sigma_invariance", worst_sigma, 1e-300)
    add("chart_bdf_consistency", worst_bdf, 1e-12)
    add("chart_symplectic_form", worst_omega, 1e-10)

    # flow conservation on a small ray bundle
    n_rays = int(vc.get("n_rays", 8))
    worst_null = worst_trans = worst_shift = 0.0
    for k in range(n_rays):
        eta = 0.5 + 7.5 * k / max(1, n_rays - 1)
        datum, curve_r, curve_l = phase_flow.scattering_relation(
            metric, (0.0, 0.0, eta, -1.0), keep_curves=True
        )
        worst_null = max(worst_null, datum.residual)
        worst_trans = max(worst_trans, datum.transversality)
        worst_shift = max(worst_shift, phase_flow.shift_relation_check(metric, curve_l))
    add("flow_null_conservation", worst_null, 1e-9)
    add("flow_transversality", worst_trans, 1e-8)
    add("flow_shift_relation", worst_shift, 1e-8)
    st0 = np.array([1.0, 0.0, 0.8, 1.2, 0.0])
    add(
        "flow_symplectic_map",
        phase_flow.flow_map_symplectic_residual(metric, st0, -0.25, 10.0),
        1e-6,
    )

    # wave energy conservation (profile must close at a center)
    if metric.is_rotsym() and metric.profile.closes_smoothly:
        pb = wave1d.ModeProblem(m=0, profile=metric.profile, drho=2.0**-6,
                                rho_max=30.0, t_max=10.0)
        v0 = np.exp(-((pb.rho - 10.0) / 0.7) ** 2)
        st = wave1d.make_state(pb, v0, np.zeros_like(v0))
        st2 = wave1d.evolve(pb, st, 8.0)
        add("wave_energy_drift", abs(st2.energy - st.energy) / st.energy, 1e-6)
        s = spectral.radial_solve(metric.profile, 1, 1.0)
        add("spectral_unitarity", abs(abs(s.a) - 1.0), 1e-6)
        add("spectral_wronskian", s.wronskian_dev / 2.0, 1e-8)

    _write(out / "verify.json", [json.dumps({"invariants": results}, indent=1, sort_keys=True)])
    ok = all(r["pass"] for r in results)
    for r in results:
        print(f"{'PASS' if r['pass'] else 'FAIL'} {r['invariant']}: "
              f"{r['residual']:.3e} (tol {r['tolerance']:.1e})")
    return 0 if ok else 1


def cmd_validate_metric(cfg: dict, out: Path, threads: int = 1) -> int:
    metric = geometry.metric_from_config(cfg["metric"])
    rep = geometry.validate_metric(metric)
    doc = {
        "failures": rep.failures,
        "derivative_residual": rep.derivative_residual,
        "smoothness_proxy": rep.smoothness_proxy,
        "n_samples": rep.n_samples,
        "ok": rep.ok,
    }
    _write(out / "metric_validation.json", [json.dumps(doc, indent=1, sort_keys=True)])
    print(f"{'PASS' if rep.ok else 'FAIL'} metric validation "
          f"({len(rep.failures)} failures, derivative residual {rep.derivative_residual:.2e})")
    return 0 if rep.ok else 1


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="ahscat", description=__doc__)
    ap.add_argument("command", choices=["lens", "scatter", "verify", "validate-metric"])
    ap.add_argument("--config", required=True, help="JSON config path")
    ap.add_argument("--out", default="out", help="output directory")
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--seed", type=int, default=None, help="override config seed")
    args = ap.parse_args(argv)
    try:
        cfg = load_config(args.config)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    if args.seed is not None:
        cfg["seed"] = args.seed
    out = Path(args.out)
    fn = {
        "lens": cmd_lens,
        "scatter": cmd_scatter,
        "verify": cmd_verify,
        "validate-metric": cmd_validate_metric,
    }[args.command]
    try:
        return fn(cfg, out, threads=args.threads)
    except (geometry.GeometryError, ConfigError) as e:
        print(f"error [{args.command}]: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
