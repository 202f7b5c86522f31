from __future__ import annotations

import csv
import json
import math
import time
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone
from itertools import product as cartesian
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .config import ExperimentConfig, HHConfig
from .contracts import ContractResult, at_most, holds, tier, within
from .exterior_algebra import (
    ExteriorOperator,
    annihilation,
    anticommutator,
    creation,
    e_minus,
    e_plus,
    exp_supertrace_mp,
    product,
    supertrace,
)
from .geodesic_trig import (
    DISAGREEMENT_TOL,
    MethodDisagreementError,
    ShootingError,
    Surface,
    TriangleSpec,
    UnitTangent,
    comparison_check,
    comparison_sweep,
    jacobi_closed_form_gap,
    sas_identity_check,
    second_derivative_check,
    side_derivative_gap,
    solve_sas,
)
from .levi_iteration import (
    LeviContext,
    convolution_bound_check,
    degree_block_leak,
    iteration_report,
    k0_envelope_fit,
    levi_sum,
    reconstruct_G,
    weak_initial_error,
)
from .logging_utils import log_line
from .manifolds import PRESETS, ModelManifold, euler_via_indices, find_zeros
from .matrix_functions import SpectralFunction, intertwine_check
from .mehler_kernel import (
    FrameData,
    delta_family_error,
    gaussian_log_bounds,
    log_phi,
    phi0_forms,
    residual_order,
)
from .store import RunStore
from .witten_laplacian import (
    away_from_zero_decay,
    assemble_box_t,
    discrete_complex,
    discrete_supertrace,
    heat_kernel_exact,
    index_limit_sum,
    localized_index_factor,
    semiclassical_chi,
)

EULER_CHARACTERISTIC = {"torus": 0, "sphere": 2}
ZERO_FIELDS = {1: "circle-zero", 2: "torus-zero"}


def new_run_id() -> str:
    return uuid.uuid4().hex


def now_iso() -> str:
    return datetime.now(timezone.utc).isoformat()


def streams(seed: int, count: int) -> list[np.random.Generator]:
    """Independent Philox generators, one per suite."""
    return [np.random.Generator(np.random.Philox(ss)) for ss in np.random.SeedSequence(seed).spawn(count)]


@dataclass
class ResultRecord:
    command: str
    config: dict[str, Any]
    outputs: dict[str, Any] = field(default_factory=dict)
    tables: dict[str, list[dict[str, Any]]] = field(default_factory=dict)
    contracts: list[ContractResult] = field(default_factory=list)

    @property
    def status(self) -> str:
        return tier(self.contracts)[0]

    @property
    def ok(self) -> bool:
        return self.status == "PASS"

    def to_dict(self, table_files: dict[str, str] | None = None) -> dict[str, Any]:
        return _plain({
            "command": self.command,
            "config": self.config,
            "outputs": self.outputs,
            "tables": table_files if table_files is not None else {k: len(v) for k, v in self.tables.items()},
            "contracts": [c.to_dict() for c in self.contracts],
            "status": self.status,
        })


def _plain(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


# ---------- indices ----------

def _expected_chi(exp: ExperimentConfig, manifold: ModelManifold) -> int:
    given = exp.params.get("expected_chi")
    return EULER_CHARACTERISTIC[manifold.kind] if given is None else int(given)


def run_indices(exp: ExperimentConfig) -> ResultRecord:
    rec = ResultRecord(exp.command, exp.resolved())
    manifold = exp.manifold()
    field_ = exp.field_spec()
    zeros = find_zeros(manifold, field_)
    chi = euler_via_indices(zeros)
    expected = _expected_chi(exp, manifold)
    limits = [{"s": float(s), "value": index_limit_sum(zeros, float(s))} for s in sorted(exp.params["s"])]
    rec.outputs = {
        "zeros": [z.to_dict() for z in zeros],
        "indices": [z.index for z in zeros],
        "chi": chi,
        "expected_chi": expected,
        "index_limits": limits,
    }
    rec.contracts = [
        holds("chi_from_indices", chi == expected, f"index sum {chi} vs expected {expected}"),
        within("index_limit_sum", limits[0]["value"], expected, exp.tolerance("index_limit")),
    ]
    return rec


# ---------- supertrace ----------

def _mckean_singer(exp: ExperimentConfig) -> tuple[list[dict[str, Any]], float]:
    ms = exp.params["mckean_singer"]
    rows, worst = [], 0.0
    for case in ms["cases"]:
        m = ModelManifold.torus(int(case["dim"]), int(case["N"]))
        f = exp.field_spec(case["field"], m)
        cx = discrete_complex(m)
        for t in ms["t"]:
            box = assemble_box_t(m, f, float(t))
            for tau in ms["tau"]:
                val = discrete_supertrace(heat_kernel_exact(box, float(tau)), cx)
                gap = abs(val - cx.euler_characteristic())
                worst = max(worst, gap)
                rows.append({"dim": m.dim, "N": cx.N, "field": f.name, "t": float(t), "tau": float(tau),
                             "supertrace": val, "defect": gap})
    return rows, worst


def run_supertrace(exp: ExperimentConfig) -> ResultRecord:
    rec = ResultRecord(exp.command, exp.resolved())
    manifold = exp.manifold()
    field_ = exp.field_spec()
    kernel = exp.params["kernel"]
    report = semiclassical_chi(manifold, field_, s_values=kernel["s"], kappas=kernel["kappa"], taus=kernel["tau"])
    expected = _expected_chi(exp, manifold)
    rec.tables["supertrace"] = report.rows
    rec.outputs = {"semiclassical": report.to_dict(), "expected_chi": expected}
    if kernel["literal_tau"] is not None:
        literal = semiclassical_chi(manifold, field_, s_values=kernel["s"], taus=kernel["literal_tau"], check=False)
        rec.tables["supertrace_literal_tau"] = literal.rows
        rec.outputs["literal_tau"] = literal.to_dict()
    rec.contracts = [
        within("chi_extrapolated", report.chi, expected, exp.tolerance("chi")),
        holds("tau_cauchy", all(report.cauchy.values()),
              "successive tau differences shrink for every s" if all(report.cauchy.values())
              else f"not Cauchy at s = {[s for s, ok in report.cauchy.items() if not ok]}"),
    ]
    if exp.params["decay_s"] is not None:
        try:
            decay = away_from_zero_decay(manifold, field_, float(exp.params["decay_s"]))
        except ValueError as e:
            rec.outputs["decay"] = {"skipped": str(e)}
        else:
            rec.outputs["decay"] = {"t": decay.ts, "scaled_max": decay.scaled_max, "bound": decay.bound,
                                    "rate": decay.rate, "decays": decay.decays}
            rec.contracts.append(holds("decay_within_bound", decay.within_bound))
    rows, worst = _mckean_singer(exp)
    rec.tables["mckean_singer"] = rows
    rec.contracts.append(at_most("mckean_singer", worst, exp.tolerance("mckean_singer")))
    return rec


# ---------- kernel checks ----------

def _exterior_suite(rng: np.random.Generator, samples: int) -> dict[str, Any]:
    relations_ok, top_ok, vanishing_ok = True, True, True
    for n in range(1, 5):
        ident = ExteriorOperator.identity(n)
        zero = ExteriorOperator.zero(n)
        for i, j in cartesian(range(1, n + 1), repeat=2):
            delta = ident if i == j else zero
            relations_ok &= anticommutator(creation(n, i), annihilation(n, j)).equals(delta)
            relations_ok &= anticommutator(creation(n, i), creation(n, j)).equals(zero)
            relations_ok &= anticommutator(e_plus(n, i), e_plus(n, j)).equals(delta * 2)
            relations_ok &= anticommutator(e_minus(n, i), e_minus(n, j)).equals(delta * -2)
            relations_ok &= anticommutator(e_plus(n, i), e_minus(n, j)).equals(zero)
        top = product(*[op for j in range(1, n + 1) for op in (e_plus(n, j), e_minus(n, j))])
        top_ok &= supertrace(top) == 2**n
    for _ in range(samples):
        n = int(rng.integers(1, 5))
        k = int(rng.integers(1, 2 * n))
        ops = [(e_plus if rng.random() < 0.5 else e_minus)(n, int(rng.integers(1, n + 1))) for _ in range(k)]
        vanishing_ok &= supertrace(product(*ops)) == 0
    return {"relations": bool(relations_ok), "top_degree": bool(top_ok), "vanishing": bool(vanishing_ok)}


def _leading_order(rng: np.random.Generator, samples: int, s_values: list[float]) -> dict[float, float]:
    """max over samples of |str exp(sQ(v))·(2s)^{-n}/det v - 1| / s, per s."""
    per_s = {float(s): 0.0 for s in s_values}
    for n in (1, 2, 3):
        for _ in range(samples):
            v = rng.normal(size=(n, n))
            det = float(np.linalg.det(v))
            if abs(det) < 1e-3:
                continue
            for s in per_s:
                err = abs(exp_supertrace_mp(v, s) / ((2.0 * s) ** n * det) - 1.0)
                per_s[s] = max(per_s[s], err / s)
    return per_s


def _random_mehler(rng: np.random.Generator) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    n = int(rng.integers(1, 4))
    return float(rng.uniform(0.1, 1.0)), rng.normal(size=n), rng.normal(size=n), 0.5 * rng.normal(size=(n, n))


def run_kernel_checks(exp: ExperimentConfig) -> ResultRecord:
    rec = ResultRecord(exp.command, exp.resolved())
    rngs = streams(exp.seed, 8)
    con = rec.contracts

    ext = _exterior_suite(rngs[0], exp.samples("exterior"))
    con += [holds(f"exterior_{k}", v) for k, v in ext.items()]

    per_s = _leading_order(rngs[1], exp.samples("leading_order"), exp.params["s_leading"])
    con.append(at_most("leading_order_constant", max(per_s.values(), default=0.0),
                       exp.tolerance("leading_order")))

    ratios = []
    for _ in range(exp.samples("residual_order")):
        tau, y, a, b = _random_mehler(rngs[2])
        ratios.append(2.0 ** residual_order(tau, y, a, b))
    worst_ratio = max(abs(r / 4.0 - 1.0) for r in ratios)
    con.append(at_most("residual_order_ratio", worst_ratio, exp.tolerance("residual_order_ratio")))

    phi0_gap = 0.0
    for _ in range(exp.samples("phi0_forms")):
        tau, y, x, b = _random_mehler(rngs[3])
        direct, f1, f2 = phi0_forms(tau, y, x, b)
        scale = max(1.0, abs(f1))
        phi0_gap = max(phi0_gap, abs(direct - f1) / scale, abs(f2 - f1) / scale)
    con.append(at_most("phi0_three_forms", phi0_gap, exp.tolerance("phi0_forms")))

    violations = 0
    for _ in range(exp.samples("gaussian_bounds")):
        tau, y, a, b = _random_mehler(rngs[4])
        lhs, rhs_i, rhs_ii = gaussian_log_bounds(tau, y, a, b)
        violations += int(lhs > rhs_i + 1e-10) + int(lhs > rhs_ii + 1e-10)
    con.append(holds("gaussian_bounds", violations == 0, f"{violations} bound violations"))

    gap0 = 0.0
    for _ in range(exp.samples("b_zero")):
        tau, y, a, _ = _random_mehler(rngs[5])
        n = y.size
        ref = -0.5 * n * math.log(4.0 * math.pi * tau) - float(y @ y) / (4.0 * tau) - tau * float(a @ a)
        gap0 = max(gap0, abs(math.expm1(float(log_phi(tau, y, a, np.zeros((n, n)))) - ref)))
    con.append(at_most("b_zero_reduction", gap0, exp.tolerance("b_zero")))

    s_loc = sorted(float(s) for s in exp.params["s_localized"])
    worst = {s: 0.0 for s in s_loc}
    drawn = 0
    while drawn < exp.samples("localized"):
        a = rngs[6].normal(size=(2, 2))
        det = float(np.linalg.det(a))
        if abs(det) < 0.1:
            continue
        drawn += 1
        for s in s_loc:
            err = abs(localized_index_factor(FrameData(np.zeros(2), a), s) - math.copysign(1.0, det))
            worst[s] = max(worst[s], err / s)
    con.append(at_most("localized_factor_constant", max(worst.values(), default=0.0),
                       exp.tolerance("localized_factor")))

    dev = 0.0
    for _ in range(exp.samples("intertwine")):
        n = int(rngs[7].integers(1, 4))
        b = rngs[7].normal(size=(n, n))
        tau = float(rngs[7].uniform(0.05, 1.0))
        dev = max(dev, max(intertwine_check(b, f, tau) for f in SpectralFunction))
    con.append(at_most("intertwining", dev, exp.tolerance("intertwine")))

    delta = {str(tau): delta_family_error(tau, np.array([0.5]), np.array([[0.7]]), lambda y: np.cos(y[..., 0]))
             for tau in (0.1, 0.05, 0.025)}
    rec.outputs = {
        "exterior": ext,
        "leading_order_C": [{"s": s, "C": c} for s, c in per_s.items()],
        "residual_order_ratios": {"min": min(ratios), "max": max(ratios)},
        "phi0_max_relative_gap": phi0_gap,
        "gaussian_bound_violations": violations,
        "b_zero_max_relative_gap": gap0,
        "localized_C": [{"s": s, "C": c} for s, c in worst.items()],
        "intertwine_max_deviation": dev,
        "delta_family_error": delta,
    }
    return rec


# ---------- Levi iteration ----------

def _levi_pass(manifold: ModelManifold, field_: Any, exp: ExperimentConfig, theta_check: bool
               ) -> tuple[LeviContext, Any, Any]:
    p = exp.params
    ctx = LeviContext(manifold, field_, float(p["t"]), float(p["tau"]), steps=int(p["steps"]))
    series = levi_sum(ctx.k0_grid(), p["terms"])
    g = reconstruct_G(ctx, series.kernel)
    return ctx, g, iteration_report(ctx, series, g, refine=int(p["refine"]), theta_check=theta_check)


def run_levi(exp: ExperimentConfig, log: Callable[[str], None] | None = None) -> ResultRecord:
    rec = ResultRecord(exp.command, exp.resolved())
    manifold = exp.manifold()
    ctx, g, report = _levi_pass(manifold, exp.field_spec(), exp, theta_check=False)
    if log:
        log(f"  levi: {report.terms} terms, converged={report.converged}")
    envelopes = {at: k0_envelope_fit(ctx, field_at=at) for at in ("source", "target")}
    rec.outputs = {
        "report": report.to_dict(),
        "weak_initial": weak_initial_error(ctx, g),
        "k0_envelope": {at: {"c0": e.c0, "c1": e.c1} for at, e in envelopes.items()},
        "degree_leak": degree_block_leak(g),
    }
    rec.tables["levi_norms"] = [{"m": m, "norm": v} for m, v in enumerate(report.norms)]
    rec.contracts = [
        at_most("levi_vs_exact", report.defects["levi_vs_exact"], exp.tolerance("levi_vs_exact")),
        at_most("factorial_fit", report.fit.residual, exp.tolerance("fit")),
        holds("factorial_envelope_bounded", math.isfinite(report.fit.bound), f"a = {report.fit.bound:.6g}"),
        at_most("levi_supertrace", abs(report.defects["supertrace"]), exp.tolerance("supertrace")),
        at_most("heat_residual", report.defects["heat_residual"], exp.tolerance("heat_residual")),
    ]
    rec.contracts += [holds(f"k0_envelope_bounded[{at}]", e.bounded) for at, e in envelopes.items()]
    if exp.params["theta_check"] and manifold.dim == 1:
        zero = PRESETS[ZERO_FIELDS[manifold.dim]]
        _, _, flat = _levi_pass(manifold, zero, exp, theta_check=True)
        rec.outputs["zero_field"] = flat.to_dict()
        rec.contracts.append(at_most("theta_series", flat.defects["theta_series"], exp.tolerance("theta_series")))
    cb = exp.params["convolution_bound"]
    bound = convolution_bound_check(float(cb["c1"]), float(cb["c2"]), float(cb["eps"]), int(cb["samples"]),
                                    streams(exp.seed, 1)[0], nodes=int(cb["nodes"]))
    rec.outputs["convolution_bound"] = bound.to_dict()
    rec.tables["convolution_bound"] = bound.to_dict()["per_fraction"]
    rec.contracts += [
        holds("convolution_bound_stable", bound.stable, f"c = {bound.c:.6g}, refined {bound.c_refined:.6g}"),
        holds("convolution_bound_closed_form", bound.below_closed_form),
    ]
    return rec


# ---------- geodesic triangles ----------

def _random_spec(rng: np.random.Generator, surface: Surface, lo: float, hi: float) -> TriangleSpec:
    bound = min(surface.triangle_bound, 1.0)
    t, l = rng.uniform(lo, hi, 2) * bound
    theta = float(rng.uniform(0.4, math.pi - 0.2))
    x, y = rng.uniform(-0.3, 0.3, 2)
    u = UnitTangent(float(x), float(y), float(rng.uniform(-math.pi, math.pi)))
    return TriangleSpec(float(t), theta, float(l), u)


def closed_form_sas(kind: str, t: float, theta: float, l: float) -> tuple[float, float, float]:
    """(b, α, γ) by the law of cosines in the plane or on the unit sphere."""
    if kind == "plane":
        b = math.sqrt(t * t + l * l - 2.0 * t * l * math.cos(theta))
        alpha = math.atan2(l * math.sin(theta), t - l * math.cos(theta))
        return b, alpha, math.pi - theta - alpha
    hav = math.sin(0.5 * (t - l)) ** 2 + math.sin(t) * math.sin(l) * math.sin(0.5 * theta) ** 2
    b = 2.0 * math.asin(math.sqrt(hav))
    ct = math.cos(theta)
    alpha = math.atan2(math.sin(theta) * math.sin(l), math.sin(t) * math.cos(l) - math.cos(t) * math.sin(l) * ct)
    gamma = math.atan2(math.sin(theta) * math.sin(t), math.sin(l) * math.cos(t) - math.cos(l) * math.sin(t) * ct)
    return b, alpha, gamma


def _law_of_cosines(exp: ExperimentConfig, rng: np.random.Generator, surface: Surface) -> list[dict[str, Any]]:
    rows = []
    for _ in range(exp.samples("law")):
        spec = _random_spec(rng, surface, 0.2, 0.9)
        sol = solve_sas(surface, spec, verify=False)
        b, alpha, gamma = closed_form_sas(surface.kind, spec.t, spec.theta, spec.l)
        rows.append({"surface": surface.kind, "t": spec.t, "theta": spec.theta, "l": spec.l,
                     "b": sol.b, "alpha": sol.alpha, "gamma": sol.gamma, "b_expected": b,
                     "error": max(abs(sol.b - b), abs(sol.alpha - alpha), abs(sol.gamma - gamma))})
    return rows


def run_triangle(exp: ExperimentConfig, log: Callable[[str], None] | None = None) -> ResultRecord:
    rec = ResultRecord(exp.command, exp.resolved())
    surfaces = [exp.surface(k) for k in exp.params["surfaces"]]
    rngs = streams(exp.seed, 6 * len(surfaces))
    law_rows: list[dict[str, Any]] = []
    ident_rows: list[dict[str, Any]] = []
    second_rows: list[dict[str, Any]] = []
    comparison: dict[str, Any] = {}
    for i, surface in enumerate(surfaces):
        r_law, r_id, r_side, r_second, r_cmp, r_shoot = rngs[6 * i:6 * i + 6]
        kind = surface.kind
        constant = surface.constant_curvature is not None
        if constant:
            rows = _law_of_cosines(exp, r_law, surface)
            law_rows += rows
            tol = exp.tolerance("plane" if kind == "plane" else "sphere")
            rec.contracts.append(at_most(f"law_of_cosines[{kind}]", max(r["error"] for r in rows), tol))
            specs = [_random_spec(r_law, surface, 0.2, 0.9) for _ in range(exp.samples("jacobi"))]
            jac = max((jacobi_closed_form_gap(surface, s.u, s.t) for s in specs), default=0.0)
            comparison[f"jacobi_closed_form_gap[{kind}]"] = jac
            rec.contracts.append(at_most(f"jacobi_numeric[{kind}]", jac, exp.tolerance("jacobi")))

        gaps, failures = [], []
        for _ in range(exp.samples("identities")):
            spec = _random_spec(r_shoot, surface, 0.2, 0.8)
            try:
                gaps.append(solve_sas(surface, spec).disagreement)
            except (MethodDisagreementError, ShootingError) as e:
                failures.append(str(e))
        worst_gap = max(gaps, default=0.0)
        rec.contracts.append(holds(f"shooting_agrees[{kind}]", not failures and worst_gap <= DISAGREEMENT_TOL,
                                   failures[0] if failures else f"max gap {worst_gap:.3g}"))

        worst = {"i": 0.0, "ii": 0.0}
        closed = 0.0
        for _ in range(exp.samples("identities")):
            spec = _random_spec(r_id, surface, 0.2, 0.8)
            row: dict[str, Any] = {"surface": kind, "t": spec.t, "theta": spec.theta, "l": spec.l}
            for which in ("i", "ii"):
                row[which] = sas_identity_check(surface, spec, which)
                worst[which] = max(worst[which], row[which])
            if kind == "plane":
                row["ii_closed_form"] = sas_identity_check(surface, spec, "ii", closed_form=True)
                closed = max(closed, row["ii_closed_form"])
            ident_rows.append(row)
        rec.contracts += [at_most(f"identity_{w}[{kind}]", v, exp.tolerance("identity")) for w, v in worst.items()]
        if kind == "plane":
            rec.contracts.append(
                at_most("identity_ii_closed_form[plane]", closed, exp.tolerance("identity_closed_form")))
        if log:
            log(f"  triangle {kind}: identities (i) {worst['i']:.3g}, (ii) {worst['ii']:.3g}")

        if constant:
            side = max(side_derivative_gap(surface, _random_spec(r_side, surface, 0.2, 0.8))
                       for _ in range(exp.samples("side_derivative")))
            rec.contracts.append(at_most(f"side_derivative[{kind}]", side, exp.tolerance("side_derivative")))
            low, flagged = math.inf, 0
            for _ in range(exp.samples("second_derivative")):
                spec = _random_spec(r_second, surface, 0.05, 0.3)
                sd = second_derivative_check(surface, spec)
                low = min(low, sd.value)
                flagged += int(not sd.flag)
                if len(second_rows) < 50:
                    second_rows.append({"surface": kind, "t": spec.t, "theta": spec.theta, "l": spec.l,
                                        "value": sd.value, "finite_difference": sd.finite_difference})
            comparison[f"second_derivative_min[{kind}]"] = low
            rec.contracts.append(holds(f"second_derivative_at_least_one[{kind}]", flagged == 0,
                                       f"{flagged} specs below 1, minimum {low:.6g}"))
            sweep = comparison_sweep(kind, r_cmp, exp.samples("comparison"), float(exp.params["eps"]))
            comparison[kind] = sweep.to_dict()
            rec.contracts.append(holds(f"comparison[{kind}]", sweep.ok, f"{sweep.violations} violations"))
        else:
            eps = float(exp.params["eps"])
            ratios, bad = [], 0
            for _ in range(exp.samples("comparison_bump")):
                centre = r_cmp.uniform(-0.5, 0.5, 2)
                a, b, z = (tuple(centre + 0.5 * eps * r_cmp.uniform(-0.7, 0.7, 2)) for _ in range(3))
                res = comparison_check(surface, a, b, z, float(r_cmp.uniform()))
                ratios.append(res.ratio)
                bad += int(not res.flag)
            comparison[kind] = {"samples": len(ratios), "violations": bad, "infimum_ratio": min(ratios)}
            rec.contracts.append(holds(f"comparison[{kind}]", bad == 0, f"{bad} violations"))
    rec.tables["law_of_cosines"] = law_rows
    rec.tables["identities"] = ident_rows
    rec.tables["second_derivative"] = second_rows
    rec.outputs = {"comparison": comparison, "law_rows": len(law_rows), "identity_rows": len(ident_rows)}
    return rec


# ---------- runner ----------

RUNNERS: dict[str, Callable[..., ResultRecord]] = {
    "indices": run_indices,
    "supertrace": run_supertrace,
    "kernel-checks": run_kernel_checks,
    "levi": run_levi,
    "triangle": run_triangle,
}


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)


def write_record(rec: ResultRecord, out_path: Path) -> dict[str, str]:
    """JSON report at out_path, one CSV per table next to it."""
    files: dict[str, str] = {}
    for name, rows in rec.tables.items():
        path = out_path.with_name(f"{out_path.stem}.{name}.csv")
        files[name] = path.name
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as f:
            columns = list(rows[0]) if rows else []
            for row in rows[1:]:
                columns += [k for k in row if k not in columns]
            w = csv.writer(f, lineterminator="\n")
            w.writerow(columns)
            for row in rows:
                w.writerow([_cell(row.get(c)) for c in columns])
    _write_text(out_path, json.dumps(rec.to_dict(files), indent=2, ensure_ascii=False) + "\n")
    return files


def _cell(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def run_experiment(*, cfg: HHConfig, exp: ExperimentConfig, out_path: Path | None = None) -> dict[str, Any]:
    log_file = cfg.log_file
    store = RunStore(cfg.db_path)
    out_path = Path(out_path) if out_path is not None else cfg.data_dir / "runs" / f"{exp.command}.json"
    out_path = out_path.resolve()

    run_id = new_run_id()
    started_at = now_iso()
    store.create_run(run_id=run_id, command=exp.command, seed=exp.seed, started_at=started_at,
                     output_path=str(out_path), meta={"config": exp.resolved()})
    log_line(log_file, f"--- Run start {exp.command} seed={exp.seed} run_id={run_id} ---")
    clock = time.perf_counter()

    def perform() -> ResultRecord:
        runner = RUNNERS[exp.command]
        if exp.command in ("levi", "triangle"):
            return runner(exp, log=lambda msg: log_line(log_file, msg))
        return runner(exp)

    def validate(rec: ResultRecord) -> tuple[str, dict[str, Any]]:
        return tier(rec.contracts)

    try:
        rec = perform()
    except Exception as e:
        wall = time.perf_counter() - clock
        store.finish_run(run_id=run_id, status="error", message=f"{type(e).__name__}: {e}",
                         finished_at=now_iso(), wall_time_s=wall)
        log_line(log_file, f"--- Run end {exp.command} status=error wall={wall:.2f}s ---")
        raise

    status, vmeta = validate(rec)
    files = write_record(rec, out_path)
    for c in rec.contracts:
        if not c.ok:
            log_line(log_file, f"  FAIL {c.message}")
    wall = time.perf_counter() - clock
    message = f"{status} | {sum(c.ok for c in rec.contracts)}/{len(rec.contracts)} contracts"
    store.finish_run(run_id=run_id, status=status.lower(), message=message, finished_at=now_iso(),
                     wall_time_s=wall, meta_updates=vmeta)
    log_line(log_file, f"--- Run end {exp.command} status={status.lower()} wall={wall:.2f}s ---")

    return {"run_id": run_id, "command": exp.command, "status": status, "ok": status == "PASS",
            "message": message, "output_path": str(out_path), "tables": sorted(files.values())}
