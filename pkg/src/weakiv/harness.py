"""Batch harness: power simulation, optimizer diagnostics, CSV test runs.

Replications are driven by derived counter-based streams, so output is
byte-identical for a fixed (config, seed) regardless of thread count. Within
a replication, all requested tests share the same data draw and the same
simulated pivotal draws for their conditional critical values.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, replace

import numpy as np
from scipy.stats import chi2, norm

from . import _kernels
from .conditional import (
    ConditionalQuantileSpec,
    ConfidenceSet,
    NullSimulator,
    TestReport,
    confidence_set,
    run_test,
)
from .designs import DesignSpec, assemble, draw_vec_r0
from .model import (
    DataError,
    Hypothesis,
    IVDataset,
    ReducedForm,
    STContext,
    estimate_sigma_plugin,
    partial_out,
    reduce as reduce_data,
)
from .numerics import (
    DEFAULT_QUADRATURE_NODES,
    RngStream,
    SymPD,
    empirical_quantile,
)
from .statistics import LRContext, LROptConfig, qlr

POWER_TESTS = (
    "ar",
    "lm",
    "wald",
    "cqlr",
    "clr",
    "clr-naive",
    "clr-infeasible",
    "cil",
    "cil0",
)
CSV_TESTS = ("ar", "lm", "wald", "cqlr", "clr", "cil", "cil0", "lc")
K1_TESTS = ("ar", "lm", "wald")

DIAG_SCHEMES = (("1,No", 1, False), ("0,Yes", 0, True), ("51,No", 51, False),
                ("50,Yes", 50, True))


@dataclass(frozen=True)
class RunConfig:
    """Harness configuration mirroring the CLI flags."""

    command: str
    design: DesignSpec | None = None
    input_path: str | None = None
    tests: tuple[str, ...] = ("ar",)
    alpha: float = 0.05
    reps: int = 1000
    quantile_sims: int = 1000
    seed: int = 0
    beta_grid: tuple[float, float, float] = (-6.0, 6.0, 1.0)
    lr_starts: int = 50
    lr_include_beta0: bool = True
    bandwidth: int = 0
    sigma_file: str | None = None
    out_path: str | None = None
    threads: int = 0
    beta0: float = 0.0
    lc_weight: float = 0.5

    def __post_init__(self) -> None:
        if self.reps < 1:
            raise ValueError("reps must be at least 1")
        lo, hi, step = self.beta_grid
        if step <= 0 or hi < lo:
            raise ValueError("beta grid must satisfy min <= max with positive step")


@dataclass(frozen=True)
class PowerRow:
    design: str
    k: int
    lambda_per_k: float
    beta_rescaled: float
    test: str
    reject_rate: float
    mc_se: float
    reps: int
    seed: int


def grid_points(beta_grid: tuple[float, float, float]) -> np.ndarray:
    lo, hi, step = beta_grid
    n = int(round((hi - lo) / step))
    return lo + step * np.arange(n + 1)


def _base_lr_config(cfg: RunConfig) -> LROptConfig:
    return LROptConfig(
        n_random_starts=cfg.lr_starts, include_beta0=cfg.lr_include_beta0
    )


def _lr_variant(base: LROptConfig, variant: str, delta_true: float) -> LROptConfig:
    if variant == "clr":
        return base
    if variant == "clr-naive":
        return replace(
            base,
            n_random_starts=1,
            include_beta0=False,
            include_extra_betas=(),
            random_start_domain="beta",
        )
    if variant == "clr-infeasible":
        return replace(base, include_extra_betas=(delta_true,))
    raise ValueError(f"unknown clr variant {variant!r}")


def simulate_power(cfg: RunConfig) -> list[PowerRow]:
    """Rejection rates over the rescaled beta grid for each requested test.

    The grid is in units of beta * sqrt(lambda). Per replication, all tests
    see the same draw of the moment matrix and the conditional quantiles
    share one batch of simulated pivotal draws.
    """
    design = cfg.design
    if design is None:
        raise ValueError("power simulation needs a design")
    for t in cfg.tests:
        if t not in POWER_TESTS:
            raise ValueError(f"unknown power test {t!r}; choose from {POWER_TESTS}")
    _kernels.set_num_threads(cfg.threads)

    sigma0, mu = assemble(design)
    k = design.k
    lam = design.lam
    alpha = cfg.alpha
    stctx = STContext(sigma0, 0.0)
    root = RngStream(cfg.seed)

    needs_il = any(t in ("cil", "cil0") for t in cfg.tests)
    clr_variants = [t for t in cfg.tests if t.startswith("clr")]
    needs_cqlr = "cqlr" in cfg.tests
    lr_base = _base_lr_config(cfg)

    sim = NullSimulator(sigma0, quad_nodes=DEFAULT_QUADRATURE_NODES,
                        lr_config=lr_base)
    if needs_il:
        ilctx = sim.ilctx
        lognode_il = ilctx.log_weight("il")
        lognode_il0 = ilctx.log_weight("il0")

    ar_crit = float(chi2.ppf(1.0 - alpha, k))
    lm_crit = float(chi2.ppf(1.0 - alpha, 1))
    z_crit = float(norm.ppf(1.0 - alpha / 2.0))
    lm_map = stctx.c_mat.values @ stctx.d_bar.values

    # original-coordinate variance for the Wald statistic
    if "wald" in cfg.tests:
        b0inv = np.array([[1.0, 0.0], [design.beta0, 1.0]])
        bk = np.kron(b0inv.T, np.eye(k))
        sigma_orig = bk @ sigma0.values @ bk.T

    rows: list[PowerRow] = []
    xs = grid_points(cfg.beta_grid)
    for gi, x in enumerate(xs):
        beta = float(x) / math.sqrt(lam)
        delta = beta - design.beta0
        vecs = draw_vec_r0(sigma0, mu, delta, cfg.reps, root.child("draws", gi))
        s_obs, t_obs = stctx.st_batch(vecs)
        ar_obs = np.einsum("ri,ri->r", s_obs, s_obs)
        u_dirs = t_obs @ lm_map.T
        uu = np.einsum("ri,ri->r", u_dirs, u_dirs)
        su = np.einsum("ri,ri->r", s_obs, u_dirs)
        lm_obs = su * su / uu
        t_sq = np.einsum("ri,ri->r", t_obs, t_obs)

        decisions: dict[str, np.ndarray] = {}
        if "ar" in cfg.tests:
            decisions["ar"] = ar_obs > ar_crit
        if "lm" in cfg.tests:
            decisions["lm"] = lm_obs > lm_crit
        if "wald" in cfg.tests:
            r1 = vecs[:, :k] + design.beta0 * vecs[:, k:]
            r2 = vecs[:, k:]
            den = np.einsum("ri,ri->r", r2, r2)
            beta_hat = np.einsum("ri,ri->r", r2, r1) / den
            s11 = sigma_orig[:k, :k]
            s12 = sigma_orig[:k, k:]
            s22 = sigma_orig[k:, k:]
            quad_11 = np.einsum("ri,ij,rj->r", r2, s11, r2)
            quad_12 = np.einsum("ri,ij,rj->r", r2, s12 + s12.T, r2)
            quad_22 = np.einsum("ri,ij,rj->r", r2, s22, r2)
            var = (
                quad_11 - beta_hat * quad_12 + beta_hat**2 * quad_22
            ) / (den * den)
            w_stat = np.abs(beta_hat - design.beta0) / np.sqrt(var)
            decisions["wald"] = w_stat > z_crit

        simulated = [t for t in cfg.tests if t not in ("ar", "lm", "wald")]
        if simulated:
            variant_sims = {}
            for variant in clr_variants:
                vsim = NullSimulator(
                    sigma0, lr_config=_lr_variant(lr_base, variant, delta)
                )
                vsim._lrctx = sim.lrctx  # share the inverse-variance cache
                variant_sims[variant] = vsim
            for name in simulated:
                decisions[name] = np.empty(cfg.reps, dtype=bool)
            for r in range(cfg.reps):
                t_vec = t_obs[r]
                qrng = root.child("q", gi, r)
                s_sims = qrng.child("s_draws").generator().standard_normal(
                    (cfg.quantile_sims, k)
                )
                eval_rng = qrng.child("eval")
                if needs_cqlr:
                    vals = sim.values("cqlr", s_sims, t_vec, eval_rng)
                    kappa = empirical_quantile(vals, 1.0 - alpha)
                    stat = qlr(float(ar_obs[r]), float(lm_obs[r]), t_vec).value
                    decisions["cqlr"][r] = stat > kappa
                if needs_il:
                    vec_rows = stctx.reconstruct(s_sims, t_vec)
                    w_obs = ilctx.w_of(vecs[r])
                    w_all = np.vstack([w_obs[None, :], vec_rows @ ilctx.inv_sqrt.T])
                    qf = _kernels.qf_batch(ilctx.basis, w_all)
                    for name, lognode in (("cil", lognode_il), ("cil0", lognode_il0)):
                        if name not in cfg.tests:
                            continue
                        logvals = 0.5 * (qf - t_sq[r]) + lognode[:, None]
                        lv = _kernels.logsumexp_rows(logvals)
                        kappa = empirical_quantile(lv[1:], 1.0 - alpha)
                        decisions[name][r] = lv[0] > kappa
                for variant in clr_variants:
                    vrng = eval_rng.child(variant)
                    if variant == "clr-naive":
                        stat, sims = variant_sims[variant].naive_clr(
                            s_obs[r], s_sims, t_vec, vrng
                        )
                        kappa = empirical_quantile(sims, 1.0 - alpha)
                        decisions[variant][r] = stat > kappa
                    else:
                        s_all = np.vstack([s_obs[r][None, :], s_sims])
                        vals = variant_sims[variant].values("clr", s_all, t_vec, vrng)
                        kappa = empirical_quantile(vals[1:], 1.0 - alpha)
                        decisions[variant][r] = vals[0] > kappa

        for name in cfg.tests:
            rate = float(np.mean(decisions[name]))
            se = math.sqrt(rate * (1.0 - rate) / cfg.reps)
            rows.append(
                PowerRow(
                    design=design.kind,
                    k=k,
                    lambda_per_k=design.lambda_per_k,
                    beta_rescaled=float(x),
                    test=name,
                    reject_rate=rate,
                    mc_se=se,
                    reps=cfg.reps,
                    seed=cfg.seed,
                )
            )
    rows.sort(key=lambda row: (row.test, row.beta_rescaled))
    return rows


def run_diag_opt(cfg: RunConfig) -> tuple[dict, dict]:
    """Start-scheme comparison tables for the likelihood optimization.

    For each pair of schemes (number of random starts, include the null
    angle), reports the percentage of null draws where the column scheme
    improves on the row scheme by more than 0.1% of the statistic, and the
    mean percentage improvement among those draws.
    """
    design = cfg.design
    if design is None or design.kind != "ns":
        raise ValueError("optimizer diagnostics run on the near-singular design")
    _kernels.set_num_threads(cfg.threads)
    sigma0, mu = assemble(design)
    k = design.k
    stctx = STContext(sigma0, 0.0)
    root = RngStream(cfg.seed)
    vecs = draw_vec_r0(sigma0, mu, 0.0, cfg.reps, root.child("diag-draws"))
    _, t_obs = stctx.st_batch(vecs)
    t_sq = np.einsum("ri,ri->r", t_obs, t_obs)

    lrctx = LRContext(sigma0)
    q = vecs @ lrctx.sigma_inv.T
    v1s = np.ascontiguousarray(q[:, :k])
    v2s = np.ascontiguousarray(q[:, k:])

    lr_values: dict[str, np.ndarray] = {}
    for si, (label, n_rand, with_null) in enumerate(DIAG_SCHEMES):
        if n_rand > 0:
            gen = root.child("diag-starts", si).generator()
            rand = gen.uniform(-math.pi / 2, math.pi / 2, size=(cfg.reps, n_rand))
        else:
            rand = np.empty((cfg.reps, 0))
        fixed = np.array([0.0]) if with_null else np.empty(0)
        best_f, _, _ = lrctx.multistart(v1s, v2s, rand, fixed, 1e-10, 200)
        lr_values[label] = best_f - t_sq

    pct: dict[tuple[str, str], float] = {}
    factor: dict[tuple[str, str], float] = {}
    for row_label, *_ in DIAG_SCHEMES:
        for col_label, *_ in DIAG_SCHEMES:
            if row_label == col_label:
                continue
            base = lr_values[row_label]
            other = lr_values[col_label]
            rel = (other - base) / np.maximum(np.abs(base), 1e-12)
            better = rel > 1e-3
            pct[(row_label, col_label)] = 100.0 * float(np.mean(better))
            factor[(row_label, col_label)] = (
                100.0 * float(np.mean(rel[better])) if np.any(better) else 0.0
            )
    return pct, factor


# ---------------------------------------------------------------------------
# CSV data path


def load_csv_dataset(path: str) -> IVDataset:
    """Read a dataset with header columns y1, y2, x1..xp, z1..zk."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        cols = {name: i for i, name in enumerate(header)}
        if "y1" not in cols or "y2" not in cols:
            raise DataError(f"{path}: header must contain y1 and y2 columns")
        x_names = sorted(
            (h for h in header if h.startswith("x") and h[1:].isdigit()),
            key=lambda h: int(h[1:]),
        )
        z_names = sorted(
            (h for h in header if h.startswith("z") and h[1:].isdigit()),
            key=lambda h: int(h[1:]),
        )
        if not z_names:
            raise DataError(f"{path}: no instrument columns z1..zk found")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise DataError(
                    f"{path}: line {lineno}: expected {len(header)} fields, "
                    f"got {len(row)}"
                )
            try:
                rows.append([float(cell) for cell in row])
            except ValueError as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from None
    if not rows:
        raise DataError(f"{path}: no data rows")
    data = np.asarray(rows, dtype=float)
    y1 = data[:, cols["y1"]]
    y2 = data[:, cols["y2"]]
    x = data[:, [cols[c] for c in x_names]] if x_names else np.empty((data.shape[0], 0))
    z = data[:, [cols[c] for c in z_names]]
    return IVDataset(y1=y1, y2=y2, x=x, ztilde=z)


def load_sigma_file(path: str, k: int) -> SymPD:
    mat = np.loadtxt(path, delimiter=",", ndmin=2)
    if mat.shape != (2 * k, 2 * k):
        raise DataError(
            f"{path}: variance must be {2 * k} x {2 * k}, got {mat.shape}"
        )
    return SymPD(mat)


def reduced_form_from_csv(cfg: RunConfig) -> ReducedForm:
    if not cfg.input_path:
        raise DataError("an input CSV path is required")
    data = load_csv_dataset(cfg.input_path)
    z, y = partial_out(data)
    if cfg.sigma_file:
        sigma = load_sigma_file(cfg.sigma_file, data.k)
    else:
        sigma = estimate_sigma_plugin(z, y, cfg.bandwidth)
    return reduce_data(z, y, sigma)


def _validate_csv_tests(tests, k: int) -> None:
    for t in tests:
        if t not in CSV_TESTS:
            raise DataError(f"unknown test {t!r}; choose from {CSV_TESTS}")
        if k < 2 and t in ("cil", "cil0"):
            raise DataError("CIL requires k >= 2")
        if k < 2 and t not in K1_TESTS:
            raise DataError(
                f"{t} is unavailable for k = 1; only {K1_TESTS} are permitted "
                "(AR is the optimal choice in the just-identified model)"
            )


def run_csv_tests(cfg: RunConfig, force_simulation: bool = False) -> list[TestReport]:
    """Run the requested tests at beta0 on a CSV dataset."""
    rf = reduced_form_from_csv(cfg)
    _validate_csv_tests(cfg.tests, rf.k)
    _kernels.set_num_threads(cfg.threads)
    hyp = Hypothesis(beta0=cfg.beta0, alpha=cfg.alpha)
    reports = []
    for i, name in enumerate(cfg.tests):
        spec = ConditionalQuantileSpec(
            alpha=cfg.alpha,
            rng=RngStream(cfg.seed).child("test", i),
            n_sims=cfg.quantile_sims,
        )
        reports.append(
            run_test(
                name,
                rf,
                hyp,
                spec,
                lr_config=_base_lr_config(cfg),
                lc_weight=cfg.lc_weight,
                force_simulation=force_simulation,
            )
        )
    return reports


def run_confset(cfg: RunConfig) -> tuple[str, ConfidenceSet]:
    """Invert the (single) requested test over the beta0 grid."""
    rf = reduced_form_from_csv(cfg)
    if len(cfg.tests) != 1:
        raise DataError("confidence sets invert exactly one test at a time")
    name = cfg.tests[0]
    _validate_csv_tests((name,), rf.k)
    _kernels.set_num_threads(cfg.threads)
    spec = ConditionalQuantileSpec(
        alpha=cfg.alpha, rng=RngStream(cfg.seed).child("confset"),
        n_sims=cfg.quantile_sims,
    )
    grid = grid_points(cfg.beta_grid)
    cs = confidence_set(
        rf,
        grid,
        name,
        spec,
        lr_config=_base_lr_config(cfg),
        lc_weight=cfg.lc_weight,
    )
    return name, cs


# ---------------------------------------------------------------------------
# CSV output (RFC-4180, UTF-8, '.' decimal)


def _open_out(path: str | None):
    if path is None or path == "-":
        import sys

        return sys.stdout, False
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    return open(path, "w", newline="", encoding="utf-8"), True


def write_power_csv(rows: list[PowerRow], path: str | None) -> None:
    fh, close = _open_out(path)
    try:
        writer = csv.writer(fh)
        writer.writerow(
            ["design", "k", "lambda_per_k", "beta_rescaled", "test",
             "reject_rate", "mc_se", "reps", "seed"]
        )
        for row in rows:
            writer.writerow(
                [row.design, row.k, _fmt(row.lambda_per_k), _fmt(row.beta_rescaled),
                 row.test, _fmt(row.reject_rate), _fmt(row.mc_se), row.reps, row.seed]
            )
    finally:
        if close:
            fh.close()


def write_reports_csv(reports: list[TestReport], beta0: float, path: str | None) -> None:
    fh, close = _open_out(path)
    try:
        writer = csv.writer(fh)
        writer.writerow(
            ["test", "beta0", "statistic", "critical_value", "reject",
             "n_sims", "seed"]
        )
        for rep in reports:
            writer.writerow(
                [rep.name, _fmt(beta0), _fmt(rep.statistic),
                 _fmt(rep.critical_value), int(rep.reject), rep.n_sims, rep.seed]
            )
    finally:
        if close:
            fh.close()


def write_confset_csv(name: str, cs: ConfidenceSet, path: str | None) -> None:
    fh, close = _open_out(path)
    try:
        writer = csv.writer(fh)
        writer.writerow(
            ["section", "test", "beta0", "statistic", "critical_value", "reject",
             "interval_low", "interval_high", "note"]
        )
        for i, b0 in enumerate(cs.grid):
            writer.writerow(
                ["point", name, _fmt(b0), _fmt(cs.statistics[i]),
                 _fmt(cs.critical_values[i]), int(cs.rejected[i]), "", "", ""]
            )
        for lo, hi in cs.intervals:
            writer.writerow(
                ["interval", name, "", "", "", "", _fmt(lo), _fmt(hi), ""]
            )
        if cs.is_empty:
            writer.writerow(["note", name, "", "", "", "", "", "", "empty set"])
        if cs.may_extend_below:
            writer.writerow(
                ["note", name, "", "", "", "", "", "",
                 "set may extend beyond grid (lower)"]
            )
        if cs.may_extend_above:
            writer.writerow(
                ["note", name, "", "", "", "", "", "",
                 "set may extend beyond grid (upper)"]
            )
    finally:
        if close:
            fh.close()


def write_diag_csv(pct: dict, factor: dict, out_path: str | None) -> tuple[str, str]:
    """Write the two scheme-comparison tables; returns the paths used."""
    if out_path is None:
        raise ValueError("optimizer diagnostics need an output path")
    stem, ext = os.path.splitext(out_path)
    ext = ext or ".csv"
    paths = (stem + "_percentage" + ext, stem + "_factor" + ext)
    labels = [s[0] for s in DIAG_SCHEMES]
    for table, path in zip((pct, factor), paths):
        fh, close = _open_out(path)
        try:
            writer = csv.writer(fh)
            writer.writerow(["scheme"] + labels)
            for row_label in labels:
                out = [row_label]
                for col_label in labels:
                    if row_label == col_label:
                        out.append("")
                    else:
                        out.append(_fmt(table[(row_label, col_label)]))
                writer.writerow(out)
        finally:
            if close:
                fh.close()
    return paths


def _fmt(x: float) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".12g")


def rates_by_test(rows: list[PowerRow]) -> dict[str, dict[float, float]]:
    """Convenience view: test -> {beta_rescaled -> rate}."""
    out: dict[str, dict[float, float]] = {}
    for row in rows:
        out.setdefault(row.test, {})[row.beta_rescaled] = row.reject_rate
    return out
