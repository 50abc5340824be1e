import csv
import math
import os

import numpy as np
import pytest

from weakiv.conditional import ConditionalQuantileSpec, run_test
from weakiv.designs import DesignSpec, assemble, draw_vec_r0
from weakiv.harness import (
    RunConfig,
    grid_points,
    load_csv_dataset,
    rates_by_test,
    run_csv_tests,
    run_diag_opt,
    simulate_power,
    write_power_csv,
)
from weakiv.model import DataError, Hypothesis, ReducedForm, unvec
from weakiv.numerics import RngStream, SymPD


def write_dataset(path, n=300, k=3, p=1, beta=1.0, pi=0.6, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, p))
    z = rng.standard_normal((n, k))
    u = rng.standard_normal(n)
    v2 = 0.6 * u + 0.8 * rng.standard_normal(n)
    y2 = z @ np.full(k, pi) + x[:, 0] * 0.3 + v2
    y1 = y2 * beta + x[:, 0] * 0.5 + u
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["y1", "y2"] + [f"x{i+1}" for i in range(p)]
                        + [f"z{i+1}" for i in range(k)])
        for i in range(n):
            writer.writerow([y1[i], y2[i]] + list(x[i]) + list(z[i]))
    return path


class TestGrid:
    def test_grid_points(self):
        np.testing.assert_allclose(grid_points((-2.0, 2.0, 1.0)), [-2, -1, 0, 1, 2])
        np.testing.assert_allclose(grid_points((0.0, 0.0, 1.0)), [0.0])


class TestCsvLoading:
    def test_round_trip(self, tmp_path):
        path = write_dataset(str(tmp_path / "d.csv"))
        data = load_csv_dataset(path)
        assert data.n == 300 and data.k == 3 and data.p == 1

    def test_line_numbered_error(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("y1,y2,z1\n1.0,2.0,3.0\n1.0,oops,3.0\n")
        with pytest.raises(DataError, match="line 3"):
            load_csv_dataset(str(path))

    def test_missing_instruments(self, tmp_path):
        path = tmp_path / "noz.csv"
        path.write_text("y1,y2,x1\n1.0,2.0,3.0\n")
        with pytest.raises(DataError, match="instrument"):
            load_csv_dataset(str(path))


class TestCsvTests:
    def test_k1_restrictions(self, tmp_path):
        path = write_dataset(str(tmp_path / "k1.csv"), k=1)
        cfg = RunConfig(command="test", input_path=path, tests=("cil",), beta0=1.0)
        with pytest.raises(DataError, match="CIL requires k >= 2"):
            run_csv_tests(cfg)
        cfg2 = RunConfig(command="test", input_path=path, tests=("cqlr",), beta0=1.0)
        with pytest.raises(DataError, match="k = 1"):
            run_csv_tests(cfg2)

    def test_reports_at_truth(self, tmp_path):
        path = write_dataset(str(tmp_path / "d.csv"), beta=1.0, seed=3)
        cfg = RunConfig(
            command="test", input_path=path,
            tests=("ar", "lm", "wald", "cqlr", "cil"),
            beta0=1.0, seed=5, quantile_sims=300,
        )
        reports = run_csv_tests(cfg)
        assert len(reports) == 5
        assert all(np.isfinite(r.statistic) for r in reports)

    def test_ar_coverage_at_truth(self, tmp_path):
        rejections = 0
        n_cases = 100
        for seed in range(n_cases):
            path = write_dataset(str(tmp_path / f"c{seed}.csv"), n=200, seed=seed)
            cfg = RunConfig(command="test", input_path=path, tests=("ar",),
                            beta0=1.0, seed=seed)
            rep = run_csv_tests(cfg)[0]
            rejections += rep.reject
            os.unlink(path)
        assert rejections / n_cases < 0.12  # ~5% plus plug-in noise


class TestSimulatePower:
    def test_determinism(self):
        cfg = RunConfig(
            command="power",
            design=DesignSpec(kind="ns", k=3),
            tests=("ar", "cil"),
            reps=40, quantile_sims=100, seed=12, beta_grid=(-2.0, 2.0, 2.0),
        )
        a = simulate_power(cfg)
        b = simulate_power(cfg)
        assert a == b

    def test_threads_do_not_change_rows(self):
        base = dict(
            command="power",
            design=DesignSpec(kind="ns", k=3),
            tests=("cil", "clr"),
            reps=10, quantile_sims=100, seed=2, beta_grid=(0.0, 2.0, 2.0),
            lr_starts=5,
        )
        a = simulate_power(RunConfig(**base, threads=1))
        b = simulate_power(RunConfig(**base, threads=2))
        assert a == b

    def test_matches_run_test_decisions(self):
        # the harness fast path and the public run_test API agree rep by rep
        design = DesignSpec(kind="ns", k=3)
        cfg = RunConfig(
            command="power", design=design, tests=("ar", "lm", "wald", "cqlr",
                                                   "cil", "cil0"),
            reps=30, quantile_sims=200, seed=42, beta_grid=(1.0, 1.0, 1.0),
        )
        rows = simulate_power(cfg)
        rates = rates_by_test(rows)

        sigma0, mu = assemble(design)
        root = RngStream(42)
        lam = design.lam
        delta = 1.0 / math.sqrt(lam)
        vecs = draw_vec_r0(sigma0, mu, delta, cfg.reps, root.child("draws", 0))
        agree = {name: 0 for name in cfg.tests}
        for r in range(cfg.reps):
            rf = ReducedForm(R=unvec(vecs[r], 3), sigma=sigma0)
            hyp = Hypothesis(beta0=0.0, alpha=cfg.alpha)
            for name in cfg.tests:
                spec = ConditionalQuantileSpec(
                    alpha=cfg.alpha, rng=root.child("q", 0, r),
                    n_sims=cfg.quantile_sims,
                )
                rep = run_test(name, rf, hyp, spec)
                agree[name] += rep.reject
        for name in cfg.tests:
            assert agree[name] / cfg.reps == pytest.approx(
                rates[name][1.0], abs=1e-12
            )

    def test_power_rows_have_se(self, tmp_path):
        cfg = RunConfig(
            command="power", design=DesignSpec(kind="ns", k=3),
            tests=("ar",), reps=50, seed=0, beta_grid=(0.0, 0.0, 1.0),
        )
        rows = simulate_power(cfg)
        out = tmp_path / "p.csv"
        write_power_csv(rows, str(out))
        text = out.read_text().splitlines()
        assert text[0].split(",")[:7] == [
            "design", "k", "lambda_per_k", "beta_rescaled", "test",
            "reject_rate", "mc_se",
        ]
        rate = rows[0].reject_rate
        assert rows[0].mc_se == pytest.approx(
            math.sqrt(rate * (1 - rate) / 50)
        )


class TestDiagOpt:
    def test_requires_ns(self):
        cfg = RunConfig(
            command="diag-opt",
            design=DesignSpec(kind="homoskedastic", k=3, rho=0.5),
            reps=10, seed=0,
        )
        with pytest.raises(ValueError, match="near-singular"):
            run_diag_opt(cfg)

    def test_tables_have_off_diagonal_pairs(self):
        cfg = RunConfig(
            command="diag-opt", design=DesignSpec(kind="ns", k=3), reps=50,
            seed=0,
        )
        pct, factor = run_diag_opt(cfg)
        assert len(pct) == 12 and len(factor) == 12
        assert all(0.0 <= v <= 100.0 for v in pct.values())
