"""Batch command-line interface.

Commands: ``test`` (run tests on a CSV dataset), ``quantile`` (same, but
always simulating the critical values), ``power`` (design-based rejection
rates over a rescaled beta grid), ``confset`` (grid inversion on a CSV
dataset), ``diag-opt`` (optimizer start-scheme comparison tables).

Flags may also be supplied through a flat ``key=value`` config file via
``--config``; explicit flags win. Exit codes: 0 ok, 1 usage error, 2 data
error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .designs import DesignSpec
from .harness import (
    RunConfig,
    run_confset,
    run_csv_tests,
    run_diag_opt,
    simulate_power,
    write_confset_csv,
    write_diag_csv,
    write_power_csv,
    write_reports_csv,
)
from .model import DataError
from .numerics import NumericalError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on usage problems, not argparse's 2
        raise UsageError(message)


_DEFAULTS = {
    "design": None,
    "k": 5,
    "lambda_per_k": 2.0,
    "rho": 0.0,
    "alpha": 0.05,
    "reps": 1000,
    "quantile_sims": 1000,
    "seed": 0,
    "beta_grid": "-6:6:1",
    "tests": "ar",
    "lr_starts": 50,
    "lr_include_beta0": "true",
    "bandwidth": 0,
    "sigma_file": None,
    "in_path": None,
    "out": None,
    "threads": 0,
    "beta0": 0.0,
    "lc_weight": 0.5,
    "mu_shape": "",
    "sigma0_file": None,
}


def build_parser() -> _Parser:
    p = _Parser(prog="weakiv", description=__doc__,
                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--command", required=False,
                   choices=["test", "power", "confset", "quantile", "diag-opt"])
    p.add_argument("--config", help="flat key=value config file; flags win")
    p.add_argument("--design", choices=["homoskedastic", "ns", "custom"])
    p.add_argument("--k", type=int)
    p.add_argument("--lambda-per-k", dest="lambda_per_k", type=float)
    p.add_argument("--rho", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--reps", type=int)
    p.add_argument("--quantile-sims", dest="quantile_sims", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--beta-grid", dest="beta_grid", help="min:max:step")
    p.add_argument("--tests", help="comma-separated test names")
    p.add_argument("--lr-starts", dest="lr_starts", type=int)
    p.add_argument("--lr-include-beta0", dest="lr_include_beta0",
                   choices=["true", "false"])
    p.add_argument("--bandwidth", type=int)
    p.add_argument("--sigma-file", dest="sigma_file",
                   help="known 2k x 2k variance of vec(R), CSV")
    p.add_argument("--sigma0-file", dest="sigma0_file",
                   help="custom-design 2k x 2k null-rotated variance, CSV")
    p.add_argument("--mu-shape", dest="mu_shape", choices=["e1", "ones"])
    p.add_argument("--in", dest="in_path", help="input dataset CSV")
    p.add_argument("--out", help="output CSV path (default: stdout)")
    p.add_argument("--threads", type=int)
    p.add_argument("--beta0", type=float, help="null value for test/quantile/confset")
    p.add_argument("--lc-weight", dest="lc_weight", type=float,
                   help="weight m on AR in the linear-combination test")
    return p


def read_config_file(path: str) -> dict:
    out = {}
    try:
        with open(path, encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise UsageError(f"{path}: line {lineno}: expected key=value")
                key, value = line.split("=", 1)
                key = key.strip().replace("-", "_")
                if key == "in":
                    key = "in_path"
                out[key] = value.strip()
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from None
    return out


def _coerce(key: str, value):
    if value is None or not isinstance(value, str):
        return value
    kind = type(_DEFAULTS.get(key, ""))
    if key in ("beta_grid", "tests", "lr_include_beta0", "mu_shape"):
        return value
    if kind is int:
        return int(value)
    if kind is float:
        return float(value)
    return value


def merge_options(args: argparse.Namespace) -> dict:
    cfg_file = read_config_file(args.config) if args.config else {}
    merged = dict(_DEFAULTS)
    merged["command"] = None
    for key, value in cfg_file.items():
        if key not in merged and key != "command":
            raise UsageError(f"unknown config key {key!r}")
        merged[key] = _coerce(key, value)
    for key in list(merged):
        cli_value = getattr(args, key, None)
        if cli_value is not None:
            merged[key] = cli_value
    return merged


def _parse_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    v = str(value).strip().lower()
    if v in ("true", "1", "yes", "on"):
        return True
    if v in ("false", "0", "no", "off"):
        return False
    raise UsageError(f"expected a boolean, got {value!r}")


def _parse_grid(text: str) -> tuple[float, float, float]:
    parts = str(text).split(":")
    if len(parts) != 3:
        raise UsageError(f"beta grid must be min:max:step, got {text!r}")
    try:
        lo, hi, step = (float(p) for p in parts)
    except ValueError:
        raise UsageError(f"beta grid must be numeric, got {text!r}") from None
    if step <= 0 or hi < lo:
        raise UsageError("beta grid must satisfy min <= max with positive step")
    return lo, hi, step


def _build_design(opt: dict) -> DesignSpec | None:
    if opt["design"] is None:
        return None
    kind = opt["design"]
    custom_blocks = None
    if kind == "custom":
        if not opt["sigma0_file"]:
            raise UsageError("custom designs need --sigma0-file")
        k = int(opt["k"])
        mat = np.loadtxt(opt["sigma0_file"], delimiter=",", ndmin=2)
        if mat.shape != (2 * k, 2 * k):
            raise DataError(
                f"{opt['sigma0_file']}: expected a {2 * k} x {2 * k} matrix, "
                f"got {mat.shape}"
            )
        custom_blocks = (mat[:k, :k], mat[:k, k:], mat[k:, k:])
    return DesignSpec(
        kind=kind,
        k=int(opt["k"]),
        lambda_per_k=float(opt["lambda_per_k"]),
        rho=float(opt["rho"]),
        mu_shape=str(opt["mu_shape"]),
        beta0=float(opt["beta0"]),
        custom_blocks=custom_blocks,
    )


def build_run_config(opt: dict) -> RunConfig:
    tests = tuple(t.strip() for t in str(opt["tests"]).split(",") if t.strip())
    if not tests:
        raise UsageError("at least one test is required")
    return RunConfig(
        command=opt["command"],
        design=_build_design(opt),
        input_path=opt["in_path"],
        tests=tests,
        alpha=float(opt["alpha"]),
        reps=int(opt["reps"]),
        quantile_sims=int(opt["quantile_sims"]),
        seed=int(opt["seed"]),
        beta_grid=_parse_grid(opt["beta_grid"]),
        lr_starts=int(opt["lr_starts"]),
        lr_include_beta0=_parse_bool(opt["lr_include_beta0"]),
        bandwidth=int(opt["bandwidth"]),
        sigma_file=opt["sigma_file"],
        out_path=opt["out"],
        threads=int(opt["threads"]),
        beta0=float(opt["beta0"]),
        lc_weight=float(opt["lc_weight"]),
    )


def _dispatch(cfg: RunConfig) -> None:
    if cfg.command == "power":
        if cfg.design is None:
            raise UsageError("power runs need --design")
        rows = simulate_power(cfg)
        write_power_csv(rows, cfg.out_path)
    elif cfg.command == "test":
        reports = run_csv_tests(cfg)
        write_reports_csv(reports, cfg.beta0, cfg.out_path)
    elif cfg.command == "quantile":
        reports = run_csv_tests(cfg, force_simulation=True)
        write_reports_csv(reports, cfg.beta0, cfg.out_path)
    elif cfg.command == "confset":
        name, cs = run_confset(cfg)
        write_confset_csv(name, cs, cfg.out_path)
    elif cfg.command == "diag-opt":
        pct, factor = run_diag_opt(cfg)
        paths = write_diag_csv(pct, factor, cfg.out_path)
        print(f"wrote {paths[0]} and {paths[1]}")
    else:
        raise UsageError("--command is required")


def _join_grid_flag(argv):
    """Let ``--beta-grid -4:4:1`` parse: argparse mistakes the value for a flag."""
    out = []
    it = iter(argv)
    for tok in it:
        if tok == "--beta-grid":
            try:
                value = next(it)
            except StopIteration:
                out.append(tok)
                break
            out.append(f"--beta-grid={value}")
        else:
            out.append(tok)
    return out


def main(argv=None) -> int:
    parser = build_parser()
    if argv is None:
        argv = sys.argv[1:]
    argv = _join_grid_flag(list(argv))
    try:
        args = parser.parse_args(argv)
        cfg = build_run_config(merge_options(args))
        _dispatch(cfg)
        return EXIT_OK
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
