"""Command-line entry point: ``spikelab <command> [flags]``.

Exit status: 0 on success, 2 on usage errors (bad flags or values), 1 on
runtime failures.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bench import (ALGORITHMS, ExperimentConfig, load_matrix_csv, run_phase_curve,
                    split_half_protocol, equivalence_study, theta_nullity_study)
from .model import (CUSTOM, ORTHOGONAL_CENTERS, STRONG, SYMMETRIC_PAIR, WEAK, Prior, load_sample,
                    sample_asymmetric, sample_gmm, sample_symmetric, save_sample)
from .numerics import ContractViolation, RngStream
from . import replica, spectral


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _positive_int(name):
    def conv(text):
        try:
            v = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be an integer, got {text!r}") from None
        if v < 1:
            raise argparse.ArgumentTypeError(f"{name} must be >= 1, got {v}")
        return v
    return conv


def _nonneg_float(name):
    def conv(text):
        try:
            v = float(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be a number, got {text!r}") from None
        if not v >= 0 or math.isinf(v):
            raise argparse.ArgumentTypeError(f"{name} must be a finite number >= 0, got {text}")
        return v
    return conv


def _float_list(name):
    def conv(text):
        try:
            return [float(v) for v in text.split(",") if v.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be comma-separated numbers") from None
    return conv


def _prior(text):
    try:
        return Prior.parse(text)
    except ContractViolation as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _algorithms(text):
    names = [v.strip() for v in text.split(",") if v.strip()]
    bad = [v for v in names if v not in ALGORITHMS]
    if bad or not names:
        raise argparse.ArgumentTypeError(f"--algorithms must be a subset of {','.join(ALGORITHMS)}")
    return names


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master RNG seed (unsigned 64-bit int)")
    common.add_argument("--json", action="store_true", help="print machine-readable JSON")
    common.add_argument("--threads", type=_positive_int("--threads"), default=1,
                        help="worker threads for trial-level parallelism (count)")

    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="spikelab", description=__doc__.splitlines()[0], formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"spikelab {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def add(name, help_text):
        return sub.add_parser(name, parents=[common], help=help_text, description=help_text,
                              formatter_class=fmt)

    p = add("generate", "draw a sample and save it (.npz or .csv)")
    p.add_argument("--model", choices=["asymmetric", "symmetric", "gmm"], default="asymmetric",
                   help="observation model")
    p.add_argument("--n", type=_positive_int("--n"), default=200, help="rows (count)")
    p.add_argument("--d", type=_positive_int("--d"), default=2000, help="columns (count)")
    p.add_argument("--prior-lambda", type=_prior, default=Prior.rademacher(), help="row-factor prior")
    p.add_argument("--prior-theta", type=_prior, default=Prior.gaussian(1.0), help="column-factor prior")
    p.add_argument("--regime", choices=[STRONG, WEAK, CUSTOM], default=WEAK, help="signal scaling")
    p.add_argument("--s-n", type=_nonneg_float("--s-n"), default=None,
                   help="signal scale for the custom regime (dimensionless)")
    p.add_argument("--q-theta", type=_nonneg_float("--q-theta"), default=2.0,
                   help="signal strength q_Theta (symmetric model) or center variance (gmm)")
    p.add_argument("--k", type=int, default=2, help="clusters for the gmm model (count)")
    p.add_argument("--out", required=True, help="output path (.npz or .csv)")

    p = add("estimate", "spectral row-factor estimate for a saved asymmetric sample")
    p.add_argument("--input", required=True, help="sample file written by generate (.npz)")
    p.add_argument("--prior-lambda", type=_prior, default=None, help="row prior used for alignment")
    p.add_argument("--prior-theta", type=_prior, default=None, help="column prior used for denoising")
    p.add_argument("--out", default=None, help="optional CSV for the row-factor estimate")

    p = add("threshold", "information-theoretic clustering threshold q_info(k)")
    p.add_argument("--k", type=int, required=True, help="number of clusters (count, >= 2)")
    p.add_argument("--method", choices=["exact", "bisection"], default="exact",
                   help="deterministic reduction or Monte Carlo bisection")
    p.add_argument("--mc-samples", type=_positive_int("--mc-samples"), default=200_000,
                   help="Monte Carlo draws for the bisection method (count)")
    p.add_argument("--out", default=None, help="optional CSV (k,q_info)")

    p = add("fixed-point", "largest root of s = q^2 E tanh^2(s + sqrt(s) G) and overlap Phi(sqrt(s*))")
    p.add_argument("--q-theta", type=_nonneg_float("--q-theta"), required=True, help="signal strength")
    p.add_argument("--quad-order", type=int, default=121, help="Gauss-Hermite order (2..200)")

    p = add("state-evolution", "AMP state-evolution trace")
    p.add_argument("--q-theta", type=_nonneg_float("--q-theta"), required=True, help="signal strength")
    p.add_argument("--prior", type=_prior, default=Prior.rademacher(), help="scalar row prior")
    p.add_argument("--t-max", type=_positive_int("--t-max"), default=500, help="iteration cap (count)")
    p.add_argument("--tol", type=_nonneg_float("--tol"), default=1e-10, help="stopping tolerance on gamma")
    p.add_argument("--cold-start", action="store_true", help="start from gamma_0 = 1e-6")

    for name, text in (("phase-curve", "overlap versus q_Theta for several clustering algorithms"),
                       ("equivalence", "AMP MSE: Gram-reduced asymmetric model vs symmetric model"),
                       ("nullity", "spectral column-factor correlation in a given regime"),
                       ("split-half", "split-half center-correlation protocol on a CSV matrix")):
        p = add(name, text)
        p.add_argument("--out-dir", default="out", help="output directory")
        p.add_argument("--emit-config", default=None, help="also write the equivalent config file here")
        p.add_argument("--trials", type=_positive_int("--trials"), default=None,
                       help="independent trials / repeats (count; default 20, 10 for equivalence)")
        if name in ("phase-curve", "equivalence", "nullity"):
            p.add_argument("--n", type=_positive_int("--n"), default=None, help="rows (count)")
        if name == "phase-curve":
            p.add_argument("--k", type=int, required=True, help="clusters (count, >= 2)")
            p.add_argument("--d", type=_positive_int("--d"), default=2000, help="columns (count)")
            p.add_argument("--q-grid", type=_float_list("--q-grid"), default=[],
                           help="comma-separated q_Theta values (default 0 to 2k step k/8)")
            p.add_argument("--algorithms", type=_algorithms, default=list(ALGORITHMS),
                           help="comma-separated algorithm names")
            p.add_argument("--variant", choices=["", SYMMETRIC_PAIR, ORTHOGONAL_CENTERS], default="",
                           help="mixture variant (default: symmetric-pair for k=2)")
            p.add_argument("--paper-scale", action="store_true", help="use 100 trials")
        if name in ("equivalence", "nullity"):
            p.add_argument("--q-theta", type=_nonneg_float("--q-theta"), required=True,
                           help="signal strength")
        if name == "equivalence":
            p.add_argument("--prior", type=_prior, default=Prior.rademacher(), help="scalar row prior")
            p.add_argument("--dn-ratios", type=_float_list("--dn-ratios"), default=[20.0, 100.0],
                           help="comma-separated aspect ratios d/n")
        if name == "nullity":
            p.add_argument("--d", type=_positive_int("--d"), default=10_000, help="columns (count)")
            p.add_argument("--regime", choices=[STRONG, WEAK], default=WEAK, help="signal scaling")
        if name == "split-half":
            p.add_argument("--input", required=True, help="numeric CSV, rows = samples")
            p.add_argument("--has-header", action="store_true", help="skip the first CSV row")
            p.add_argument("--labels", default="", help="optional CSV with one group label per row")
            p.add_argument("--subset-size", type=int, default=0, help="rows per half (count; 0 = n/2)")
            p.add_argument("--noise-variance", type=_nonneg_float("--noise-variance"), default=0.0,
                           help="variance of added Gaussian noise")

    p = add("enumerate-oracle", "finite-n free energy by exact enumeration")
    p.add_argument("--n", type=_positive_int("--n"), required=True, help="matrix size (count, small)")
    p.add_argument("--q-theta", type=_nonneg_float("--q-theta"), required=True, help="signal strength")
    p.add_argument("--prior", type=_prior, default=Prior.rademacher(), help="discrete scalar prior")
    p.add_argument("--mc-outer", type=_positive_int("--mc-outer"), default=50_000,
                   help="outer Monte Carlo draws (count)")

    p = add("run-config", "run an experiment from a config file")
    p.add_argument("path", help="config file (key = value with [section] headers)")
    return parser


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------

def _emit(args, payload: dict, text: str) -> None:
    payload = {"seed": args.seed, **payload}
    if args.json:
        print(json.dumps(payload, sort_keys=True, default=_json_default))
    else:
        print(f"seed: {args.seed}")
        print(text)


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(type(obj).__name__)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _cmd_generate(args):
    rng = RngStream(args.seed)
    if args.model == "asymmetric":
        if args.regime == CUSTOM and args.s_n is None:
            raise UsageError("--s-n is required with --regime custom")
        sample = sample_asymmetric(args.prior_lambda, args.prior_theta, args.n, args.d,
                                   args.regime, rng, s_n=args.s_n)
    elif args.model == "symmetric":
        sample = sample_symmetric(args.prior_lambda, args.n, args.q_theta, rng)
    else:
        if args.k < 2:
            raise UsageError("--k must be >= 2")
        if args.k == 2:
            sample = sample_gmm(SYMMETRIC_PAIR, Prior.gaussian(args.q_theta), args.n, args.d, rng)
        else:
            sample = sample_gmm(ORTHOGONAL_CENTERS, Prior.gaussian(args.q_theta, args.k),
                                args.n, args.d, rng)
    path = save_sample(sample, args.out)
    _emit(args, {"path": str(path), **sample.metadata()}, f"wrote {path}")


def _cmd_estimate(args):
    sample = load_sample(args.input)
    if hasattr(sample, "as_spiked"):
        sample = sample.as_spiked()
    if not hasattr(sample, "Theta"):
        raise UsageError("estimate needs an asymmetric sample")
    est = spectral.spectral_lambda(sample)
    out = {"eigenvalues": est.eigenvalues, "sin_theta_loss": spectral.sin_theta_loss(est, sample.Lambda)}
    if args.prior_lambda is not None:
        est = spectral.align_factor(est, args.prior_lambda)
        out["aligned"] = est.aligned
        out["identifiable"] = est.identifiable
        if args.prior_theta is not None:
            th = spectral.denoise_theta(sample, est, args.prior_theta, prior_lambda=args.prior_lambda)
            out["theta_risk"] = th.risk_estimate
    if args.out:
        np.savetxt(args.out, est.Lambda_hat, delimiter=",", fmt="%.17g")
    text = "\n".join(f"{k}: {v}" for k, v in out.items())
    _emit(args, out, text)


def _cmd_threshold(args):
    if args.k < 2:
        raise UsageError(f"--k must be >= 2, got {args.k}")
    config = replica.ReplicaConfig(mc_samples=args.mc_samples, seed=args.seed)
    t = replica.cluster_threshold(args.k, config, method=args.method)
    if args.out:
        replica.write_threshold_table(args.out, [t])
    _emit(args, t.to_dict(), f"{t.q_info:.2f} +/- {t.half_width:.2g}")


def _cmd_fixed_point(args):
    if not 2 <= args.quad_order <= 200:
        raise UsageError("--quad-order must be in [2, 200]")
    s_star, ov = replica.tanh_fixed_point(args.q_theta, args.quad_order)
    _emit(args, {"q_theta": args.q_theta, "s_star": s_star, "overlap": ov},
          f"s*={s_star:.10g}\noverlap={ov:.10g}")


def _cmd_state_evolution(args):
    tr = replica.state_evolution(args.q_theta, args.prior, args.t_max, args.tol,
                                 cold_start=args.cold_start)
    _emit(args, tr.to_dict(),
          f"fixed_point={tr.fixed_point:.10g}\nconverged={tr.converged}\niterations={len(tr.gammas) - 1}")


def _cmd_enumerate(args):
    psi, info, se = replica.enumeration_free_energy(args.n, args.q_theta, args.prior,
                                                    args.mc_outer, RngStream(args.seed))
    _emit(args, {"n": args.n, "q_theta": args.q_theta, "psi_n": psi, "info_n": info, "std_err": se},
          f"psi_n={psi:.6f}\ninfo_n={info:.6f}\nstd_err={se:.2g}")


def config_from_args(args) -> ExperimentConfig:
    kind = args.command
    default_trials = 10 if kind == "equivalence" else 20
    trials = args.trials or default_trials
    kw = {"kind": kind, "seed": args.seed, "threads": args.threads, "output_dir": args.out_dir,
          "trials": trials}
    if kind == "phase-curve":
        kw.update(k=args.k, n=args.n or 100, d=args.d, q_grid=args.q_grid,
                  algorithms=args.algorithms, variant=args.variant,
                  trials=100 if args.paper_scale else trials)
    elif kind == "equivalence":
        kw.update(q_theta=args.q_theta, n=args.n or 500, prior_lambda=str(args.prior),
                  dn_ratios=args.dn_ratios)
    elif kind == "nullity":
        kw.update(q_theta=args.q_theta, n=args.n or 100, d=args.d, regime=args.regime)
    elif kind == "split-half":
        kw.update(input_path=args.input, has_header=args.has_header, labels_path=args.labels,
                  subset_size=args.subset_size, noise_variance=args.noise_variance, repeats=trials)
    return ExperimentConfig(**kw)


def run_experiment(config: ExperimentConfig) -> dict:
    """Execute ``config`` and write its outputs under ``config.output_dir``."""
    out = Path(config.output_dir)
    if config.kind == "phase-curve":
        curve = run_phase_curve(config)
        return {"output_dir": str(out), "rows": curve.rows, "annotations": curve.annotations,
                "failures": len(curve.failures)}
    rng = RngStream(config.seed)
    if config.kind == "equivalence":
        result = {"table": equivalence_study(config.q_theta, Prior.parse(config.prior_lambda),
                                             config.n, config.dn_ratios, config.trials, rng,
                                             threads=config.threads)}
    elif config.kind == "nullity":
        result = theta_nullity_study(config.q_theta, config.n, config.d, config.trials, rng,
                                     regime=config.regime)
    else:
        data, meta = load_matrix_csv(config.input_path, config.has_header)
        labels = None
        if config.labels_path:
            with open(config.labels_path) as fh:
                labels = np.array([line.strip() for line in fh if line.strip()])
            if labels.size != data.shape[0]:
                raise ContractViolation(f"{config.labels_path}: {labels.size} labels for {data.shape[0]} rows")
        result = split_half_protocol(data, labels, config.subset_size or None, config.repeats,
                                     config.noise_variance, rng)
        result["input"] = meta
    out.mkdir(parents=True, exist_ok=True)
    report = {"config": config.to_dict(), "config_text": config.dumps(), "version": __version__,
              "result": result}
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True,
                                                default=_json_default) + "\n")
    return {"output_dir": str(out), **result}


def _summarise(result: dict) -> str:
    if "rows" in result:
        lines = [f"{r['algorithm']:>14s} q={r['q_theta']:<8.4g} mean={r['mean']:.4f} "
                 f"std={r['std']:.4f} n={r['n_trials']}" for r in result["rows"]]
        a = result["annotations"]
        lines.append(f"q_info={a['q_info']:.4f} q_algo={a['q_algo']:g} "
                     f"2sqrt(klogk)={a['approx_2sqrt_klogk']:.4f}")
        return "\n".join(lines)
    if "table" in result:
        return "\n".join(f"d/n={r['d_over_n']:g} asym={r['asym_mse']:.4f} symm={r['symm_mse']:.4f} "
                         f"gap={r['gap']:.4f} rs={r['rs_mmse']:.4f}" for r in result["table"])
    if "max_correlation" in result:
        return (f"max_correlation={result['max_correlation']:.4f}\n"
                f"median_correlation={result['median_correlation']:.4f}")
    q = result.get("center_correlation_quantiles", {})
    return "center_correlation quantiles: " + " ".join(f"{k}:{v:.4f}" for k, v in q.items())


def _cmd_experiment(args):
    config = config_from_args(args)
    if args.emit_config:
        Path(args.emit_config).write_text(config.dumps())
    result = run_experiment(config)
    _emit(args, result, _summarise(result))


def _cmd_run_config(args):
    try:
        config = ExperimentConfig.load(args.path)
    except OSError as exc:
        raise UsageError(f"cannot read {args.path}: {exc}") from None
    args.seed = config.seed
    result = run_experiment(config)
    _emit(args, result, _summarise(result))


COMMANDS = {
    "generate": _cmd_generate, "estimate": _cmd_estimate, "threshold": _cmd_threshold,
    "fixed-point": _cmd_fixed_point, "state-evolution": _cmd_state_evolution,
    "phase-curve": _cmd_experiment, "equivalence": _cmd_experiment, "nullity": _cmd_experiment,
    "split-half": _cmd_experiment, "enumerate-oracle": _cmd_enumerate, "run-config": _cmd_run_config,
}


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not 0 <= args.seed < 2 ** 64:
            raise UsageError("--seed must be an unsigned 64-bit integer")
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ContractViolation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(dispatch())
