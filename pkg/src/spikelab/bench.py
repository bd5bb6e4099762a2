"""Experiment orchestration: phase curves, threshold tables, regime studies,
the split-half protocol and CSV ingestion."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .amp import amp_cluster, bayes_amp_symmetric
from .cluster import agglomerative, em_spherical, kmeans, null_labels, overlap, spectral_cluster
from .model import (ORTHOGONAL_CENTERS, STRONG, SYMMETRIC_PAIR, WEAK, Prior, gram_reduce,
                    sample_asymmetric, sample_gmm, sample_symmetric)
from .numerics import ContractViolation, RngStream, as_stream
from .replica import Threshold, cluster_threshold, maximize_free_energy

ALGORITHMS = ("kmeans", "em", "agglomerative", "spectral", "amp", "null")
EXPERIMENTS = ("phase-curve", "equivalence", "nullity", "split-half")


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, (list, tuple)):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class ExperimentConfig:
    """Everything needed to rerun an experiment.

    Serialised as flat ``key = value`` lines under ``[section]`` headers.
    ``q_grid`` empty means the default ``0, k/8, ..., 2k``.
    """

    kind: str = "phase-curve"
    n: int = 100
    d: int = 2000
    k: int = 0
    variant: str = ""
    prior_lambda: str = "rademacher"
    prior_theta: str = "gaussian:1.0"
    q_theta: float = 2.0
    q_grid: list = field(default_factory=list)
    dn_ratios: list = field(default_factory=lambda: [20, 100])
    regime: str = WEAK
    trials: int = 20
    seed: int = 0
    algorithms: list = field(default_factory=lambda: list(ALGORITHMS))
    output_dir: str = "out"
    input_path: str = ""
    has_header: bool = False
    labels_path: str = ""
    subset_size: int = 0
    repeats: int = 20
    noise_variance: float = 0.0
    threads: int = 1

    SECTIONS = {
        "experiment": ("kind", "seed", "trials", "threads", "output_dir"),
        "data": ("n", "d", "k", "variant", "prior_lambda", "prior_theta", "regime",
                 "input_path", "has_header", "labels_path"),
        "sweep": ("q_theta", "q_grid", "dn_ratios", "algorithms", "subset_size", "repeats",
                  "noise_variance"),
    }
    REQUIRED = {"phase-curve": ("k",), "equivalence": ("q_theta",), "nullity": ("q_theta",),
                "split-half": ("input_path",)}

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.kind not in EXPERIMENTS:
            raise ContractViolation(f"kind must be one of {EXPERIMENTS}, got {self.kind!r}")
        if self.trials < 1:
            raise ContractViolation("trials must be >= 1")
        if self.threads < 1:
            raise ContractViolation("threads must be >= 1")
        if self.kind == "phase-curve":
            if self.k < 2:
                raise ContractViolation(f"k must be >= 2, got {self.k}")
            unknown = set(self.algorithms) - set(ALGORITHMS)
            if unknown or not self.algorithms:
                raise ContractViolation(f"algorithms must be a nonempty subset of {ALGORITHMS}")
            if any(q < 0 for q in self.q_grid):
                raise ContractViolation("q_grid values must be nonnegative")
        if self.kind == "equivalence" and not self.dn_ratios:
            raise ContractViolation("dn_ratios must be nonempty")
        if self.kind != "split-half" and (self.n < 2 or self.d < 2):
            raise ContractViolation("n and d must be >= 2")

    @property
    def grid(self) -> list:
        if self.q_grid:
            return [float(q) for q in self.q_grid]
        step = self.k / 8.0
        return [i * step for i in range(17)]

    @property
    def mixture_variant(self) -> str:
        if self.variant:
            return self.variant
        return SYMMETRIC_PAIR if self.k == 2 else ORTHOGONAL_CENTERS

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def dumps(self) -> str:
        lines = []
        for section, keys in self.SECTIONS.items():
            lines.append(f"[{section}]")
            lines += [f"{key} = {_fmt(getattr(self, key))}" for key in keys]
            lines.append("")
        return "\n".join(lines)

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()[:16]

    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        types = {f.name: f.type for f in fields(cls)}
        known = {key: sec for sec, keys in cls.SECTIONS.items() for key in keys}
        values = {}
        section = None
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1].strip()
                if section not in cls.SECTIONS:
                    raise ContractViolation(f"line {lineno}: unknown section [{section}]")
                continue
            key, sep, value = (s.strip() for s in line.partition("="))
            if not sep:
                raise ContractViolation(f"line {lineno}: expected key = value")
            if key not in known:
                raise ContractViolation(f"line {lineno}: unknown key {key!r}")
            if section is not None and known[key] != section:
                raise ContractViolation(f"line {lineno}: key {key!r} belongs in [{known[key]}]")
            try:
                values[key] = _parse_value(types[key], value)
            except ValueError as exc:
                raise ContractViolation(f"line {lineno}: bad value for {key!r}: {exc}") from None
        kind = values.get("kind", cls.kind)
        for key in cls.REQUIRED.get(kind, ()):
            if key not in values:
                raise ContractViolation(f"missing required key {key!r}")
        return cls(**values)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.loads(Path(path).read_text())


def _parse_value(type_name: str, value: str):
    if type_name == "int":
        return int(value)
    if type_name == "float":
        return float(value)
    if type_name == "bool":
        if value.lower() not in ("true", "false"):
            raise ValueError("expected true or false")
        return value.lower() == "true"
    if type_name == "list":
        items = [v.strip() for v in value.split(",") if v.strip()]
        out = []
        for v in items:
            try:
                out.append(float(v) if any(c in v for c in ".eE") else int(v))
            except ValueError:
                out.append(v)
        return out
    return value


# ---------------------------------------------------------------------------
# Threshold cache
# ---------------------------------------------------------------------------

def cached_threshold(k: int, method: str = "exact") -> Threshold:
    """``cluster_threshold`` memoised on disk under ``$SPIKELAB_CACHE_DIR`` (advisory)."""
    cache_dir = os.environ.get("SPIKELAB_CACHE_DIR")
    key = f"threshold-k{k}-{method}-v{__version__}.json"
    if cache_dir:
        path = Path(cache_dir) / key
        try:
            data = json.loads(path.read_text())
            return Threshold(**data)
        except (OSError, ValueError, TypeError):
            pass
    result = cluster_threshold(k, method=method)
    if cache_dir:
        try:
            Path(cache_dir).mkdir(parents=True, exist_ok=True)
            (Path(cache_dir) / key).write_text(json.dumps(result.to_dict(), sort_keys=True))
        except OSError:
            pass
    return result


def threshold_annotations(k: int) -> dict:
    t = cached_threshold(k)
    return {"k": k, "q_info": t.q_info, "q_info_half_width": t.half_width, "q_algo": float(k),
            "approx_2sqrt_klogk": 2.0 * math.sqrt(k * math.log(k))}


# ---------------------------------------------------------------------------
# Phase curve
# ---------------------------------------------------------------------------

@dataclass
class PhaseCurve:
    rows: list
    annotations: dict
    config: ExperimentConfig
    failures: list = field(default_factory=list)

    def row(self, algorithm: str, q: float) -> dict:
        for r in self.rows:
            if r["algorithm"] == algorithm and r["q_theta"] == q:
                return r
        raise KeyError((algorithm, q))


def _run_algorithm(name: str, sample, k: int, stream: RngStream) -> np.ndarray:
    X = sample.A
    if name == "kmeans":
        return kmeans(X, k, rng=stream).labels
    if name == "em":
        return em_spherical(X, k, rng=stream).labels
    if name == "agglomerative":
        return agglomerative(X, k)
    if name == "spectral":
        return spectral_cluster(X, k, rng=stream)
    if name == "amp":
        return amp_cluster(sample, rng=stream)[0]
    if name == "null":
        return null_labels(X.shape[0], k, rng=stream)
    raise ContractViolation(f"unknown algorithm {name!r}")


def _center_prior(config: ExperimentConfig, q: float) -> Prior:
    if config.mixture_variant == SYMMETRIC_PAIR:
        return Prior.gaussian(q)
    return Prior.gaussian(q, config.k)


def _phase_trial(config: ExperimentConfig, qi: int, q: float, trial: int):
    stream = RngStream(config.seed, qi * config.trials + trial)
    sample = sample_gmm(config.mixture_variant, _center_prior(config, q), config.n, config.d, stream)
    truth = sample.class_labels()
    out = {}
    for name in config.algorithms:
        try:
            labels = _run_algorithm(name, sample, config.k, stream.child(ALGORITHMS.index(name)))
            out[name] = overlap(labels, truth, config.k).overlap
        except Exception as exc:  # recorded, trial dropped for this algorithm only
            out[name] = f"{type(exc).__name__}: {exc}"
    return out


def _summary(values: list) -> tuple[float, float]:
    mean = math.fsum(values) / len(values)
    var = math.fsum((v - mean) ** 2 for v in values) / (len(values) - 1) if len(values) > 1 else 0.0
    return mean, math.sqrt(var)


def _map_trials(fn, jobs, threads: int):
    if threads <= 1:
        return [fn(*job) for job in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda job: fn(*job), jobs))


def run_phase_curve(config: ExperimentConfig, write: bool = True) -> PhaseCurve:
    """Average overlap per (algorithm, q_theta) over independent mixture draws.

    Trial ``t`` at grid index ``i`` uses stream id ``i * trials + t``; each
    algorithm gets its own child stream, so results do not depend on thread
    count or algorithm order.
    """
    grid = config.grid
    jobs = [(config, qi, q, t) for qi, q in enumerate(grid) for t in range(config.trials)]
    results = _map_trials(_phase_trial, jobs, config.threads)
    rows, failures = [], []
    for name in config.algorithms:
        for qi, q in enumerate(grid):
            vals = []
            for t in range(config.trials):
                val = results[qi * config.trials + t][name]
                if isinstance(val, str):
                    failures.append({"algorithm": name, "q_theta": q, "trial": t, "error": val})
                else:
                    vals.append(val)
            mean, std = _summary(vals) if vals else (float("nan"), float("nan"))
            rows.append({"algorithm": name, "q_theta": q, "mean": mean, "std": std,
                         "n_trials": len(vals)})
    curve = PhaseCurve(rows, threshold_annotations(config.k), config, failures)
    if write:
        write_phase_curve(curve, config.output_dir)
    return curve


SCHEMA = {
    "curve.csv": {
        "algorithm": "clustering algorithm name",
        "q_theta": "center variance q_Theta (dimensionless)",
        "mean": "mean best-permutation overlap over successful trials, in [0, 1]",
        "std": "sample standard deviation of the overlap across trials",
        "n_trials": "number of successful trials",
    },
    "thresholds.csv": {
        "k": "number of clusters",
        "q_info": "information-theoretic threshold computed by the replica module",
        "q_algo": "algorithmic threshold q = k",
        "approx_2sqrt_klogk": "large-k approximation 2 sqrt(k log k)",
    },
    "report.json": {
        "config": "full experiment configuration",
        "version": "package version string",
        "annotations": "threshold annotations",
        "failures": "per-trial algorithm failures",
        "q_grid": "grid actually used",
    },
}


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    out = csv.writer(buf, lineterminator="\n")
    out.writerow(header)
    out.writerows(rows)
    return buf.getvalue()


def _num(x) -> str:
    return repr(float(x))


def write_phase_curve(curve: PhaseCurve, output_dir) -> Path:
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "curve.csv").write_text(_csv_text(
        ["algorithm", "q_theta", "mean", "std", "n_trials"],
        [[r["algorithm"], _num(r["q_theta"]), _num(r["mean"]), _num(r["std"]), r["n_trials"]]
         for r in curve.rows]))
    a = curve.annotations
    (out / "thresholds.csv").write_text(_csv_text(
        ["k", "q_info", "q_algo", "approx_2sqrt_klogk"],
        [[a["k"], _num(a["q_info"]), _num(a["q_algo"]), _num(a["approx_2sqrt_klogk"])]]))
    report = {"config": curve.config.to_dict(), "config_text": curve.config.dumps(),
              "version": __version__, "annotations": a, "failures": curve.failures,
              "q_grid": curve.config.grid}
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    (out / "schema.json").write_text(json.dumps(SCHEMA, indent=2, sort_keys=True) + "\n")
    return out


# ---------------------------------------------------------------------------
# Symmetric / asymmetric equivalence
# ---------------------------------------------------------------------------

def equivalence_study(q_theta: float, prior_lambda: Prior, n: int, dn_ratios, trials: int = 10,
                      rng=None, threads: int = 1, t_max: int = 30) -> list[dict]:
    """AMP matrix MSE on the Gram-reduced asymmetric model vs the symmetric model.

    Both models share the row factor within a trial (sub-stream 0 of the
    trial stream). The column factor is Gaussian with variance ``q_theta``.
    One row per aspect ratio with means, standard errors, the gap between
    the two means and the replica-symmetric MMSE.
    """
    if prior_lambda.dim != 1:
        raise ContractViolation("equivalence_study needs a scalar prior")
    base = as_stream(rng)
    limit = maximize_free_energy(q_theta ** 2, prior_lambda).mmse_limit

    def symm(t):
        s = sample_symmetric(prior_lambda, n, q_theta, RngStream(base.seed, base.child(t).stream_id))
        return bayes_amp_symmetric(s.Y, q_theta, prior_lambda, t_max=t_max).matrix_mse(s.Lambda)

    def asym(ratio, t):
        stream = RngStream(base.seed, base.child(t).stream_id)
        s = sample_asymmetric(prior_lambda, Prior.gaussian(q_theta), n, int(round(ratio * n)),
                              WEAK, stream)
        run = bayes_amp_symmetric(gram_reduce(s), q_theta, prior_lambda, t_max=t_max)
        return run.matrix_mse(s.Lambda)

    symm_vals = _map_trials(symm, [(t,) for t in range(trials)], threads)
    sm, ss = _summary(symm_vals)
    table = []
    for ratio in dn_ratios:
        vals = _map_trials(asym, [(ratio, t) for t in range(trials)], threads)
        am, asd = _summary(vals)
        table.append({
            "d_over_n": ratio, "asym_mse": am, "asym_se": asd / math.sqrt(trials),
            "symm_mse": sm, "symm_se": ss / math.sqrt(trials), "gap": abs(am - sm),
            "asym_median": float(np.median(vals)), "symm_median": float(np.median(symm_vals)),
            "rs_mmse": limit,
        })
    return table


# ---------------------------------------------------------------------------
# Column-factor nullity
# ---------------------------------------------------------------------------

def spectral_theta(A: np.ndarray) -> np.ndarray:
    """Top right singular vector of ``A`` (the spectral column-factor estimate)."""
    _, _, Vt = np.linalg.svd(A, full_matrices=False)
    return Vt[0]


def theta_nullity_study(q_theta: float, n: int, d: int, trials: int = 20, rng=None,
                        regime: str = WEAK, prior_lambda: Prior | None = None) -> dict:
    """Normalised correlation between the spectral column estimate and ``Theta``."""
    prior_lambda = prior_lambda or Prior.rademacher()
    base = as_stream(rng)
    corr = []
    for t in range(trials):
        s = sample_asymmetric(prior_lambda, Prior.gaussian(q_theta), n, d, regime,
                              RngStream(base.seed, base.child(t).stream_id))
        th = spectral_theta(s.A)
        truth = s.Theta[:, 0]
        corr.append(float(abs(th @ truth) / (np.linalg.norm(th) * np.linalg.norm(truth))))
    return {"q_theta": q_theta, "n": n, "d": d, "regime": regime, "trials": trials,
            "correlations": corr, "max_correlation": max(corr),
            "median_correlation": float(np.median(corr))}


# ---------------------------------------------------------------------------
# Split-half protocol and CSV ingestion
# ---------------------------------------------------------------------------

def _standardise(X: np.ndarray) -> np.ndarray:
    X = X - X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd == 0] = 1.0
    return X / sd


def _max_center_correlation(C1: np.ndarray, C2: np.ndarray) -> float:
    C1 = C1 - C1.mean(axis=0)
    C2 = C2 - C2.mean(axis=0)
    n1 = np.linalg.norm(C1, axis=1)
    n2 = np.linalg.norm(C2, axis=1)
    n1[n1 == 0] = 1.0
    n2[n2 == 0] = 1.0
    return float(np.max(np.abs((C1 / n1[:, None]) @ (C2 / n2[:, None]).T)))


QUANTILES = (0.0, 0.25, 0.5, 0.75, 1.0)


def split_half_protocol(data, group_labels=None, subset_size: int | None = None, repeats: int = 20,
                        noise_variance: float = 0.0, rng=None, canonical_order: bool = True) -> dict:
    """Agreement of 2-means centers fitted on disjoint halves of the rows.

    Per repeat: standardise columns, optionally add ``N(0, noise_variance)``
    noise, draw two disjoint row subsets, run 2-means on each and record the
    largest absolute cosine between centers (each centred on the pair mean)
    and, with labels, each half's overlap. Rows are first put in canonical
    (lexicographic) order, so the result does not depend on input row order.
    """
    X = np.asarray(data, dtype=float)
    n = X.shape[0]
    subset_size = subset_size or n // 2
    if n < 2 * subset_size or subset_size < 2:
        raise ContractViolation(f"need n >= 2 * subset_size with subset_size >= 2 (n={n}, subset_size={subset_size})")
    labels = None if group_labels is None else np.asarray(group_labels)
    if canonical_order:
        keys = [X[:, j] for j in range(X.shape[1] - 1, -1, -1)]
        if labels is not None:
            keys = [labels] + keys
        order = np.lexsort(keys)
        X = X[order]
        labels = None if labels is None else labels[order]
    base = as_stream(rng)
    corr, ov1, ov2 = [], [], []
    for rep in range(repeats):
        stream = RngStream(base.seed, base.child(rep).stream_id)
        Xr = _standardise(X)
        if noise_variance > 0:
            Xr = Xr + math.sqrt(noise_variance) * stream.generator(0).standard_normal(Xr.shape)
        perm = stream.generator(1).permutation(n)
        halves = (perm[:subset_size], perm[subset_size:2 * subset_size])
        fits = [kmeans(Xr[h], 2, rng=stream.child(i)) for i, h in enumerate(halves)]
        corr.append(_max_center_correlation(fits[0].centers, fits[1].centers))
        if labels is not None:
            ov1.append(overlap(fits[0].labels, labels[halves[0]]).overlap)
            ov2.append(overlap(fits[1].labels, labels[halves[1]]).overlap)

    def quant(v):
        return dict(zip(map(str, QUANTILES), np.quantile(v, QUANTILES).tolist())) if v else {}

    return {"repeats": repeats, "subset_size": subset_size, "noise_variance": noise_variance,
            "center_correlation": corr, "overlap_half1": ov1, "overlap_half2": ov2,
            "center_correlation_quantiles": quant(corr),
            "overlap_quantiles": quant(ov1 + ov2)}


def load_matrix_csv(path, has_header: bool = False, center: bool = False,
                    rescale: bool = False) -> tuple[np.ndarray, dict]:
    """Read a rectangular numeric CSV; optionally centre columns and scale them to unit norm."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    header = None
    if has_header and rows:
        header, rows = [c.strip() for c in rows[0]], rows[1:]
    if not rows:
        raise ContractViolation(f"{path}: no data rows")
    width = len(rows[0])
    data = np.empty((len(rows), width))
    for i, row in enumerate(rows):
        if len(row) != width:
            raise ContractViolation(f"{path}: row {i + 1} has {len(row)} cells, expected {width}")
        for j, cell in enumerate(row):
            try:
                v = float(cell)
            except ValueError:
                raise ContractViolation(f"{path}: non-numeric cell {cell!r} at row {i + 1}, column {j + 1}") from None
            if math.isnan(v):
                raise ContractViolation(f"{path}: NaN at row {i + 1}, column {j + 1}")
            data[i, j] = v
    if center:
        data -= data.mean(axis=0)
    if rescale:
        norms = np.linalg.norm(data, axis=0)
        zero = np.nonzero(norms == 0)[0]
        if zero.size:
            j = int(zero[0])
            name = header[j] if header else f"column {j + 1}"
            raise ContractViolation(f"{path}: {name} has zero norm and cannot be rescaled")
        data /= norms
    meta = {"path": str(path), "n": data.shape[0], "d": data.shape[1], "header": header,
            "centered": center, "rescaled": rescale}
    return data, meta
