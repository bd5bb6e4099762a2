"""Priors on factor rows and samplers for the observation models.

Stream layout for every sampler: sub-stream 0 draws the row factor
(``Lambda`` / labels), sub-stream 1 the column factor (``Theta`` / centers),
sub-stream 2 the noise. Draws are row-major. This makes the symmetric-pair
mixture and the generic asymmetric sampler bit-identical under matched seeds.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import ContractViolation, RngStream, as_stream

STRONG, WEAK, CUSTOM = "strong", "weak", "custom"
SYMMETRIC_PAIR, ORTHOGONAL_CENTERS = "symmetric-pair", "orthogonal-centers"


# ---------------------------------------------------------------------------
# Priors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Prior:
    """Law of a single factor row in R^r.

    Build with the class-method constructors rather than directly. Discrete
    kinds expose their atoms through :meth:`atoms`; ``gaussian`` is the only
    continuous kind.
    """

    kind: str
    dim: int = 1
    points: tuple = ()
    weights: tuple = ()
    variance: float = 0.0
    p: float = 0.5
    k: int = 0

    # constructors -------------------------------------------------------
    @classmethod
    def rademacher(cls) -> "Prior":
        return cls("rademacher", 1)

    @classmethod
    def two_point(cls, p: float) -> "Prior":
        if not 0.0 < p < 1.0:
            raise ContractViolation(f"two-point probability must be in (0, 1), got {p}")
        return cls("two-point", 1, p=float(p))

    @classmethod
    def gaussian(cls, variance: float, dim: int = 1) -> "Prior":
        if variance < 0 or dim < 1:
            raise ContractViolation("gaussian prior needs variance >= 0 and dim >= 1")
        return cls("gaussian", int(dim), variance=float(variance))

    @classmethod
    def simplex(cls, k: int) -> "Prior":
        if k < 1:
            raise ContractViolation(f"simplex prior needs k >= 1, got {k}")
        return cls("simplex", int(k), k=int(k))

    @classmethod
    def discrete(cls, points, weights) -> "Prior":
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if pts.shape[0] == 1 and np.ndim(points) == 1:
            pts = pts.T
        w = np.asarray(weights, dtype=float)
        if w.ndim != 1 or w.size != pts.shape[0]:
            raise ContractViolation("need one weight per atom")
        if (w < 0).any() or abs(w.sum() - 1.0) > 1e-12:
            raise ContractViolation("atom weights must be nonnegative and sum to 1")
        return cls("atoms", pts.shape[1],
                   points=tuple(map(tuple, pts.tolist())), weights=tuple(w.tolist()))

    @classmethod
    def parse(cls, text: str) -> "Prior":
        """Parse ``rademacher``, ``two-point:P``, ``gaussian:Q[:DIM]``, ``simplex:K``
        or ``atoms:x1,x2,...@w1,w2,...`` (scalar atoms)."""
        name, _, rest = text.strip().partition(":")
        name = name.lower()
        try:
            if name == "rademacher":
                return cls.rademacher()
            if name == "two-point":
                return cls.two_point(float(rest))
            if name == "gaussian":
                parts = rest.split(":")
                return cls.gaussian(float(parts[0]), int(parts[1]) if len(parts) > 1 else 1)
            if name == "simplex":
                return cls.simplex(int(rest))
            if name == "atoms":
                xs, _, ws = rest.partition("@")
                return cls.discrete([float(x) for x in xs.split(",")],
                                    [float(w) for w in ws.split(",")])
        except (ValueError, IndexError) as exc:
            raise ContractViolation(f"cannot parse prior {text!r}: {exc}") from None
        raise ContractViolation(f"unknown prior kind {name!r}")

    def __str__(self) -> str:
        if self.kind == "rademacher":
            return "rademacher"
        if self.kind == "two-point":
            return f"two-point:{self.p!r}"
        if self.kind == "gaussian":
            return f"gaussian:{self.variance!r}" + (f":{self.dim}" if self.dim > 1 else "")
        if self.kind == "simplex":
            return f"simplex:{self.k}"
        if self.dim == 1:
            xs = ",".join(repr(p[0]) for p in self.points)
            return f"atoms:{xs}@" + ",".join(repr(w) for w in self.weights)
        return f"atoms[r={self.dim}, m={len(self.weights)}]"

    # structure ----------------------------------------------------------
    @property
    def is_discrete(self) -> bool:
        return self.kind != "gaussian"

    def atoms(self) -> tuple[np.ndarray, np.ndarray]:
        """``(points m x r, weights m)`` for discrete kinds."""
        if self.kind == "rademacher":
            return np.array([[1.0], [-1.0]]), np.array([0.5, 0.5])
        if self.kind == "two-point":
            return np.array([[1.0 - self.p], [-self.p]]), np.array([self.p, 1.0 - self.p])
        if self.kind == "simplex":
            return np.eye(self.k), np.full(self.k, 1.0 / self.k)
        if self.kind == "atoms":
            return np.array(self.points, dtype=float), np.array(self.weights, dtype=float)
        raise ContractViolation("gaussian prior has no atoms")

    def mean(self) -> np.ndarray:
        if self.kind == "gaussian":
            return np.zeros(self.dim)
        pts, w = self.atoms()
        return w @ pts

    def second_moment(self) -> np.ndarray:
        """Exact ``E[X X^T]`` as an r x r array."""
        if self.kind == "gaussian":
            return self.variance * np.eye(self.dim)
        if self.kind == "rademacher":
            return np.ones((1, 1))
        if self.kind == "two-point":
            return np.array([[self.p * (1.0 - self.p)]])
        if self.kind == "simplex":
            return np.eye(self.k) / self.k
        pts, w = self.atoms()
        return (pts * w[:, None]).T @ pts

    def third_moment(self) -> np.ndarray:
        """``E[X (x) X (x) X]`` as an r x r x r array."""
        if self.kind == "gaussian":
            return np.zeros((self.dim,) * 3)
        pts, w = self.atoms()
        return np.einsum("m,mi,mj,mk->ijk", w, pts, pts, pts)

    def moment_flags(self, tol: float = 1e-12) -> dict:
        """Which of the centring conditions needed in the weak regime hold."""
        return {
            "mean_zero": bool(np.abs(self.mean()).max() <= tol),
            "third_moment_zero": bool(np.abs(self.third_moment()).max() <= tol),
            "degenerate": self.is_degenerate(),
        }

    def is_degenerate(self) -> bool:
        """Single atom or zero variance: estimation is trivial."""
        if self.kind == "gaussian":
            return self.variance == 0.0
        pts, w = self.atoms()
        support = pts[w > 0]
        return bool(np.all(np.abs(support - support[0]) == 0.0))

    def scalar_variance(self) -> float:
        """``q`` when the second moment equals ``q * I``; raises otherwise."""
        Q = self.second_moment()
        q = float(Q[0, 0])
        if not np.allclose(Q, q * np.eye(Q.shape[0]), atol=1e-12):
            raise ContractViolation(f"second moment of {self} is not a multiple of the identity")
        return q

    # sampling -----------------------------------------------------------
    def sample(self, gen: np.random.Generator, size: int) -> np.ndarray:
        """``size`` i.i.d. rows, shape ``(size, dim)``."""
        if self.kind == "gaussian":
            return math.sqrt(self.variance) * gen.standard_normal((size, self.dim))
        if self.kind == "rademacher":
            return (2.0 * gen.integers(0, 2, size=size) - 1.0)[:, None]
        if self.kind == "simplex":
            return np.eye(self.k)[gen.integers(0, self.k, size=size)]
        pts, w = self.atoms()
        return pts[gen.choice(len(w), size=size, p=w)]


def second_moment(prior: Prior) -> np.ndarray:
    return prior.second_moment()


# ---------------------------------------------------------------------------
# Samples
# ---------------------------------------------------------------------------

def signal_scale(regime: str, n: int, d: int, s_n: float | None = None) -> float:
    if regime == STRONG:
        return 1.0 / math.sqrt(n)
    if regime == WEAK:
        return (n * d) ** -0.25
    if regime == CUSTOM:
        if s_n is None or s_n <= 0:
            raise ContractViolation("custom regime needs s_n > 0")
        return float(s_n)
    raise ContractViolation(f"unknown regime {regime!r}")


@dataclass
class SpikedSample:
    A: np.ndarray
    Lambda: np.ndarray
    Theta: np.ndarray
    s_n: float
    regime: str
    seed: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def d(self) -> int:
        return self.A.shape[1]

    @property
    def r(self) -> int:
        return self.Lambda.shape[1]

    def metadata(self) -> dict:
        return {"kind": "spiked", "n": self.n, "d": self.d, "r": self.r,
                "s_n": self.s_n, "regime": self.regime, **self.seed}


@dataclass
class SymmetricSample:
    Y: np.ndarray
    Lambda: np.ndarray
    q_theta: float
    seed: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.Y.shape[0]

    def metadata(self) -> dict:
        return {"kind": "symmetric", "n": self.n, "r": self.Lambda.shape[1],
                "q_theta": self.q_theta, **self.seed}


@dataclass
class GmmSample:
    """Mixture sample. ``labels`` are +-1 for the symmetric pair and 0..k-1 otherwise."""

    A: np.ndarray
    labels: np.ndarray
    centers: np.ndarray
    variant: str
    q_theta: float
    s_n: float
    seed: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def d(self) -> int:
        return self.A.shape[1]

    @property
    def k(self) -> int:
        return 2 if self.variant == SYMMETRIC_PAIR else self.centers.shape[1]

    @property
    def Lambda(self) -> np.ndarray:
        if self.variant == SYMMETRIC_PAIR:
            return self.labels[:, None].astype(float)
        return np.eye(self.k)[self.labels]

    def class_labels(self) -> np.ndarray:
        """Labels in ``0..k-1`` for both variants."""
        if self.variant == SYMMETRIC_PAIR:
            return (self.labels < 0).astype(np.intp)
        return self.labels.astype(np.intp)

    def as_spiked(self) -> SpikedSample:
        return SpikedSample(self.A, self.Lambda, self.centers, self.s_n, WEAK, dict(self.seed))

    def metadata(self) -> dict:
        return {"kind": "gmm", "n": self.n, "d": self.d, "r": self.centers.shape[1],
                "k": self.k, "variant": self.variant, "q_theta": self.q_theta,
                "s_n": self.s_n, **self.seed}


def _planted(Lambda: np.ndarray, Theta: np.ndarray, s_n: float, noise: np.ndarray) -> np.ndarray:
    return s_n * (Lambda @ Theta.T) + noise


def sample_asymmetric(prior_lambda: Prior, prior_theta: Prior, n: int, d: int,
                      regime: str = WEAK, rng=None, s_n: float | None = None) -> SpikedSample:
    """Draw ``A = s_n Lambda Theta^T + Z``."""
    if n < 2 or d < 2:
        raise ContractViolation("need n, d >= 2")
    if prior_lambda.dim != prior_theta.dim:
        raise ContractViolation(
            f"prior dimensions differ: lambda r={prior_lambda.dim}, theta r={prior_theta.dim}")
    rng = as_stream(rng)
    scale = signal_scale(regime, n, d, s_n)
    Lambda = prior_lambda.sample(rng.generator(0), n)
    Theta = prior_theta.sample(rng.generator(1), d)
    Z = rng.generator(2).standard_normal((n, d))
    return SpikedSample(_planted(Lambda, Theta, scale, Z), Lambda, Theta, scale, regime, rng.record())


def goe(n: int, gen: np.random.Generator) -> np.ndarray:
    """GOE(n) with off-diagonal variance 1/n and diagonal variance 2/n."""
    G = gen.standard_normal((n, n))
    return (G + G.T) / math.sqrt(2.0 * n)


def sample_symmetric(prior_lambda: Prior, n: int, q_theta: float, rng=None) -> SymmetricSample:
    """Draw ``Y = (q_theta / n) Lambda Lambda^T + W`` with ``W ~ GOE(n)``."""
    if q_theta < 0:
        raise ContractViolation("q_theta must be nonnegative")
    rng = as_stream(rng)
    Lambda = prior_lambda.sample(rng.generator(0), n)
    W = goe(n, rng.generator(2))
    Y = (q_theta / n) * (Lambda @ Lambda.T) + W
    return SymmetricSample(0.5 * (Y + Y.T), Lambda, float(q_theta), rng.record())


def sample_gmm(variant: str, prior_centers: Prior, n: int, d: int, rng=None,
               s_n: float | None = None) -> GmmSample:
    """Equal-weight Gaussian mixture with centers ``Theta / (nd)^{1/4}``.

    ``s_n`` overrides the weak-regime scale (useful for noise-free sanity runs).
    """
    if n < 2 or d < 2:
        raise ContractViolation("need n, d >= 2")
    rng = as_stream(rng)
    scale = signal_scale(WEAK, n, d) if s_n is None else signal_scale(CUSTOM, n, d, s_n)
    if variant == SYMMETRIC_PAIR:
        if prior_centers.dim != 1:
            raise ContractViolation("symmetric pair needs a scalar center prior")
        q = float(prior_centers.second_moment()[0, 0])
        Lambda = Prior.rademacher().sample(rng.generator(0), n)
        labels = Lambda[:, 0].astype(np.int64)
    elif variant == ORTHOGONAL_CENTERS:
        q = prior_centers.scalar_variance()
        k = prior_centers.dim
        Lambda = Prior.simplex(k).sample(rng.generator(0), n)
        labels = np.argmax(Lambda, axis=1).astype(np.int64)
    else:
        raise ContractViolation(f"unknown mixture variant {variant!r}")
    centers = prior_centers.sample(rng.generator(1), d)
    Z = rng.generator(2).standard_normal((n, d))
    A = _planted(Lambda, centers, scale, Z)
    return GmmSample(A, labels, centers, variant, q, scale, rng.record())


def gram_reduce(sample_or_A) -> np.ndarray:
    """``(A A^T - d I_n) / sqrt(n d)``, exactly symmetric."""
    A = sample_or_A.A if hasattr(sample_or_A, "A") else np.asarray(sample_or_A, dtype=float)
    n, d = A.shape
    M = A @ A.T
    M[np.diag_indices(n)] -= d
    M /= math.sqrt(n * d)
    return 0.5 * (M + M.T)


# ---------------------------------------------------------------------------
# Serialisation
# ---------------------------------------------------------------------------

_ARRAYS = ("A", "Y", "Lambda", "Theta", "labels", "centers")


def save_sample(sample, path) -> Path:
    """Write ``.npz`` (binary) or ``.csv`` (main matrix + ``.meta.json`` sidecar)."""
    path = Path(path)
    meta = sample.metadata()
    arrays = {name: getattr(sample, name) for name in _ARRAYS if hasattr(sample, name)}
    if isinstance(sample, GmmSample):
        arrays.pop("Lambda")
    if path.suffix == ".npz":
        np.savez(path, meta=json.dumps(meta, sort_keys=True), **arrays)
    elif path.suffix == ".csv":
        main = arrays.get("A", arrays.get("Y"))
        np.savetxt(path, main, delimiter=",", fmt="%.17g")
        path.with_suffix(".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    else:
        raise ContractViolation(f"unsupported sample format {path.suffix!r}")
    return path


def load_sample(path):
    """Inverse of :func:`save_sample` for ``.npz`` files."""
    with np.load(path) as data:
        meta = json.loads(str(data["meta"]))
        arrays = {k: data[k] for k in data.files if k != "meta"}
    seed = {k: meta[k] for k in ("seed", "stream_id") if k in meta}
    if meta["kind"] == "spiked":
        return SpikedSample(arrays["A"], arrays["Lambda"], arrays["Theta"], meta["s_n"],
                            meta["regime"], seed)
    if meta["kind"] == "symmetric":
        return SymmetricSample(arrays["Y"], arrays["Lambda"], meta["q_theta"], seed)
    return GmmSample(arrays["A"], arrays["labels"], arrays["centers"], meta["variant"],
                     meta["q_theta"], meta["s_n"], seed)
