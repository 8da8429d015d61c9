import functools
import logging
import warnings
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import linalg, optimize, special
from sklearn.datasets import make_classification

logger = logging.getLogger(__name__)

KINDS = ('NoisyQuadratic', 'SyntheticLogistic', 'NonconvexTest')

# Sample counts used when constants have to be estimated
DEFAULT_ESTIMATION_SAMPLES = 100_000
DEFAULT_BOX_RADIUS = 10.0


class DimensionMismatch(ValueError):
    """A parameter vector does not have the objective's dimension."""


class InvalidObjective(ValueError):
    """An objective specification or constants record violates its invariants."""


@dataclass(frozen=True)
class ObjectiveSpec:
    """
    Description of a synthetic stochastic objective.

    Only the fields relevant to ``kind`` are read:

    - NoisyQuadratic: ``spectrum`` (eigenvalues of A, default evenly spaced in
      [1, 10]), ``rotate``, ``w_star`` and the gradient noise level ``sigma``.
    - SyntheticLogistic: dataset size ``n``, ``class_sep`` and ridge ``reg``.
    - NonconvexTest: coordinate weight ``a``, ridge ``mu`` and noise ``sigma``.

    ``seed`` drives every random construction (rotation, dataset); the same spec
    always yields the same objective.
    """
    kind: str
    d: int
    sigma: float = 0.0
    spectrum: Optional[Tuple[float, ...]] = None
    rotate: bool = False
    w_star: Optional[Tuple[float, ...]] = None
    n: int = 1000
    class_sep: float = 1.0
    reg: float = 0.0
    a: float = 1.0
    mu: float = 0.0
    box_radius: float = DEFAULT_BOX_RADIUS
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidObjective(f"Unsupported objective kind {self.kind!r}, expected one of {KINDS}")
        if self.d < 1:
            raise InvalidObjective(f"d must be >= 1, got {self.d}")
        if self.sigma < 0:
            raise InvalidObjective(f"sigma must be >= 0, got {self.sigma}")
        if self.spectrum is not None:
            if len(self.spectrum) != self.d:
                raise InvalidObjective(f"spectrum has {len(self.spectrum)} entries, expected d={self.d}")
            if min(self.spectrum) <= 0:
                raise InvalidObjective(f"eigenvalues of A must be strictly positive, got {self.spectrum}")
        if self.w_star is not None and len(self.w_star) != self.d:
            raise InvalidObjective(f"w_star has {len(self.w_star)} entries, expected d={self.d}")
        if self.reg < 0 or self.mu < 0 or self.a < 0:
            raise InvalidObjective("reg, mu and a must be non-negative")
        if self.kind == 'SyntheticLogistic' and self.n < 2:
            raise InvalidObjective(f"dataset size n must be >= 2, got {self.n}")


@dataclass(frozen=True)
class SampleKey:
    """Address of one stochastic sample: (seed, worker j, global step t, sample s), s counted from 0."""
    seed: int
    j: int
    t: int
    s: int = 0


@dataclass(frozen=True)
class ObjectiveConstants:
    """
    Smoothness, noise and gap constants consumed by the bounds.

    ``estimated`` is set when any value came from sampling rather than a closed form.
    """
    L: float
    M: float
    M_G: float
    F_star: float
    F1_minus_Fstar: float = 0.0
    estimated: bool = False

    def __post_init__(self):
        if not self.L > 0:
            raise InvalidObjective(f"L must be > 0, got {self.L}")
        if self.M < 0:
            raise InvalidObjective(f"M must be >= 0, got {self.M}")
        if self.M_G < self.M:
            raise InvalidObjective(f"M_G={self.M_G} must be >= M={self.M}")
        if self.F1_minus_Fstar < 0:
            raise InvalidObjective(f"F1_minus_Fstar must be >= 0, got {self.F1_minus_Fstar}")


@dataclass(frozen=True)
class _Problem:
    spectrum: np.ndarray
    rotation: Optional[np.ndarray]
    w_star: np.ndarray
    X: Optional[np.ndarray] = None
    y: Optional[np.ndarray] = None


@functools.lru_cache(maxsize=32)
def _problem(spec):
    d = spec.d
    if spec.kind == 'NoisyQuadratic':
        spectrum = np.linspace(1.0, 10.0, d) if spec.spectrum is None else np.asarray(spec.spectrum, dtype=np.float64)
        rotation = None
        if spec.rotate:
            rng = np.random.default_rng(spec.seed)
            rotation, _ = np.linalg.qr(rng.standard_normal((d, d)))
        w_star = np.zeros(d) if spec.w_star is None else np.asarray(spec.w_star, dtype=np.float64)
        return _Problem(spectrum=spectrum, rotation=rotation, w_star=w_star)
    if spec.kind == 'SyntheticLogistic':
        X, y = make_classification(n_samples=spec.n, n_features=d, n_informative=d, n_redundant=0,
                                   n_repeated=0, n_clusters_per_class=1, class_sep=spec.class_sep,
                                   random_state=spec.seed)
        return _Problem(spectrum=np.empty(0), rotation=None, w_star=np.zeros(d),
                        X=X.astype(np.float64), y=y.astype(np.float64))
    return _Problem(spectrum=np.empty(0), rotation=None, w_star=np.zeros(d))


def _check_dim(spec, w):
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (spec.d,):
        raise DimensionMismatch(f"Expected a vector of dimension {spec.d}, got shape {w.shape}")
    return w


def sample_generator(seed, j, t):
    """
    Counter-based generator of all samples drawn by worker j at global step t.

    The stream depends only on (seed, j, t), never on execution order.
    """
    counter = np.array([0, 0, t, j], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=seed, counter=counter))


def _apply_A(problem, x):
    if problem.rotation is None:
        return problem.spectrum * x
    Q = problem.rotation
    return Q @ (problem.spectrum * (Q.T @ x))


def _logistic_sample_gradients(spec, problem, w, idx):
    X = problem.X[idx]
    return (special.expit(X @ w) - problem.y[idx])[:, None] * X + spec.reg * w


def full_gradient(spec, w):
    """
    Exact gradient of the objective at w.

    Args:
        spec (ObjectiveSpec): The objective.
        w (array-like): Parameter vector of dimension ``spec.d``.

    Returns:
        numpy.ndarray: The gradient.

    Raises:
        DimensionMismatch: If ``w`` has the wrong shape.
    """
    w = _check_dim(spec, w)
    problem = _problem(spec)
    if spec.kind == 'NoisyQuadratic':
        return _apply_A(problem, w - problem.w_star)
    if spec.kind == 'SyntheticLogistic':
        X = problem.X
        return X.T @ (special.expit(X @ w) - problem.y) / spec.n + spec.reg * w
    return 2.0 * spec.a * w / (1.0 + w * w) ** 2 + spec.mu * w


def loss(spec, w):
    """
    Objective value F(w).

    Args:
        spec (ObjectiveSpec): The objective.
        w (array-like): Parameter vector of dimension ``spec.d``.

    Returns:
        float: F(w).

    Raises:
        DimensionMismatch: If ``w`` has the wrong shape.
    """
    w = _check_dim(spec, w)
    problem = _problem(spec)
    if spec.kind == 'NoisyQuadratic':
        e = w - problem.w_star
        return float(0.5 * e @ _apply_A(problem, e))
    if spec.kind == 'SyntheticLogistic':
        z = problem.X @ w
        return float(np.mean(np.logaddexp(0.0, z) - problem.y * z) + 0.5 * spec.reg * w @ w)
    return float(np.sum(spec.a * w * w / (1.0 + w * w)) + 0.5 * spec.mu * w @ w)


def _sample_gradient(spec, problem, w, grad, gen, count, s):
    # row s of a `count`-row draw; rows are prefix-stable in `count`
    if spec.kind == 'SyntheticLogistic':
        idx = gen.integers(0, spec.n, size=count)[s]
        return _logistic_sample_gradients(spec, problem, w, [idx])[0]
    noise = gen.standard_normal((count, spec.d))[s]
    return grad + spec.sigma * noise


def stochastic_gradient(spec, w, key):
    """
    One sampled gradient, fully determined by ``key``.

    The same key always returns a bitwise-identical vector, and sample ``key.s``
    equals row ``s`` of :func:`minibatch_gradient_sum`'s draw for the same step.

    Args:
        spec (ObjectiveSpec): The objective.
        w (array-like): Parameter vector of dimension ``spec.d``.
        key (SampleKey): Sample address.

    Returns:
        numpy.ndarray: An unbiased estimate of ``full_gradient(spec, w)``.

    Raises:
        DimensionMismatch: If ``w`` has the wrong shape.
    """
    w = _check_dim(spec, w)
    problem = _problem(spec)
    grad = None if spec.kind == 'SyntheticLogistic' else full_gradient(spec, w)
    gen = sample_generator(key.seed, key.j, key.t)
    return _sample_gradient(spec, problem, w, grad, gen, key.s + 1, key.s)


def minibatch_gradient_sum(spec, w, seed, j, t, B):
    """
    Sum of the B sampled gradients of worker j at step t, added in sample order.

    Args:
        spec (ObjectiveSpec): The objective.
        w (numpy.ndarray): Pre-step parameters.
        seed (int): Run seed.
        j (int): Worker index.
        t (int): Global step index.
        B (int): Batch size.

    Returns:
        numpy.ndarray: The gradient sum (not divided by B).
    """
    w = _check_dim(spec, w)
    problem = _problem(spec)
    gen = sample_generator(seed, j, t)
    if spec.kind == 'SyntheticLogistic':
        samples = [_logistic_sample_gradients(spec, problem, w, [idx])[0]
                   for idx in gen.integers(0, spec.n, size=B)]
    else:
        grad = full_gradient(spec, w)
        samples = [grad + spec.sigma * row for row in gen.standard_normal((B, spec.d))]
    total = samples[0]
    for sample in samples[1:]:
        total = total + sample
    return total


def _ball_points(center, radius, count, rng):
    d = center.shape[0]
    directions = rng.standard_normal((count, d))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    radii = radius * rng.uniform(size=count) ** (1.0 / d)
    return center + directions * radii[:, None]


def _logistic_moments(spec, problem, points):
    variance, second = 0.0, 0.0
    for w in points:
        per_sample = _logistic_sample_gradients(spec, problem, w, slice(None))
        mean = per_sample.mean(axis=0)
        variance = max(variance, float(np.mean(np.sum((per_sample - mean) ** 2, axis=1))))
        second = max(second, float(np.mean(np.sum(per_sample ** 2, axis=1))))
    return variance, second


def constants(spec, w0=None, n_samples=DEFAULT_ESTIMATION_SAMPLES, seed=0):
    """
    Constants L, M, M_G and F* of an objective, plus the initial gap at ``w0``.

    NoisyQuadratic values are exact; M_G is the second moment bound over the
    ball of radius ``spec.box_radius`` around w*. SyntheticLogistic uses the
    analytic L and estimates M and M_G over points sampled in the ball around
    the origin. NonconvexTest estimates M_G the same way. Estimated records
    carry ``estimated=True`` and raise a warning.

    Args:
        spec (ObjectiveSpec): The objective.
        w0 (array-like, optional): Initial point for ``F1_minus_Fstar``. Defaults to None (gap 0).
        n_samples (int, optional): Sampling budget for estimates. Defaults to 100000.
        seed (int, optional): Seed of the estimation sampler. Defaults to 0.

    Returns:
        ObjectiveConstants: The constants.
    """
    problem = _problem(spec)
    d = spec.d
    estimated = False
    if spec.kind == 'NoisyQuadratic':
        L = float(problem.spectrum.max())
        M = d * spec.sigma ** 2
        M_G = (L * spec.box_radius) ** 2 + M
        F_star = 0.0
    elif spec.kind == 'SyntheticLogistic':
        X = problem.X
        L = float(linalg.eigvalsh(X.T @ X).max()) / (4.0 * spec.n) + spec.reg
        rng = np.random.default_rng(seed)
        points = _ball_points(np.zeros(d), spec.box_radius, max(1, n_samples // spec.n), rng)
        M, M_G = _logistic_moments(spec, problem, points)
        result = optimize.minimize(lambda w: loss(spec, w), np.zeros(d),
                                   jac=lambda w: full_gradient(spec, w), method='L-BFGS-B')
        F_star = min(float(result.fun), loss(spec, np.zeros(d)))
        estimated = True
    else:
        # Curvature of a*w^2/(1+w^2) peaks at the origin
        L = 2.0 * spec.a + spec.mu
        M = d * spec.sigma ** 2
        rng = np.random.default_rng(seed)
        points = _ball_points(np.zeros(d), spec.box_radius, n_samples, rng)
        grads = 2.0 * spec.a * points / (1.0 + points ** 2) ** 2 + spec.mu * points
        M_G = float(np.max(np.sum(grads ** 2, axis=1))) + M
        F_star = 0.0
        estimated = True

    gap = 0.0
    if w0 is not None:
        gap = max(0.0, loss(spec, w0) - F_star)
    if estimated:
        warnings.warn(f"Constants of {spec.kind} are sampled estimates, not closed forms")
    logger.debug("constants for %s: L=%g M=%g M_G=%g F*=%g", spec.kind, L, M, M_G, F_star)
    return ObjectiveConstants(L=L, M=M, M_G=M_G, F_star=F_star, F1_minus_Fstar=gap, estimated=estimated)
