"""Input validation, random-state handling and small linear-algebra helpers."""

import numbers

import numpy as np

CONDITION_LIMIT = 1e12
SYMMETRY_TOL = 1e-12


class ValidationError(ValueError):
    """Raised when an input violates a documented precondition."""


class SingularMatrixError(np.linalg.LinAlgError):
    """Raised when a matrix that must be inverted is (numerically) singular."""


class DivergenceError(RuntimeError):
    """Raised when an iterative trainer leaves the bounded region."""


def as_rng(seed=None):
    """Turn ``seed`` into a ``numpy.random.Generator``.

    Integers and ``SeedSequence`` objects build a fresh Philox (counter-based)
    generator, so the same integer always reproduces the same stream.
    Generators are passed through untouched.
    """
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.Philox(seed))
    if seed is None or isinstance(seed, numbers.Integral):
        return np.random.Generator(np.random.Philox(seed))
    raise ValidationError(f"cannot build a random generator from {seed!r}")


def spawn(rng, n):
    """Split ``rng`` into ``n`` independent child generators."""
    rng = as_rng(rng)
    return [np.random.Generator(np.random.Philox(s))
            for s in rng.bit_generator.seed_seq.spawn(n)]


def check_vector(w, name="vector", dim=None):
    w = np.asarray(w, dtype=float)
    if w.ndim != 1:
        raise ValidationError(f"{name} must be one-dimensional, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise ValidationError(f"{name} has non-finite entries")
    if dim is not None and w.shape[0] != dim:
        raise ValidationError(f"{name} has length {w.shape[0]}, expected {dim}")
    return w


def check_symmetric(a, name="matrix", tol=SYMMETRY_TOL):
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValidationError(f"{name} must be square, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValidationError(f"{name} has non-finite entries")
    scale = max(1.0, float(np.max(np.abs(a))))
    if np.max(np.abs(a - a.T)) > tol * scale:
        raise ValidationError(f"{name} is not symmetric")
    return a


def check_spd(a, name="covariance"):
    a = check_symmetric(a, name)
    if np.linalg.eigvalsh(a)[0] <= 0:
        raise ValidationError(f"{name} is not positive definite")
    return a


def check_positive(x, name, strict=True):
    if not np.isfinite(x) or (x <= 0 if strict else x < 0):
        kind = "positive" if strict else "nonnegative"
        raise ValidationError(f"{name} must be {kind}, got {x!r}")
    return x


def check_count(s, name, minimum=1, allow_inf=False):
    """Sample counts are integers >= ``minimum``; ``math.inf`` marks the large-count limit."""
    if allow_inf and s == np.inf:
        return np.inf
    if isinstance(s, bool) or not isinstance(s, numbers.Integral) or s < minimum:
        raise ValidationError(f"{name} must be an integer >= {minimum}, got {s!r}")
    return int(s)


def spd_solve(a, b, what="matrix"):
    """Solve ``a x = b`` for symmetric ``a`` through an eigendecomposition.

    Raises SingularMatrixError when the condition number exceeds
    ``CONDITION_LIMIT`` or an eigenvalue is nonpositive.
    """
    a = 0.5 * (a + a.T)
    evals, evecs = np.linalg.eigh(a)
    top = evals[-1]
    if top <= 0 or evals[0] <= top / CONDITION_LIMIT:
        raise SingularMatrixError(
            f"{what} is singular or ill-conditioned "
            f"(eigenvalue range [{evals[0]:.3e}, {top:.3e}])")
    return evecs @ ((evecs.T @ b) / evals if np.ndim(b) == 1
                    else (evecs.T @ b) / evals[:, None])
