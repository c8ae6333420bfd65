"""Double-precision helpers shared by every other module.

Vectors and matrices are plain ``numpy.float64`` arrays. Matrices follow the
(out, in) convention, so a layer maps a row batch ``x`` of shape (B, in) to
``x @ W.T``. Named parameter sets are ordered ``dict[str, np.ndarray]``.
"""
import hashlib
import logging

import numpy as np

from utils import GradientCheckError, ShapeError

logger = logging.getLogger(__name__)

CLAMP = 40.0
RNG_ALGORITHM = "philox4x64-10/blake2b-key"


# ----------------------
# Activations
# ----------------------
def sigmoid(x):
    x = np.clip(np.asarray(x, dtype=np.float64), -CLAMP, CLAMP)
    return 1.0 / (1.0 + np.exp(-x))


def tanh_act(x):
    return np.tanh(np.clip(np.asarray(x, dtype=np.float64), -CLAMP, CLAMP))


def gemv(W, x):
    W = np.asarray(W, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if W.ndim != 2 or x.ndim != 1 or W.shape[1] != x.shape[0]:
        raise ShapeError("gemv", W.shape, x.shape)
    return W @ x


def linear(x, W, what="linear"):
    """Row-batch product ``x @ W.T`` with a shape check."""
    if x.shape[-1] != W.shape[1]:
        raise ShapeError(what, W.shape, x.shape)
    return x @ W.T


# ----------------------
# Randomness
# ----------------------
class Rng:
    """Counter-based generator with named, independent substreams.

    The Philox key is a blake2b digest of ``(seed, path)``, so equal seeds give
    equal streams on every platform and ``substream("a")`` never overlaps
    ``substream("b")``.
    """

    algorithm = RNG_ALGORITHM

    def __init__(self, seed, path="root"):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.path = path
        digest = hashlib.blake2b(f"{self.seed}/{path}".encode("utf-8"), digest_size=16).digest()
        self.gen = np.random.Generator(np.random.Philox(key=int.from_bytes(digest, "little")))

    def substream(self, name):
        return Rng(self.seed, f"{self.path}/{name}")

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def random(self, size=None):
        return self.gen.random(size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def choice(self, a, size=None, p=None, replace=True):
        return self.gen.choice(a, size=size, p=p, replace=replace)

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self.path!r})"


def glorot_uniform(rng, rows, cols):
    s = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-s, s, size=(rows, cols))


# ----------------------
# Named parameter sets
# ----------------------
def zeros_like_params(params):
    return {name: np.zeros_like(value) for name, value in params.items()}


def copy_params(params):
    return {name: value.copy() for name, value in params.items()}


def add_into(total, grads, prefix=""):
    for name, g in grads.items():
        total[prefix + name] += g
    return total


def all_finite(params):
    return all(np.all(np.isfinite(v)) for v in params.values())


# ----------------------
# Gradient verification
# ----------------------
def relative_error(analytic, numeric):
    return abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))


def finite_diff_errors(f, params, analytic_grad, h=1e-5):
    """Per-tensor max relative error of ``analytic_grad`` against central differences.

    ``f`` maps the parameter dict to a scalar; entries are perturbed in place and
    restored afterwards.
    """
    errors = {}
    for name, theta in params.items():
        if theta.dtype != np.float64:
            raise TypeError(f"{name}: gradient checking needs float64, got {theta.dtype}")
        grad = analytic_grad[name]
        if grad.shape != theta.shape:
            raise ShapeError(f"gradient of {name}", grad.shape, theta.shape)
        worst = 0.0
        for idx in np.ndindex(theta.shape):
            saved = theta[idx]
            theta[idx] = saved + h
            f_plus = float(f(params))
            theta[idx] = saved - h
            f_minus = float(f(params))
            theta[idx] = saved
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise GradientCheckError(f"non-finite objective when perturbing {name}{list(idx)}")
            numeric = (f_plus - f_minus) / (2.0 * h)
            worst = max(worst, relative_error(float(grad[idx]), numeric))
        errors[name] = worst
        logger.debug("gradcheck %s: %.3e", name, worst)
    return errors


def finite_diff_check(f, params, analytic_grad, h=1e-5):
    errors = finite_diff_errors(f, params, analytic_grad, h)
    return max(errors.values()) if errors else 0.0
