"""Dense float64 layer primitives with hand-written backward rules.

Matrices are plain 2-D ``numpy.float64`` arrays. Each forward primitive has a
matching ``*_backward`` that returns the gradient w.r.t. its input and
accumulates parameter gradients into :class:`ParamTensor` objects.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import BatchSizeError, ConfigError, DimensionError, EvaluationError

TRAIN = "train"
EVAL = "eval"


@dataclass
class ParamTensor:
    value: np.ndarray
    grad: np.ndarray = None
    trainable: bool = True

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0

    def accumulate(self, g):
        if self.trainable:
            self.grad += g


class DeterministicRng:
    """Seeded random stream; ``spawn(i)`` gives an independent child stream.

    Streams are keyed by ``(seed, path)`` through :class:`numpy.random.SeedSequence`
    so the same key always reproduces the same draws.
    """

    def __init__(self, seed, path=()):
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def spawn(self, stream_id):
        return DeterministicRng(self.seed, self.path + (int(stream_id),))

    def random(self, size=None):
        return self.generator.random(size)

    def uniform(self, low, high, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def __repr__(self):
        return f"DeterministicRng(seed={self.seed}, path={self.path})"


def _check_2d(name, a):
    if a.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {a.shape}")


def affine(x, W, b):
    _check_2d("x", x)
    if x.shape[1] != W.shape[0] or b.shape != (1, W.shape[1]):
        raise DimensionError(
            f"affine shape mismatch: x{x.shape} @ W{W.shape} + b{b.shape}"
        )
    return x @ W.value + b.value


def affine_backward(grad_out, x, W, b):
    W.accumulate(x.T @ grad_out)
    b.accumulate(grad_out.sum(axis=0, keepdims=True))
    return grad_out @ W.value.T


def gelu(x):
    return kernels.gelu_forward(x)


def gelu_backward(grad_out, x):
    return kernels.gelu_backward(x, grad_out)


_TANH_LIMIT = np.nextafter(1.0, 0.0)


def tanh_act(x):
    # np.tanh rounds to exactly +-1 for |x| > ~19; keep the range open
    return np.clip(np.tanh(x), -_TANH_LIMIT, _TANH_LIMIT)


def tanh_backward(grad_out, y):
    return grad_out * (1.0 - y * y)


def softmax_row(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_row_backward(grad_out, y):
    return y * (grad_out - (grad_out * y).sum(axis=1, keepdims=True))


def dropout(x, rate, mode, rng):
    """Inverted dropout. Returns ``(y, mask)``; ``mask`` is ``None`` when inactive."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == EVAL or rate == 0.0:
        return x, None
    keep = rng.random(x.shape) >= rate
    mask = keep / (1.0 - rate)
    return x * mask, mask


def dropout_backward(grad_out, mask):
    return grad_out if mask is None else grad_out * mask


@dataclass
class NormState:
    """Per-column batch-norm parameters and running statistics."""

    gamma: ParamTensor
    beta: ParamTensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, dim, momentum=0.1, eps=1e-5):
        return cls(
            gamma=ParamTensor(np.ones((1, dim))),
            beta=ParamTensor(np.zeros((1, dim))),
            running_mean=np.zeros((1, dim)),
            running_var=np.ones((1, dim)),
            momentum=momentum,
            eps=eps,
        )

    @property
    def dim(self):
        return self.gamma.shape[1]


@dataclass
class _NormCache:
    mode: str
    xhat: np.ndarray
    inv_std: np.ndarray


def batch_norm(x, state, mode, update_running=True):
    """Returns ``(y, cache)``.

    Train mode normalizes by biased batch variance; the running variance is
    updated with the unbiased estimate.
    """
    _check_2d("x", x)
    if x.shape[1] != state.dim:
        raise DimensionError(f"batch_norm: x{x.shape} vs state dim {state.dim}")
    if mode == TRAIN:
        n = x.shape[0]
        if n < 2:
            raise BatchSizeError(f"batch_norm in train mode needs >= 2 rows, got {n}")
        mean = x.mean(axis=0, keepdims=True)
        centered = x - mean
        var = (centered * centered).mean(axis=0, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + state.eps)
        xhat = centered * inv_std
        if update_running:
            m = state.momentum
            state.running_mean = (1.0 - m) * state.running_mean + m * mean
            state.running_var = (1.0 - m) * state.running_var + m * var * (n / (n - 1))
    else:
        inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (x - state.running_mean) * inv_std
    y = xhat * state.gamma.value + state.beta.value
    return y, _NormCache(mode, xhat, inv_std)


def batch_norm_backward(grad_out, cache, state):
    state.gamma.accumulate((grad_out * cache.xhat).sum(axis=0, keepdims=True))
    state.beta.accumulate(grad_out.sum(axis=0, keepdims=True))
    dxhat = grad_out * state.gamma.value
    if cache.mode != TRAIN:
        return dxhat * cache.inv_std
    n = grad_out.shape[0]
    xhat = cache.xhat
    return (cache.inv_std / n) * (
        n * dxhat
        - dxhat.sum(axis=0, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=0, keepdims=True)
    )


def finite_difference_check(
    f, tensors, h=1e-5, max_coords=None, rng=None, floor=1e-6, richardson=False
):
    """Max relative error between stored analytic grads and central differences.

    ``tensors`` is an iterable of :class:`ParamTensor` (or a mapping of them)
    whose ``.grad`` already holds the analytic gradient of ``f()``. Frozen
    tensors are skipped. ``max_coords`` caps the coordinates probed per tensor
    (drawn with ``rng``). The error for one coordinate is
    ``|a - n| / max(|a|, |n|, floor)``, so gradients far below ``floor`` are
    judged in absolute terms.

    With ``richardson=True`` the numeric derivative is ``(4 N(h) - N(2h)) / 3``
    where ``N`` is the central difference; this cancels the ``h**2`` term and
    lets a larger ``h`` keep rounding noise down on deep networks.
    """
    if h <= 0:
        raise ConfigError(f"step h must be positive, got {h}")
    if isinstance(tensors, dict):
        tensors = list(tensors.values())

    def _eval():
        val = float(f())
        if not np.isfinite(val):
            raise EvaluationError(f"objective is not finite: {val}")
        return val

    def _central(flat, i, step):
        orig = flat[i]
        flat[i] = orig + step
        up = _eval()
        flat[i] = orig - step
        down = _eval()
        flat[i] = orig
        return (up - down) / (2.0 * step)

    worst = 0.0
    for t in tensors:
        if not t.trainable:
            continue
        flat = t.value.reshape(-1)
        grad = t.grad.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = np.sort(rng.permutation(flat.size)[:max_coords])
        for i in idx:
            numeric = _central(flat, i, h)
            if richardson:
                numeric = (4.0 * numeric - _central(flat, i, 2.0 * h)) / 3.0
            analytic = grad[i]
            denom = max(abs(analytic), abs(numeric), floor)
            worst = max(worst, float(abs(analytic - numeric) / denom))
    return worst
