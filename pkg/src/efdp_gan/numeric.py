"""Float64 array plumbing, seeded random streams and hand-written layer gradients.

Tensors are plain ``numpy.ndarray`` objects of dtype float64.  Every layer
primitive comes as a ``*_forward`` / ``*_backward`` pair; backward functions
take the upstream gradient plus whatever the forward pass needs and return
gradients in the same order as the forward inputs.
"""

from __future__ import annotations

import zlib
from functools import lru_cache
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class InvalidParameterError(ValueError):
    """An argument violates an operation's precondition."""


class InvalidStateError(RuntimeError):
    """An object is not in a state the operation can act on."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite or out-of-tolerance value."""


def as_tensor(values, shape: Sequence[int] | None = None) -> np.ndarray:
    t = np.array(values, dtype=np.float64)
    if shape is not None:
        t = t.reshape(tuple(shape))
    if not np.all(np.isfinite(t)):
        raise NumericError("tensor contains non-finite values")
    return t


def _check_shape(shape: Iterable[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if any(s < 0 for s in shape):
        raise InvalidParameterError(f"negative dimension in shape {shape}")
    return shape


# ---------------------------------------------------------------------------
# random streams
# ---------------------------------------------------------------------------

class RngStream:
    """Counter-based (Philox) random stream keyed by ``(seed, name)``.

    Two streams built from the same seed and name yield the same values in the
    same order on every platform.  ``draws`` counts scalar variates handed out.
    """

    def __init__(self, seed: int, name: str = "root"):
        self.seed = int(seed)
        self.name = str(name)
        key = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, zlib.crc32(self.name.encode())])
        self._bitgen = np.random.Philox(key=key.generate_state(2, np.uint64))
        self._gen = np.random.Generator(self._bitgen)
        self.draws = 0

    def spawn(self, name: str) -> "RngStream":
        """Independent child stream; does not advance this one."""
        return RngStream(self.seed, f"{self.name}/{name}")

    def normal(self, shape: Sequence[int], mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        shape = _check_shape(shape)
        out = self._gen.standard_normal(shape)
        self.draws += out.size
        return mean + std * out

    def uniform(self, shape: Sequence[int], low: float = 0.0, high: float = 1.0) -> np.ndarray:
        shape = _check_shape(shape)
        out = self._gen.random(shape)
        self.draws += out.size
        return low + (high - low) * out

    def integers(self, high: int, size: int | None = None) -> np.ndarray | int:
        out = self._gen.integers(0, high, size=size)
        self.draws += 1 if size is None else int(size)
        return out

    def permutation(self, n: int) -> np.ndarray:
        self.draws += n
        return self._gen.permutation(n)

    def get_state(self) -> dict:
        st = self._bitgen.state
        return {
            "seed": self.seed,
            "name": self.name,
            "draws": self.draws,
            "counter": [int(c) for c in st["state"]["counter"]],
            "key": [int(k) for k in st["state"]["key"]],
            "buffer": [int(b) for b in st["buffer"]],
            "buffer_pos": int(st["buffer_pos"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    @classmethod
    def from_state(cls, state: dict) -> "RngStream":
        rng = cls(state["seed"], state["name"])
        rng._bitgen.state = {
            "bit_generator": "Philox",
            "state": {
                "counter": np.array(state["counter"], dtype=np.uint64),
                "key": np.array(state["key"], dtype=np.uint64),
            },
            "buffer": np.array(state["buffer"], dtype=np.uint64),
            "buffer_pos": state["buffer_pos"],
            "has_uint32": state["has_uint32"],
            "uinteger": state["uinteger"],
        }
        rng.draws = state["draws"]
        return rng


def gaussian_sample(shape: Sequence[int], mean: float, std: float, rng: RngStream) -> np.ndarray:
    if std < 0:
        raise InvalidParameterError(f"std must be non-negative, got {std}")
    return rng.normal(shape, mean, std)


def l2_norm(v: np.ndarray) -> float:
    return float(np.sqrt(np.sum(np.square(v))))


# ---------------------------------------------------------------------------
# flat parameter storage
# ---------------------------------------------------------------------------

@lru_cache(maxsize=1024)
def _layout(segments: tuple) -> tuple[int, dict]:
    """Total size and ``name -> (shape, lo, hi)`` for a normalised segment tuple."""
    index, off = {}, 0
    for name, shape in segments:
        n = int(np.prod(shape))
        index[name] = (shape, off, off + n)
        off += n
    if len(index) != len(segments):
        raise InvalidParameterError("duplicate segment names")
    return off, index


@dataclass
class ParamVector:
    """Named parameter segments stored back to back in one flat float64 array."""

    segments: list[tuple[str, tuple[int, ...]]]
    data: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.segments = [(str(n), tuple(int(d) for d in s)) for n, s in self.segments]
        size, _ = _layout(tuple(self.segments))
        if self.data is None:
            self.data = np.zeros(size)
        else:
            self.data = np.asarray(self.data, dtype=np.float64)
            if self.data.shape != (size,):
                raise InvalidParameterError(f"data has shape {self.data.shape}, segments need ({size},)")

    @property
    def size(self) -> int:
        return self.data.size

    def _offsets(self):
        for name, (shape, lo, hi) in _layout(tuple(self.segments))[1].items():
            yield name, shape, lo, hi

    def view(self, name: str) -> np.ndarray:
        d = self.__dict__
        views = d.get("_views")
        if views is None or d["_views_of"] is not self.data:
            index = d.get("_index")
            if index is None:
                index = d["_index"] = _layout(tuple(self.segments))[1]
            views = d["_views"] = {n: self.data[lo:hi].reshape(shape) for n, (shape, lo, hi) in index.items()}
            d["_views_of"] = self.data
        return views[name]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.view(name)

    def __getstate__(self):
        # copies must not inherit views into the original buffer
        return {"segments": self.segments, "data": self.data}

    def unflatten(self) -> dict[str, np.ndarray]:
        return {n: self.data[lo:hi].reshape(shape).copy() for n, shape, lo, hi in self._offsets()}

    @classmethod
    def flatten(cls, arrays: dict[str, np.ndarray], segments=None) -> "ParamVector":
        if segments is None:
            segments = [(n, np.shape(a)) for n, a in arrays.items()]
        data = np.concatenate([np.ravel(np.asarray(arrays[n], dtype=np.float64)) for n, _ in segments]) \
            if segments else np.zeros(0)
        return cls(list(segments), data)

    def zeros_like(self) -> "ParamVector":
        return ParamVector(self.segments, np.zeros_like(self.data))

    def _sibling(self, data: np.ndarray) -> "ParamVector":
        # same layout, so skip re-validating the segments
        if data.shape != self.data.shape:
            raise InvalidParameterError(f"data has shape {data.shape}, segments need {self.data.shape}")
        out = object.__new__(ParamVector)
        out.segments, out.data = self.segments, data
        if "_index" in self.__dict__:
            out.__dict__["_index"] = self.__dict__["_index"]
        return out

    def copy(self) -> "ParamVector":
        return self._sibling(self.data.copy())

    def with_data(self, data: np.ndarray) -> "ParamVector":
        return self._sibling(np.array(data, dtype=np.float64))


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def grad_check(f: Callable, v, analytic_grad, step: float = 1e-5) -> float:
    """Max relative error between ``analytic_grad`` and central differences of ``f`` at ``v``.

    ``f`` receives an object of the same kind as ``v`` (ParamVector or array).
    The error per coordinate is ``|fd - an| / max(1, |fd|, |an|)``.
    """
    if step <= 0:
        raise InvalidParameterError("step must be positive")
    is_pv = isinstance(v, ParamVector)
    base = (v.data if is_pv else np.asarray(v, dtype=np.float64)).ravel().copy()
    an = np.ravel(analytic_grad.data if isinstance(analytic_grad, ParamVector) else analytic_grad)
    if an.size != base.size:
        raise InvalidParameterError("analytic gradient size does not match v")

    def wrap(flat):
        if is_pv:
            return v.with_data(flat)
        return flat.reshape(np.shape(v))

    worst = 0.0
    for i in range(base.size):
        plus, minus = base.copy(), base.copy()
        plus[i] += step
        minus[i] -= step
        fp, fm = float(f(wrap(plus))), float(f(wrap(minus)))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value at coordinate {i}")
        fd = (fp - fm) / (2 * step)
        err = abs(fd - an[i]) / max(1.0, abs(fd), abs(an[i]))
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# layer primitives
# ---------------------------------------------------------------------------

def add_forward(a, b):
    return a + b


def add_backward(dy):
    return dy, dy


def mul_forward(a, b):
    return a * b


def mul_backward(dy, a, b):
    return dy * b, dy * a


def affine_forward(x, W, b):
    """``x @ W + b`` with ``x`` of shape (N, in) and ``W`` of shape (in, out)."""
    return x @ W + b


def affine_backward(dy, x, W):
    return dy @ W.T, x.T @ dy, dy.sum(axis=0)


def _im2col(x, k):
    p = k // 2
    n, c, h, w = x.shape
    # np.pad and sliding_window_view dominate at these sizes; do both by hand
    xp = np.zeros((n, c, h + 2 * p, w + 2 * p))
    xp[:, :, p:p + h, p:p + w] = x
    s0, s1, s2, s3 = xp.strides
    win = np.lib.stride_tricks.as_strided(xp, (n, h, w, c, k, k), (s0, s2, s3, s1, s2, s3), writeable=False)
    return win.reshape(n * h * w, c * k * k)


def conv_forward(x, W, b):
    """Same-padded stride-1 convolution; x (N, C, H, W), W (O, C, k, k) with odd k."""
    n, _, h, w = x.shape
    o, k = W.shape[0], W.shape[-1]
    y = _im2col(x, k) @ W.reshape(o, -1).T + b
    return y.reshape(n, h, w, o).transpose(0, 3, 1, 2)


def conv_backward(dy, x, W):
    n, c, h, w = x.shape
    o, k = W.shape[0], W.shape[-1]
    p = k // 2
    dy_flat = dy.transpose(0, 2, 3, 1).reshape(-1, o)
    dW = (dy_flat.T @ _im2col(x, k)).reshape(W.shape)
    dcols = (dy_flat @ W.reshape(o, -1)).reshape(n, h, w, c, k, k)
    dxp = np.zeros((n, c, h + 2 * p, w + 2 * p))
    for di in range(k):
        for dj in range(k):
            dxp[:, :, di:di + h, dj:dj + w] += dcols[..., di, dj].transpose(0, 3, 1, 2)
    dx = dxp[:, :, p:p + h, p:p + w] if p else dxp
    return dx, dW, dy_flat.sum(axis=0)


def relu_forward(x):
    return np.maximum(x, 0.0)


def relu_backward(dy, x):
    return dy * (x > 0)


def tanh_forward(x):
    return np.tanh(x)


def tanh_backward(dy, y):
    """``y`` is the forward output."""
    return dy * (1.0 - y * y)


def sigmoid_forward(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid_backward(dy, y):
    return dy * y * (1.0 - y)


ACTIVATIONS = {
    "relu": (relu_forward, lambda dy, x, y: relu_backward(dy, x)),
    "tanh": (tanh_forward, lambda dy, x, y: tanh_backward(dy, y)),
    "sigmoid": (sigmoid_forward, lambda dy, x, y: sigmoid_backward(dy, y)),
    "identity": (lambda x: x, lambda dy, x, y: dy),
}


def upsample2x_forward(x):
    """Nearest-neighbour 2x upsampling of the last two axes."""
    return x.repeat(2, axis=-2).repeat(2, axis=-1)


def upsample2x_backward(dy):
    *lead, h, w = dy.shape
    return dy.reshape(*lead, h // 2, 2, w // 2, 2).sum(axis=(-3, -1))


def log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits):
    return np.exp(log_softmax(logits))


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood and its gradient wrt ``logits``."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise InvalidParameterError("labels must be one per row of logits")
    if np.any(labels < 0) or np.any(labels >= k):
        raise InvalidParameterError(f"label out of range [0, {k})")
    logp = log_softmax(logits)
    loss = -logp[np.arange(n), labels].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1.0
    return float(loss), dlogits / n


def sum_forward(x):
    return float(np.sum(x))


def sum_backward(dy, shape):
    return np.full(shape, dy)


def mean_forward(x):
    return float(np.mean(x))


def mean_backward(dy, shape):
    return np.full(shape, dy / int(np.prod(shape)))
