"""Dense float64 tensor toolkit with hand-written backward passes.

Everything here is deterministic and 64-bit. Backpropagation is explicit:
each layer ships a forward function that returns a cache and a backward
function that consumes it, accumulating parameter gradients into a
:class:`ParamSet`. There is no general autodiff; `grad_check` certifies
every composite loss against central finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError, TrainingError

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _splitmix64(z: int) -> int:
    z = (z + _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


@dataclass(frozen=True)
class RngState:
    """Counter-based RNG stream id: (seed, counter) fully determine all draws.

    `generator()` always starts the stream from its beginning, so create one
    generator per consumer and draw sequentially; use `split` to derive
    independent streams for sub-tasks.
    """

    seed: int
    counter: int = 0

    def generator(self) -> np.random.Generator:
        key = np.array([self.seed & _MASK64, self.counter & _MASK64], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def split(self, index: int) -> "RngState":
        return RngState(self.seed, _splitmix64(self.counter ^ _splitmix64((index & _MASK64) + 1)))


class ParamSet:
    """Named map of 2-D float64 parameters with gradient and Adam-moment slots."""

    def __init__(self) -> None:
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._adam_m: dict[str, np.ndarray] = {}
        self._adam_v: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.values:
            raise ConfigurationError(f"duplicate parameter name '{name}'")
        arr = np.asarray(value, dtype=np.float64)
        if arr.ndim != 2:
            raise DimensionError(f"parameter '{name}' must be 2-D, got shape {arr.shape}")
        self.values[name] = arr
        self.grads[name] = np.zeros_like(arr)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def names(self) -> list[str]:
        return list(self.values)

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def scale_grads(self, factor: float) -> None:
        for g in self.grads.values():
            g *= factor

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        self.grads[name] += grad

    def copy(self) -> "ParamSet":
        dup = ParamSet()
        for name, value in self.values.items():
            dup.add(name, value.copy())
        return dup

    def load_values(self, other: "ParamSet") -> None:
        if set(other.values) != set(self.values):
            raise DimensionError("parameter name sets differ")
        for name, value in other.values.items():
            if value.shape != self.values[name].shape:
                raise DimensionError(f"shape mismatch for '{name}'")
            self.values[name][...] = value


def ensure_finite(x: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise TrainingError(f"non-finite values in {what}")
    return x


# ---------------------------------------------------------------------------
# elementary layers
# ---------------------------------------------------------------------------

def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-subtraction; rows sum to 1 within 1e-6."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise DimensionError("softmax_rows: empty tensor")
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_backward(dy: np.ndarray, y: np.ndarray) -> np.ndarray:
    dot = np.sum(dy * y, axis=1, keepdims=True)
    return y * (dy - dot)


def linear_fwd(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    if x.shape[1] != w.shape[0]:
        raise DimensionError(f"linear: input width {x.shape[1]} != weight rows {w.shape[0]}")
    return x @ w + b, (x, w)


def linear_bwd(dy: np.ndarray, cache) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x, w = cache
    return dy @ w.T, x.T @ dy, dy.sum(axis=0, keepdims=True)


def layer_norm_fwd(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-6):
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    return xhat * gamma + beta, (xhat, inv, gamma)


def layer_norm_bwd(dy: np.ndarray, cache) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    xhat, inv, gamma = cache
    dgamma = np.sum(dy * xhat, axis=0, keepdims=True)
    dbeta = dy.sum(axis=0, keepdims=True)
    dxhat = dy * gamma
    dx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True)
                - xhat * np.mean(dxhat * xhat, axis=1, keepdims=True))
    return dx, dgamma, dbeta


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu_fwd(x: np.ndarray):
    u = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(u)
    return 0.5 * x * (1.0 + t), (x, t)


def gelu_bwd(dy: np.ndarray, cache) -> np.ndarray:
    x, t = cache
    du = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * du)


def attention_fwd(q: np.ndarray, k: np.ndarray, v: np.ndarray | None, scale_dim: int):
    """Scaled dot-product attention. `v=None` computes the map only."""
    if q.shape[1] != k.shape[1]:
        raise DimensionError(f"attention: query width {q.shape[1]} != key width {k.shape[1]}")
    if v is not None and v.shape[0] != k.shape[0]:
        raise DimensionError(f"attention: {v.shape[0]} value rows != {k.shape[0]} key rows")
    scale = 1.0 / math.sqrt(scale_dim)
    weights = softmax_rows(q @ k.T * scale)
    out = weights @ v if v is not None else None
    return out, weights, (q, k, v, weights, scale)


def attention_bwd(dout: np.ndarray | None, dweights: np.ndarray | None, cache):
    """Backward through attention; gradients may enter via the output, the
    weights (used by score-supervision losses), or both."""
    q, k, v, weights, scale = cache
    dv = None
    dw = np.zeros_like(weights)
    if dout is not None:
        dv = weights.T @ dout
        dw += dout @ v.T
    if dweights is not None:
        dw += dweights
    dlogits = softmax_rows_backward(dw, weights)
    dq = dlogits @ k * scale
    dk = dlogits.T @ q * scale
    return dq, dk, dv


def cross_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                    dim: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """softmax(q kᵀ/√dim)·v; returns (output, attention weights)."""
    out, weights, _ = attention_fwd(q, k, v, dim if dim is not None else q.shape[1])
    return out, weights


def sinusoidal_encoding(length: int, width: int) -> np.ndarray:
    pos = np.arange(length, dtype=np.float64)[:, None]
    idx = np.arange(width, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * np.floor(idx / 2.0) / width)
    enc = np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))
    return enc


# ---------------------------------------------------------------------------
# composite blocks operating on a ParamSet under a name prefix
# ---------------------------------------------------------------------------

def _glorot(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, size=(rows, cols))


def init_linear(params: ParamSet, prefix: str, d_in: int, d_out: int,
                rng: np.random.Generator, zero: bool = False) -> None:
    w = np.zeros((d_in, d_out)) if zero else _glorot(rng, d_in, d_out)
    params.add(f"{prefix}.w", w)
    params.add(f"{prefix}.b", np.zeros((1, d_out)))


def init_layer_norm(params: ParamSet, prefix: str, width: int) -> None:
    params.add(f"{prefix}.g", np.ones((1, width)))
    params.add(f"{prefix}.b", np.zeros((1, width)))


def init_self_attention(params: ParamSet, prefix: str, width: int,
                        rng: np.random.Generator, zero_out: bool = False) -> None:
    init_layer_norm(params, f"{prefix}.ln", width)
    for name in ("wq", "wk", "wv"):
        init_linear(params, f"{prefix}.{name}", width, width, rng)
    init_linear(params, f"{prefix}.wo", width, width, rng, zero=zero_out)


def init_cross_attention(params: ParamSet, prefix: str, width: int, kv_width: int,
                         rng: np.random.Generator, zero_out: bool = False) -> None:
    init_layer_norm(params, f"{prefix}.ln", width)
    init_linear(params, f"{prefix}.wq", width, width, rng)
    init_linear(params, f"{prefix}.wk", kv_width, width, rng)
    init_linear(params, f"{prefix}.wv", kv_width, width, rng)
    init_linear(params, f"{prefix}.wo", width, width, rng, zero=zero_out)


def init_feed_forward(params: ParamSet, prefix: str, width: int, hidden: int,
                      rng: np.random.Generator, zero_out: bool = False) -> None:
    init_layer_norm(params, f"{prefix}.ln", width)
    init_linear(params, f"{prefix}.w1", width, hidden, rng)
    init_linear(params, f"{prefix}.w2", hidden, width, rng, zero=zero_out)


def init_transformer_block(params: ParamSet, prefix: str, width: int, ff_hidden: int,
                           rng: np.random.Generator, zero_out: bool = False) -> None:
    init_self_attention(params, f"{prefix}.sa", width, rng, zero_out=zero_out)
    init_feed_forward(params, f"{prefix}.ff", width, ff_hidden, rng, zero_out=zero_out)


def _head_slices(width: int, heads: int) -> list[slice]:
    if width % heads != 0:
        raise DimensionError(f"width {width} not divisible by {heads} heads")
    dh = width // heads
    return [slice(h * dh, (h + 1) * dh) for h in range(heads)]


def _mha_core_fwd(q: np.ndarray, k: np.ndarray, v: np.ndarray, heads: int):
    slices = _head_slices(q.shape[1], heads)
    dh = q.shape[1] // heads
    out = np.empty((q.shape[0], q.shape[1]))
    caches = []
    for sl in slices:
        o, _, cache = attention_fwd(q[:, sl], k[:, sl], v[:, sl], dh)
        out[:, sl] = o
        caches.append(cache)
    return out, (slices, caches, q.shape, k.shape)


def _mha_core_bwd(dout: np.ndarray, cache):
    slices, caches, q_shape, k_shape = cache
    dq = np.zeros(q_shape)
    dk = np.zeros(k_shape)
    dv = np.zeros(k_shape)
    for sl, c in zip(slices, caches):
        dq[:, sl], dk[:, sl], dv[:, sl] = attention_bwd(dout[:, sl], None, c)
    return dq, dk, dv


def self_attention_fwd(x: np.ndarray, params: ParamSet, prefix: str, heads: int):
    normed, ln_cache = layer_norm_fwd(x, params[f"{prefix}.ln.g"], params[f"{prefix}.ln.b"])
    q, qc = linear_fwd(normed, params[f"{prefix}.wq.w"], params[f"{prefix}.wq.b"])
    k, kc = linear_fwd(normed, params[f"{prefix}.wk.w"], params[f"{prefix}.wk.b"])
    v, vc = linear_fwd(normed, params[f"{prefix}.wv.w"], params[f"{prefix}.wv.b"])
    mixed, mha_cache = _mha_core_fwd(q, k, v, heads)
    out, oc = linear_fwd(mixed, params[f"{prefix}.wo.w"], params[f"{prefix}.wo.b"])
    return x + out, (ln_cache, qc, kc, vc, mha_cache, oc)


def self_attention_bwd(dy: np.ndarray, params: ParamSet, prefix: str, cache) -> np.ndarray:
    ln_cache, qc, kc, vc, mha_cache, oc = cache
    dmixed, dwo, dbo = linear_bwd(dy, oc)
    params.accumulate(f"{prefix}.wo.w", dwo)
    params.accumulate(f"{prefix}.wo.b", dbo)
    dq, dk, dv = _mha_core_bwd(dmixed, mha_cache)
    dnormed = np.zeros_like(dq)
    for d, c, name in ((dq, qc, "wq"), (dk, kc, "wk"), (dv, vc, "wv")):
        dn, dw, db = linear_bwd(d, c)
        dnormed += dn
        params.accumulate(f"{prefix}.{name}.w", dw)
        params.accumulate(f"{prefix}.{name}.b", db)
    dx, dg, db = layer_norm_bwd(dnormed, ln_cache)
    params.accumulate(f"{prefix}.ln.g", dg)
    params.accumulate(f"{prefix}.ln.b", db)
    return dy + dx


def cross_attention_fwd(x: np.ndarray, kv: np.ndarray, params: ParamSet, prefix: str, heads: int):
    normed, ln_cache = layer_norm_fwd(x, params[f"{prefix}.ln.g"], params[f"{prefix}.ln.b"])
    q, qc = linear_fwd(normed, params[f"{prefix}.wq.w"], params[f"{prefix}.wq.b"])
    k, kc = linear_fwd(kv, params[f"{prefix}.wk.w"], params[f"{prefix}.wk.b"])
    v, vc = linear_fwd(kv, params[f"{prefix}.wv.w"], params[f"{prefix}.wv.b"])
    mixed, mha_cache = _mha_core_fwd(q, k, v, heads)
    out, oc = linear_fwd(mixed, params[f"{prefix}.wo.w"], params[f"{prefix}.wo.b"])
    return x + out, (ln_cache, qc, kc, vc, mha_cache, oc)


def cross_attention_bwd(dy: np.ndarray, params: ParamSet, prefix: str, cache):
    """Returns (dx, dkv)."""
    ln_cache, qc, kc, vc, mha_cache, oc = cache
    dmixed, dwo, dbo = linear_bwd(dy, oc)
    params.accumulate(f"{prefix}.wo.w", dwo)
    params.accumulate(f"{prefix}.wo.b", dbo)
    dq, dk, dv = _mha_core_bwd(dmixed, mha_cache)
    dnormed, dwq, dbq = linear_bwd(dq, qc)
    params.accumulate(f"{prefix}.wq.w", dwq)
    params.accumulate(f"{prefix}.wq.b", dbq)
    dkv = np.zeros_like(kc[0])
    for d, c, name in ((dk, kc, "wk"), (dv, vc, "wv")):
        dn, dw, db = linear_bwd(d, c)
        dkv += dn
        params.accumulate(f"{prefix}.{name}.w", dw)
        params.accumulate(f"{prefix}.{name}.b", db)
    dx, dg, db = layer_norm_bwd(dnormed, ln_cache)
    params.accumulate(f"{prefix}.ln.g", dg)
    params.accumulate(f"{prefix}.ln.b", db)
    return dy + dx, dkv


def feed_forward_fwd(x: np.ndarray, params: ParamSet, prefix: str):
    normed, ln_cache = layer_norm_fwd(x, params[f"{prefix}.ln.g"], params[f"{prefix}.ln.b"])
    h, c1 = linear_fwd(normed, params[f"{prefix}.w1.w"], params[f"{prefix}.w1.b"])
    a, ac = gelu_fwd(h)
    out, c2 = linear_fwd(a, params[f"{prefix}.w2.w"], params[f"{prefix}.w2.b"])
    return x + out, (ln_cache, c1, ac, c2)


def feed_forward_bwd(dy: np.ndarray, params: ParamSet, prefix: str, cache) -> np.ndarray:
    ln_cache, c1, ac, c2 = cache
    da, dw2, db2 = linear_bwd(dy, c2)
    params.accumulate(f"{prefix}.w2.w", dw2)
    params.accumulate(f"{prefix}.w2.b", db2)
    dh = gelu_bwd(da, ac)
    dnormed, dw1, db1 = linear_bwd(dh, c1)
    params.accumulate(f"{prefix}.w1.w", dw1)
    params.accumulate(f"{prefix}.w1.b", db1)
    dx, dg, db = layer_norm_bwd(dnormed, ln_cache)
    params.accumulate(f"{prefix}.ln.g", dg)
    params.accumulate(f"{prefix}.ln.b", db)
    return dy + dx


def transformer_block_fwd(x: np.ndarray, params: ParamSet, prefix: str, heads: int):
    h, sa_cache = self_attention_fwd(x, params, f"{prefix}.sa", heads)
    y, ff_cache = feed_forward_fwd(h, params, f"{prefix}.ff")
    return y, (sa_cache, ff_cache)


def transformer_block_bwd(dy: np.ndarray, params: ParamSet, prefix: str, cache) -> np.ndarray:
    sa_cache, ff_cache = cache
    dh = feed_forward_bwd(dy, params, f"{prefix}.ff", ff_cache)
    return self_attention_bwd(dh, params, f"{prefix}.sa", sa_cache)


def transformer_block(x: np.ndarray, params: ParamSet, prefix: str = "block",
                      heads: int = 1) -> np.ndarray:
    """Pre-norm residual self-attention + feed-forward; shape preserved."""
    expected = params[f"{prefix}.sa.ln.g"].shape[1]
    if x.shape[1] != expected:
        raise DimensionError(f"transformer_block: input width {x.shape[1]} != block width {expected}")
    y, _ = transformer_block_fwd(x, params, prefix, heads)
    return y


# ---------------------------------------------------------------------------
# optimization and gradient certification
# ---------------------------------------------------------------------------

def adam_step(params: ParamSet, lr: float, betas: tuple[float, float] = (0.9, 0.999),
              step: int = 1, eps: float = 1e-8) -> ParamSet:
    """Bias-corrected Adam update in place; moments persist inside `params`."""
    b1, b2 = betas
    for name, value in params.values.items():
        g = params.grads[name]
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"NaN/Inf gradient for parameter '{name}'")
        m = params._adam_m.setdefault(name, np.zeros_like(value))
        v = params._adam_v.setdefault(name, np.zeros_like(value))
        m[...] = b1 * m + (1 - b1) * g
        v[...] = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** step)
        vhat = v / (1 - b2 ** step)
        value -= lr * mhat / (np.sqrt(vhat) + eps)
    return params


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    per_param: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def grad_check(loss_fn: Callable[[ParamSet], float], params: ParamSet,
               eps: float = 1e-4, tol: float = 1e-4,
               names: list[str] | None = None,
               denominator_floor: float = 1e-4) -> GradCheckReport:
    """Certify analytic gradients against central finite differences.

    `loss_fn` must be pure given the parameter values and is expected to
    populate `params.grads` as a side effect of evaluation. The relative
    error denominator is floored: directions whose true gradient is
    structurally zero (e.g. softmax-shift-invariant biases) measure pure
    cancellation noise under FD and are held to an absolute bar instead.
    """
    params.zero_grads()
    base = float(loss_fn(params))
    analytic = {name: params.grads[name].copy() for name in params.names()}
    params.zero_grads()
    again = float(loss_fn(params))
    if base != again:
        raise ContractError(f"loss_fn is not deterministic: {base!r} != {again!r}")

    report = GradCheckReport(0.0, tol)
    for name in (names if names is not None else params.names()):
        value = params.values[name]
        worst = 0.0
        it = np.nditer(value, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = value[idx]
            value[idx] = orig + eps
            up = float(loss_fn(params))
            value[idx] = orig - eps
            down = float(loss_fn(params))
            value[idx] = orig
            fd = (up - down) / (2 * eps)
            a = analytic[name][idx]
            rel = abs(a - fd) / max(abs(a), abs(fd), denominator_floor)
            worst = max(worst, rel)
        report.per_param[name] = worst
        report.max_rel_error = max(report.max_rel_error, worst)
    # restore analytic grads so callers can inspect them afterwards
    params.zero_grads()
    loss_fn(params)
    return report
