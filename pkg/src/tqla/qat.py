"""Quantization-aware training primitives.

A ``QuantLinearLayer`` keeps full-precision shadow weights that accumulate
gradient updates while every forward pass requantizes them fresh. Each
scheme has an explicit closed-form backward rule; there is no autograd.

Forward rules (x is (batch, cols), weights are (rows, cols)):

  ternary   y = x @ (codes * alpha).T
  minima    y += eps * sign(x) @ (sign(w) * dead).T
  tequila   y += lam * (deadzone row sums), broadcast over the batch
  lsq       ternary with a learnable per-group alpha (threshold frozen)
  dlt       ternary with learnable alpha plus a learnable x-coupled bias b
  seq       dead positions evaluate as alpha * b instead of zero

Backward rules mirror the forwards with the quantizer treated straight
through: outside the deadzone the upstream gradient is scaled by the group
alpha, inside it passes unscaled (plain STE), and the reactivation schemes
replace or augment the deadzone branch as documented on each function.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CacheError, GradientError, InvalidParam, InvalidShape, UnsupportedScheme
from .quantizer import (
    Granularity,
    GroupLayout,
    QuantizedTensor,
    DeadzoneMask,
    _as_matrix,
    _ternarize_elementwise,
    deadzone_mask,
    dequantize,
    quantize,
    tequila_bias,
)

SCHEMES = ("absmean", "twn", "lsq", "seq", "dlt", "minima", "tequila", "tequila-nomix")

DEFAULT_LAMBDA = 1e-3
DEFAULT_EPSILON = 1e-3
DEFAULT_LEARNING_RATE = 1e-4


@dataclass
class ForwardCache:
    """Everything a backward pass needs, captured at forward time.

    Stored exactly once per recorded forward and consumed exactly once by
    the matching backward; a second consume raises ``CacheError``.
    """

    x: np.ndarray
    quantized: QuantizedTensor
    mask: DeadzoneMask
    bias: np.ndarray | None
    scheme: str
    lam: float
    epsilon: float
    learnable_b: np.ndarray | None = None
    consumed: bool = False


def _consume(cache: ForwardCache) -> ForwardCache:
    if cache is None:
        raise CacheError("backward called without a recorded forward")
    if cache.consumed:
        raise CacheError("forward cache already consumed")
    cache.consumed = True
    return cache


@dataclass
class QuantLinearLayer:
    """A linear layer trained with quantization-aware updates.

    ``shadow_weights`` stay full precision; the ternary view is rebuilt from
    them at every forward. Scheme-specific learnable parameter slots are
    populated only for the schemes that use them.
    """

    shadow_weights: np.ndarray
    scheme: str
    granularity: Granularity
    lam: float = DEFAULT_LAMBDA
    epsilon: float = DEFAULT_EPSILON
    learnable_alpha: np.ndarray | None = None
    learnable_b: np.ndarray | None = None
    frozen_thresholds: np.ndarray | None = None
    _cache: ForwardCache | None = field(default=None, repr=False)

    @classmethod
    def create(cls, weights, scheme, granularity, *, lam=DEFAULT_LAMBDA, epsilon=DEFAULT_EPSILON):
        if scheme not in SCHEMES:
            raise UnsupportedScheme(f"unknown scheme {scheme!r}; known: {SCHEMES}")
        w = _as_matrix(weights).copy()
        lam = float(lam)
        epsilon = float(epsilon)
        if not np.isfinite(lam):
            raise InvalidParam(f"lambda must be finite, got {lam}")
        if not np.isfinite(epsilon) or epsilon < 0:
            raise InvalidParam(f"epsilon must be finite and >= 0, got {epsilon}")
        layer = cls(
            shadow_weights=w, scheme=scheme, granularity=granularity, lam=lam, epsilon=epsilon
        )
        if scheme in ("lsq", "dlt"):
            # alpha becomes learnable; the threshold keeps its initial estimate
            q0 = quantize(w, "absmean", granularity)
            layer.learnable_alpha = q0.scales.copy()
            layer.frozen_thresholds = q0.thresholds.copy()
        if scheme in ("dlt", "seq"):
            n_groups = GroupLayout(granularity, *w.shape).n_groups
            layer.learnable_b = np.zeros(n_groups)
        return layer

    @property
    def rows(self) -> int:
        return self.shadow_weights.shape[0]

    @property
    def cols(self) -> int:
        return self.shadow_weights.shape[1]

    def layout(self) -> GroupLayout:
        return GroupLayout(self.granularity, self.rows, self.cols)

    def params(self) -> dict[str, np.ndarray]:
        out = {"w": self.shadow_weights}
        if self.learnable_alpha is not None:
            out["alpha"] = self.learnable_alpha
        if self.learnable_b is not None:
            out["b"] = self.learnable_b
        return out

    def forward(self, x, record: bool = True) -> np.ndarray:
        op = _FORWARDS[self.scheme]
        if record:
            return op(x, self)
        saved = self._cache
        try:
            return op(x, self)
        finally:
            self._cache = saved

    def backward(self, g) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        """Consume the cache; returns (grad wrt input, grads per parameter)."""
        cache = self._cache
        g = np.asarray(g, dtype=np.float64)
        if self.scheme in ("lsq", "dlt", "seq"):
            grad_w, grad_alpha, grad_b = backward_learnable(g, cache, self.scheme)
        elif self.scheme == "minima":
            grad_w, grad_alpha, grad_b = backward_minima(g, cache), None, None
        elif self.scheme in ("tequila", "tequila-nomix"):
            grad_w, grad_alpha, grad_b = backward_tequila(g, cache), None, None
        else:
            grad_w, grad_alpha, grad_b = backward_ste(g, cache), None, None
        grad_x = g @ dequantize(cache.quantized)
        if self.scheme == "dlt":
            grad_x = grad_x + g @ cache.quantized.layout().expand(cache.learnable_b)
        elif self.scheme == "seq":
            layout = cache.quantized.layout()
            coupling = (
                cache.quantized.element_scales()
                * layout.expand(cache.learnable_b)
                * cache.mask.mask
            )
            grad_x = grad_x + g @ coupling
        grads = {"w": grad_w}
        if grad_alpha is not None:
            grads["alpha"] = grad_alpha
        if grad_b is not None:
            grads["b"] = grad_b
        self._cache = None
        return grad_x, grads


def _as_batch(x, cols: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.ndim != 2 or x.shape[1] != cols:
        raise InvalidShape(f"input shape {x.shape} does not match layer cols {cols}")
    return x


def _fresh_quantized(layer: QuantLinearLayer) -> QuantizedTensor:
    """Requantize the shadow weights as of now, per the layer's scheme."""
    if layer.scheme == "twn":
        return quantize(layer.shadow_weights, "twn", layer.granularity)
    if layer.scheme in ("lsq", "dlt"):
        layout = layer.layout()
        codes = _ternarize_elementwise(
            layer.shadow_weights, layout.expand(layer.frozen_thresholds)
        )
        # degenerate-group rule: a zero scale forces zero codes
        degenerate = layout.expand(layer.learnable_alpha) == 0.0
        if degenerate.any():
            codes = np.where(degenerate, np.int8(0), codes)
        return QuantizedTensor(
            codes=codes,
            scales=layer.learnable_alpha.copy(),
            thresholds=layer.frozen_thresholds.copy(),
            granularity=layer.granularity,
        )
    return quantize(layer.shadow_weights, "absmean", layer.granularity)


def _linear(x: np.ndarray, q: QuantizedTensor) -> np.ndarray:
    return x @ dequantize(q).T


def _record(layer, x, q, mask, bias=None) -> ForwardCache:
    cache = ForwardCache(
        x=x,
        quantized=q,
        mask=mask,
        bias=bias,
        scheme=layer.scheme,
        lam=layer.lam,
        epsilon=layer.epsilon,
        learnable_b=None if layer.learnable_b is None else layer.learnable_b.copy(),
    )
    layer._cache = cache
    return cache


def forward_ternary(x, layer: QuantLinearLayer) -> np.ndarray:
    """Plain ternary forward: y = x @ (codes * alpha).T."""
    x = _as_batch(x, layer.cols)
    q = _fresh_quantized(layer)
    mask = deadzone_mask(layer.shadow_weights, q)
    _record(layer, x, q, mask)
    return _linear(x, q)


def forward_minima(x, layer: QuantLinearLayer) -> np.ndarray:
    """Ternary forward plus signed-minima contributions from dead weights.

    Each dead weight contributes eps * sign(x_j) * sign(w_rj); sign(0) = 0.
    With eps == 0 no weight is reactivated and the layer takes the plain
    ternary path (forward and backward).
    """
    if layer.epsilon == 0.0:
        return forward_ternary(x, layer)
    x = _as_batch(x, layer.cols)
    q = _fresh_quantized(layer)
    mask = deadzone_mask(layer.shadow_weights, q)
    _record(layer, x, q, mask)
    dead_signs = np.sign(layer.shadow_weights) * mask.mask
    return _linear(x, q) + layer.epsilon * (np.sign(x) @ dead_signs.T)


def forward_tequila(x, layer: QuantLinearLayer) -> np.ndarray:
    """Ternary forward plus the per-row deadzone bias lam * sum of dead weights.

    The bias is recomputed from the current shadow weights on every forward;
    it is frozen only when a model is packed for inference.
    """
    x = _as_batch(x, layer.cols)
    q = _fresh_quantized(layer)
    mask = deadzone_mask(layer.shadow_weights, q)
    bias = tequila_bias(layer.shadow_weights, mask, layer.lam)
    _record(layer, x, q, mask, bias=bias)
    return _linear(x, q) + bias


def forward_lsq(x, layer: QuantLinearLayer) -> np.ndarray:
    """Ternary forward with the learnable per-group alpha."""
    return forward_ternary(x, layer)


def forward_dlt(x, layer: QuantLinearLayer) -> np.ndarray:
    """Learnable-bias forward: y = x @ (codes * alpha).T + x @ b_elem.T."""
    x = _as_batch(x, layer.cols)
    q = _fresh_quantized(layer)
    mask = deadzone_mask(layer.shadow_weights, q)
    _record(layer, x, q, mask)
    b_elem = q.layout().expand(layer.learnable_b)
    return _linear(x, q) + x @ b_elem.T


def forward_seq(x, layer: QuantLinearLayer) -> np.ndarray:
    """Zero-point forward: dead positions evaluate as alpha_g * b_g."""
    x = _as_batch(x, layer.cols)
    q = _fresh_quantized(layer)
    mask = deadzone_mask(layer.shadow_weights, q)
    _record(layer, x, q, mask)
    coupling = q.element_scales() * q.layout().expand(layer.learnable_b) * mask.mask
    return _linear(x, q) + x @ coupling.T


def backward_ste(g, cache: ForwardCache) -> np.ndarray:
    """Straight-through gradient for the shadow weights.

    grad[r][j] = sum_b g[b][r] * x[b][j], scaled by the group alpha outside
    the deadzone and passed through unscaled inside it.
    """
    cache = _consume(cache)
    e = g.T @ cache.x
    alpha_elem = cache.quantized.element_scales()
    return np.where(cache.mask.mask, e, e * alpha_elem)


def backward_minima(g, cache: ForwardCache) -> np.ndarray:
    """Dead weights receive eps * sum_b sign(x) * g; live weights follow STE."""
    if cache is not None and cache.epsilon == 0.0:
        return backward_ste(g, cache)
    cache = _consume(cache)
    e = g.T @ cache.x
    s = g.T @ np.sign(cache.x)
    alpha_elem = cache.quantized.element_scales()
    return np.where(cache.mask.mask, cache.epsilon * s, e * alpha_elem)


def backward_tequila(g, cache: ForwardCache) -> np.ndarray:
    """Mixed gradients: dead weights get the STE term plus the bias-path term.

    Dead: grad[r][j] = sum_b g[b][r] * x[b][j] + lam * sum_b g[b][r].
    Live: plain STE with the group alpha. The "tequila-nomix" variant drops
    the STE term and keeps only the bias path for dead weights.
    """
    cache = _consume(cache)
    e = g.T @ cache.x
    alpha_elem = cache.quantized.element_scales()
    g_row = g.sum(axis=0)
    bias_path = cache.lam * g_row[:, None]
    if cache.scheme == "tequila-nomix":
        return np.where(cache.mask.mask, bias_path, e * alpha_elem)
    return np.where(cache.mask.mask, e, e * alpha_elem) + np.where(
        cache.mask.mask, bias_path, 0.0
    )


def backward_learnable(g, cache: ForwardCache, scheme: str):
    """Gradients for schemes with learnable alpha / b.

    The shadow-weight gradient is plain STE. grad_alpha and grad_b are the
    exact partials of the forward with codes and deadzone membership frozen:

      lsq/dlt  d y / d alpha_g = sum over group of code * x
      dlt      d y / d b_g     = sum over group of x
      seq      d y / d b_g     = alpha_g * sum over dead group positions of x
    """
    if scheme not in ("lsq", "dlt", "seq"):
        raise UnsupportedScheme(f"backward_learnable does not handle {scheme!r}")
    cache = _consume(cache)
    e = g.T @ cache.x
    alpha_elem = cache.quantized.element_scales()
    grad_w = np.where(cache.mask.mask, e, e * alpha_elem)
    layout = cache.quantized.layout()
    grad_alpha = None
    grad_b = None
    if scheme in ("lsq", "dlt"):
        grad_alpha = layout.reduce_sum(e * cache.quantized.codes)
    if scheme == "dlt":
        grad_b = layout.reduce_sum(e)
    elif scheme == "seq":
        grad_b = cache.quantized.scales * layout.reduce_sum(e * cache.mask.mask)
    return grad_w, grad_alpha, grad_b


_FORWARDS = {
    "absmean": forward_ternary,
    "twn": forward_ternary,
    "lsq": forward_lsq,
    "dlt": forward_dlt,
    "seq": forward_seq,
    "minima": forward_minima,
    "tequila": forward_tequila,
    "tequila-nomix": forward_tequila,
}


@dataclass
class OptimizerState:
    """Adaptive-moment optimizer state with a fixed learning rate."""

    learning_rate: float = DEFAULT_LEARNING_RATE
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(params: dict, grads: dict, state: OptimizerState) -> dict:
    """One adaptive-moment update, in place on the parameter arrays.

    All gradients are checked before any state mutation; a non-finite
    gradient aborts the step with ``GradientError`` and leaves parameters
    and moments untouched.
    """
    for key, grad in grads.items():
        if key not in params:
            raise InvalidShape(f"gradient for unknown parameter {key!r}")
        if np.shape(grad) != np.shape(params[key]):
            raise InvalidShape(
                f"gradient shape {np.shape(grad)} != parameter shape {np.shape(params[key])}"
            )
        if not np.isfinite(grad).all():
            raise GradientError(f"non-finite gradient for parameter {key!r}")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for key, p in params.items():
        g = np.asarray(grads[key], dtype=np.float64)
        m = state.m.get(key)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        else:
            v = state.v[key]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[key] = m
        state.v[key] = v
        p -= state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params
