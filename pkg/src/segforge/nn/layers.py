"""Differentiable layers with analytic gradients.

All feature maps are channels-last: images are (N, H, W, C) and token
sequences are (N, T, C), so LayerNorm and Linear act on the last axis
for both. Convolutions run as one GEMM per kernel tap, which keeps
every hot loop inside BLAS without im2col buffers.

Each layer caches what its backward pass needs during forward; calling
backward twice (or before forward) raises. Gradients accumulate into
per-parameter buffers until zero_grad().
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from ..errors import ValidationError

_nan_check = False


def set_nan_check(enabled: bool) -> None:
    """Toggle finite-value assertions after every layer forward."""
    global _nan_check
    _nan_check = enabled


def _check_finite(layer: "Layer", arr: np.ndarray) -> None:
    if _nan_check and not np.isfinite(arr).all():
        raise FloatingPointError(f"non-finite values after {type(layer).__name__}")


class Layer:
    """Base layer: forward caches, backward consumes the cache once."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}
        self._cache = None

    def _add_param(self, name: str, value: np.ndarray) -> np.ndarray:
        value = np.ascontiguousarray(value, dtype=self.dtype)
        self._params[name] = value
        self._grads[name] = np.zeros_like(value)
        return value

    def _accumulate(self, name: str, grad: np.ndarray) -> None:
        self._grads[name] += grad.astype(self.dtype, copy=False)

    def _take_cache(self):
        if self._cache is None:
            raise RuntimeError(f"backward on {type(self).__name__} without a live forward tape")
        cache, self._cache = self._cache, None
        return cache

    def named_params(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in self._params.items():
            yield prefix + name, value

    def named_grads(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in self._grads.items():
            yield prefix + name, value

    def zero_grad(self) -> None:
        for g in self._grads.values():
            g[...] = 0

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Layer):
    def __init__(self, in_features, out_features, rng=None, std=None, dtype=np.float32):
        super().__init__(dtype)
        rng = rng if rng is not None else np.random.default_rng(0)
        std = std if std is not None else in_features**-0.5
        self._add_param("w", rng.normal(0.0, std, (in_features, out_features)))
        self._add_param("b", np.zeros(out_features))
        self.in_features = in_features
        self.out_features = out_features

    def forward(self, x):
        x = np.ascontiguousarray(x, dtype=self.dtype)
        if x.shape[-1] != self.in_features:
            raise ValidationError(
                f"Linear expects last axis {self.in_features}, got {x.shape}"
            )
        y = x.reshape(-1, self.in_features) @ self._params["w"] + self._params["b"]
        y = y.reshape(x.shape[:-1] + (self.out_features,))
        self._cache = x
        _check_finite(self, y)
        return y

    def backward(self, grad):
        x = self._take_cache()
        g2 = grad.reshape(-1, self.out_features).astype(self.dtype, copy=False)
        x2 = x.reshape(-1, self.in_features)
        self._accumulate("w", x2.T @ g2)
        self._accumulate("b", g2.sum(axis=0))
        gx = g2 @ self._params["w"].T
        return gx.reshape(x.shape)


class Conv2d(Layer):
    """3x3-style convolution on (N, H, W, C) maps, one GEMM per tap."""

    def __init__(
        self, in_ch, out_ch, kernel, stride=1, pad=0, rng=None, std=None,
        dtype=np.float32, input_grad=True,
    ):
        super().__init__(dtype)
        rng = rng if rng is not None else np.random.default_rng(0)
        std = std if std is not None else (kernel * kernel * in_ch) ** -0.5
        self._add_param("w", rng.normal(0.0, std, (kernel, kernel, in_ch, out_ch)))
        self._add_param("b", np.zeros(out_ch))
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.stride, self.pad = kernel, stride, pad
        self.input_grad = input_grad  # first layers can skip grad w.r.t. data

    def _out_hw(self, h, w):
        k, s, p = self.kernel, self.stride, self.pad
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def forward(self, x):
        x = np.ascontiguousarray(x, dtype=self.dtype)
        if x.ndim != 4 or x.shape[-1] != self.in_ch:
            raise ValidationError(f"Conv2d expects (N,H,W,{self.in_ch}), got {x.shape}")
        n, h, w, _ = x.shape
        k, s, p = self.kernel, self.stride, self.pad
        ho, wo = self._out_hw(h, w)
        if ho < 1 or wo < 1:
            raise ValidationError(f"Conv2d output would be empty for input {x.shape}")
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
        # im2col: one (N*Ho*Wo, k*k*Cin) GEMM against the flattened kernel
        windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
        windows = windows[:, ::s, ::s]  # (N, Ho, Wo, Cin, k, k)
        cols = np.ascontiguousarray(windows.transpose(0, 1, 2, 4, 5, 3)).reshape(
            n * ho * wo, k * k * self.in_ch
        )
        w_mat = self._params["w"].reshape(k * k * self.in_ch, self.out_ch)
        out = (cols @ w_mat + self._params["b"]).reshape(n, ho, wo, self.out_ch)
        self._cache = (cols, x.shape)
        _check_finite(self, out)
        return out

    def backward(self, grad):
        cols, x_shape = self._take_cache()
        n, h, w, _ = x_shape
        k, s, p = self.kernel, self.stride, self.pad
        ho, wo = self._out_hw(h, w)
        g2 = np.ascontiguousarray(grad, dtype=self.dtype).reshape(-1, self.out_ch)
        self._accumulate("b", g2.sum(axis=0))
        self._accumulate("w", (cols.T @ g2).reshape(self._params["w"].shape))
        if not self.input_grad:
            return None
        weight = self._params["w"]
        gxp = np.zeros((n, h + 2 * p, w + 2 * p, self.in_ch), dtype=self.dtype)
        # scatter per kernel tap: strided slices of gxp never overlap for fixed (a,b)
        for a in range(k):
            for b in range(k):
                gxp[:, a : a + s * ho : s, b : b + s * wo : s, :] += (
                    g2 @ weight[a, b].T
                ).reshape(n, ho, wo, self.in_ch)
        gx = gxp[:, p : p + h, p : p + w, :] if p else gxp
        return np.ascontiguousarray(gx)


class TransposeConv2d(Layer):
    """Non-overlapping learned upsampling: kernel == stride."""

    def __init__(self, in_ch, out_ch, kernel=2, rng=None, std=None, dtype=np.float32):
        super().__init__(dtype)
        rng = rng if rng is not None else np.random.default_rng(0)
        std = std if std is not None else in_ch**-0.5
        self._add_param("w", rng.normal(0.0, std, (kernel, kernel, in_ch, out_ch)))
        self._add_param("b", np.zeros(out_ch))
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel

    def _w_mat(self):
        # (k, k, Cin, Cout) -> (Cin, k*k*Cout)
        k = self.kernel
        return np.ascontiguousarray(self._params["w"].transpose(2, 0, 1, 3)).reshape(
            self.in_ch, k * k * self.out_ch
        )

    def forward(self, x):
        x = np.ascontiguousarray(x, dtype=self.dtype)
        if x.ndim != 4 or x.shape[-1] != self.in_ch:
            raise ValidationError(f"TransposeConv2d expects (N,H,W,{self.in_ch}), got {x.shape}")
        n, h, w, _ = x.shape
        k = self.kernel
        x2 = x.reshape(-1, self.in_ch)
        cells = (x2 @ self._w_mat()).reshape(n, h, w, k, k, self.out_ch)
        cells += self._params["b"]
        out = np.ascontiguousarray(cells.transpose(0, 1, 3, 2, 4, 5)).reshape(
            n, h * k, w * k, self.out_ch
        )
        self._cache = x
        _check_finite(self, out)
        return out

    def backward(self, grad):
        x = self._take_cache()
        n, h, w, _ = x.shape
        k = self.kernel
        grad = np.ascontiguousarray(grad, dtype=self.dtype)
        g_cells = np.ascontiguousarray(
            grad.reshape(n, h, k, w, k, self.out_ch).transpose(0, 1, 3, 2, 4, 5)
        ).reshape(n * h * w, k * k * self.out_ch)
        x2 = x.reshape(-1, self.in_ch)
        gw = (x2.T @ g_cells).reshape(self.in_ch, k, k, self.out_ch).transpose(1, 2, 0, 3)
        self._accumulate("w", gw)
        self._accumulate("b", grad.reshape(-1, self.out_ch).sum(axis=0))
        gx2 = g_cells @ self._w_mat().T
        return gx2.reshape(x.shape)


class LayerNorm(Layer):
    """Normalize the last axis to zero mean, unit variance, then affine."""

    def __init__(self, dim, eps=1e-6, dtype=np.float32):
        super().__init__(dtype)
        self._add_param("gain", np.ones(dim))
        self._add_param("bias", np.zeros(dim))
        self.dim = dim
        self.eps = self.dtype.type(eps)

    def forward(self, x):
        x = np.ascontiguousarray(x, dtype=self.dtype)
        if x.shape[-1] != self.dim:
            raise ValidationError(f"LayerNorm expects last axis {self.dim}, got {x.shape}")
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xn = xc * inv
        y = xn * self._params["gain"] + self._params["bias"]
        self._cache = (xn, inv)
        _check_finite(self, y)
        return y

    def backward(self, grad):
        xn, inv = self._take_cache()
        grad = grad.astype(self.dtype, copy=False)
        flat_g = grad.reshape(-1, self.dim)
        flat_xn = xn.reshape(-1, self.dim)
        self._accumulate("gain", (flat_g * flat_xn).sum(axis=0))
        self._accumulate("bias", flat_g.sum(axis=0))
        gxn = grad * self._params["gain"]
        m1 = gxn.mean(axis=-1, keepdims=True)
        m2 = (gxn * xn).mean(axis=-1, keepdims=True)
        return (gxn - m1 - xn * m2) * inv


class GELU(Layer):
    """tanh-approximate GELU."""

    _C = math.sqrt(2.0 / math.pi)

    def forward(self, x):
        x = np.ascontiguousarray(x, dtype=self.dtype)
        c = self.dtype.type(self._C)
        a = self.dtype.type(0.044715)
        inner = c * (x + a * x * x * x)
        t = np.tanh(inner)
        y = 0.5 * x * (1.0 + t)
        self._cache = (x, t)
        _check_finite(self, y)
        return y

    def backward(self, grad):
        x, t = self._take_cache()
        c = self.dtype.type(self._C)
        a = self.dtype.type(0.044715)
        dinner = c * (1.0 + 3.0 * a * x * x)
        dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        return grad * dy.astype(self.dtype, copy=False)


class ReLU(Layer):
    def forward(self, x):
        x = np.ascontiguousarray(x, dtype=self.dtype)
        y = np.maximum(x, 0)
        self._cache = x > 0
        _check_finite(self, y)
        return y

    def backward(self, grad):
        pos = self._take_cache()
        return grad * pos


class Sigmoid(Layer):
    def forward(self, x):
        x = np.ascontiguousarray(x, dtype=self.dtype)
        y = sigmoid(x)
        self._cache = y
        _check_finite(self, y)
        return y

    def backward(self, grad):
        y = self._take_cache()
        return grad * y * (1.0 - y)


class Softmax(Layer):
    def __init__(self, axis=-1, dtype=np.float32):
        super().__init__(dtype)
        self.axis = axis

    def forward(self, x):
        x = np.ascontiguousarray(x, dtype=self.dtype)
        y = softmax(x, axis=self.axis)
        self._cache = y
        _check_finite(self, y)
        return y

    def backward(self, grad):
        y = self._take_cache()
        inner = (grad * y).sum(axis=self.axis, keepdims=True)
        return y * (grad - inner)


class Attention(Layer):
    """Multi-head scaled dot-product attention over (N, T, C) sequences.

    forward(q_in, kv_in) attends queries to keys/values projected from
    the same source; backward returns (grad_q_in, grad_kv_in).
    """

    def __init__(self, dim, heads, rng=None, std=None, dtype=np.float32):
        super().__init__(dtype)
        if dim % heads:
            raise ValidationError(f"dim {dim} not divisible by heads {heads}")
        rng = rng if rng is not None else np.random.default_rng(0)
        std = std if std is not None else dim**-0.5
        for name in ("wq", "wk", "wv", "wo"):
            self._add_param(name, rng.normal(0.0, std, (dim, dim)))
        for name in ("bq", "bk", "bv", "bo"):
            self._add_param(name, np.zeros(dim))
        self.dim, self.heads = dim, heads
        self.head_dim = dim // heads
        self.scale = self.dtype.type(1.0 / math.sqrt(self.head_dim))

    def forward(self, q_in, kv_in):
        q_in = np.ascontiguousarray(q_in, dtype=self.dtype)
        kv_in = np.ascontiguousarray(kv_in, dtype=self.dtype)
        if q_in.shape[-1] != self.dim or kv_in.shape[-1] != self.dim:
            raise ValidationError(
                f"Attention expects feature dim {self.dim}, got {q_in.shape} / {kv_in.shape}"
            )
        p = self._params
        n, tq, _ = q_in.shape
        tk = kv_in.shape[1]
        h, d = self.heads, self.head_dim
        # heads-first layout (N, h, T, d) so score/context products hit BLAS
        q = (q_in @ p["wq"] + p["bq"]).reshape(n, tq, h, d).transpose(0, 2, 1, 3)
        k = (kv_in @ p["wk"] + p["bk"]).reshape(n, tk, h, d).transpose(0, 2, 1, 3)
        v = (kv_in @ p["wv"] + p["bv"]).reshape(n, tk, h, d).transpose(0, 2, 1, 3)
        att = (q @ k.transpose(0, 1, 3, 2)) * self.scale
        probs = softmax(att, axis=-1)
        ctx = np.ascontiguousarray((probs @ v).transpose(0, 2, 1, 3)).reshape(n, tq, self.dim)
        out = ctx @ p["wo"] + p["bo"]
        self._cache = (q_in, kv_in, q, k, v, probs, ctx)
        _check_finite(self, out)
        return out

    def backward(self, grad):
        q_in, kv_in, q, k, v, probs, ctx = self._take_cache()
        grad = np.ascontiguousarray(grad, dtype=self.dtype)
        p = self._params
        n, tq, _ = q_in.shape
        h, d = self.heads, self.head_dim
        g2 = grad.reshape(-1, self.dim)
        self._accumulate("wo", ctx.reshape(-1, self.dim).T @ g2)
        self._accumulate("bo", g2.sum(axis=0))
        g_ctx = (grad @ p["wo"].T).reshape(n, tq, h, d).transpose(0, 2, 1, 3)
        g_probs = g_ctx @ v.transpose(0, 1, 3, 2)
        g_v = probs.transpose(0, 1, 3, 2) @ g_ctx
        inner = (g_probs * probs).sum(axis=-1, keepdims=True)
        g_att = probs * (g_probs - inner) * self.scale
        g_q = g_att @ k
        g_k = g_att.transpose(0, 1, 3, 2) @ q

        def unproject(g_heads, w_name, b_name, src):
            g_flat = np.ascontiguousarray(g_heads.transpose(0, 2, 1, 3)).reshape(-1, self.dim)
            self._accumulate(w_name, src.reshape(-1, self.dim).T @ g_flat)
            self._accumulate(b_name, g_flat.sum(axis=0))
            return g_flat @ p[w_name].T

        g_q_in = unproject(g_q, "wq", "bq", q_in).reshape(q_in.shape)
        g_kv = unproject(g_k, "wk", "bk", kv_in).reshape(kv_in.shape)
        g_kv += unproject(g_v, "wv", "bv", kv_in).reshape(kv_in.shape)
        return g_q_in, g_kv


class SelfAttention(Attention):
    def forward(self, x):
        return super().forward(x, x)

    def backward(self, grad):
        g_q, g_kv = super().backward(grad)
        return g_q + g_kv


class Sequential(Layer):
    def __init__(self, *layers: Layer):
        super().__init__(layers[0].dtype if layers else np.float32)
        self.layers = list(layers)

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            try:
                x = layer.forward(x)
            except ValidationError as e:
                raise ValidationError(f"layer {i} ({type(layer).__name__}): {e}") from e
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def named_params(self, prefix=""):
        for i, layer in enumerate(self.layers):
            yield from layer.named_params(f"{prefix}{i}.")

    def named_grads(self, prefix=""):
        for i, layer in enumerate(self.layers):
            yield from layer.named_grads(f"{prefix}{i}.")

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()


class Residual(Layer):
    def __init__(self, inner: Layer):
        super().__init__(inner.dtype)
        self.inner = inner

    def forward(self, x):
        return x + self.inner.forward(x)

    def backward(self, grad):
        return grad + self.inner.backward(grad)

    def named_params(self, prefix=""):
        yield from self.inner.named_params(prefix + "inner.")

    def named_grads(self, prefix=""):
        yield from self.inner.named_grads(prefix + "inner.")

    def zero_grad(self):
        self.inner.zero_grad()


def MLP(dim, hidden, rng, dtype=np.float32) -> Sequential:
    return Sequential(
        Linear(dim, hidden, rng=rng, dtype=dtype),
        GELU(dtype=dtype),
        Linear(hidden, dim, rng=rng, dtype=dtype),
    )


def TransformerBlock(dim, heads, rng, mlp_ratio=2, dtype=np.float32) -> Sequential:
    """Pre-norm block: x + attn(ln(x)); x + mlp(ln(x))."""
    return Sequential(
        Residual(Sequential(LayerNorm(dim, dtype=dtype), SelfAttention(dim, heads, rng=rng, dtype=dtype))),
        Residual(Sequential(LayerNorm(dim, dtype=dtype), MLP(dim, dim * mlp_ratio, rng, dtype=dtype))),
    )


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function, preserving dtype."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(x: np.ndarray, axis=-1) -> np.ndarray:
    out = x - x.max(axis=axis, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=axis, keepdims=True)
    return out
