"""Network building blocks on top of the autodiff tensor engine."""
from __future__ import annotations

import numpy as np

from . import tensor as T


class Module:
    """Minimal parameter container; attribute order fixes parameter order."""

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_parameters(self, prefix=""):
        out = []
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, T.Tensor) and value.requires_grad:
                out.append((name, value))
            elif isinstance(value, Module):
                out.extend(value.named_parameters(prefix=name + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(prefix=f"{name}.{i}."))
                    elif isinstance(item, T.Tensor) and item.requires_grad:
                        out.append((f"{name}.{i}", item))
        return out

    def parameter_count(self):
        return sum(p.size for p in self.parameters())


def xavier_uniform(rng, fan_in, fan_out, shape):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, n_in, n_out, rng, bias=True):
        self.weight = T.parameter(xavier_uniform(rng, n_in, n_out, (n_in, n_out)))
        if bias:
            self.bias = T.parameter(np.zeros(n_out))
        else:
            self.bias = None

    def __call__(self, x):
        out = T.matmul(x, self.weight)
        return T.add(out, self.bias) if self.bias is not None else out


class MLP(Module):
    """Stack of Linear layers with tanh between them (none after the last)."""

    def __init__(self, sizes, rng):
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]

    def __call__(self, x):
        for layer in self.layers[:-1]:
            x = T.tanh(layer(x))
        return self.layers[-1](x)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.gain = T.parameter(np.ones(dim))
        self.shift = T.parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x):
        mu = T.mean(x, axis=-1, keepdims=True)
        centered = T.sub(x, mu)
        var = T.mean(T.square(centered), axis=-1, keepdims=True)
        normed = T.div(centered, T.sqrt(T.add(var, self.eps)))
        return T.add(T.mul(normed, self.gain), self.shift)


class MultiHeadAttention(Module):
    """Scaled dot-product self-attention over (batch, tokens, dim)."""

    def __init__(self, dim, heads, rng):
        if dim % heads:
            raise T.ShapeError("multi_head_attention", (dim,), (heads,))
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = Linear(dim, dim, rng)
        # a key bias shifts every score in a head equally; softmax ignores it
        self.wk = Linear(dim, dim, rng, bias=False)
        self.wv = Linear(dim, dim, rng)
        self.wo = Linear(dim, dim, rng)

    def __call__(self, x, dropout_p=0.0, rng=None, train=False):
        b, t, d = x.shape

        def split(h):
            return T.transpose(T.reshape(h, (b, t, self.heads, self.head_dim)), (0, 2, 1, 3))

        q, k, v = split(self.wq(x)), split(self.wk(x)), split(self.wv(x))
        scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(self.head_dim))
        attn = T.softmax(scores, axis=-1)
        attn = T.dropout(attn, dropout_p, rng, train)
        mixed = T.matmul(attn, v)
        merged = T.reshape(T.transpose(mixed, (0, 2, 1, 3)), (b, t, d))
        return self.wo(merged)


class TransformerLayer(Module):
    """Pre-layer-norm encoder block: attention then feedforward, residual both."""

    def __init__(self, dim, heads, ff_dim, dropout_p, rng):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.ff1 = Linear(dim, ff_dim, rng)
        self.ff2 = Linear(ff_dim, dim, rng)
        self.dropout_p = dropout_p

    def __call__(self, x, rng=None, train=False):
        a = self.attn(self.norm1(x), self.dropout_p, rng, train)
        x = T.add(x, T.dropout(a, self.dropout_p, rng, train))
        f = self.ff2(T.gelu(self.ff1(self.norm2(x))))
        return T.add(x, T.dropout(f, self.dropout_p, rng, train))


class Conv2d(Module):
    """3x3 stride-1 convolution with per-axis padding mode."""

    def __init__(self, c_in, c_out, rng, kernel=3, mode_h="wrap", mode_w="constant"):
        fan_in = c_in * kernel * kernel
        fan_out = c_out * kernel * kernel
        self.weight = T.parameter(xavier_uniform(rng, fan_in, fan_out, (c_out, c_in, kernel, kernel)))
        self.bias = T.parameter(np.zeros(c_out))
        self.pad = kernel // 2
        self.mode_h = mode_h
        self.mode_w = mode_w

    def __call__(self, x):
        padded = T.pad2d(x, self.pad, self.pad, mode_h=self.mode_h, mode_w=self.mode_w)
        out = T.conv2d(padded, self.weight)
        return T.add(out, T.reshape(self.bias, (1, -1, 1, 1)))
