"""Small module system and the attention kernel shared by all blocks.

Parameters are plain autodiff Tensors with requires_grad=True, initialized
uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) from an explicit Generator so model
construction is a pure function of the seed.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeMismatch


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    t = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)
    return t


class Module:
    """Base with recursive parameter discovery (attribute insertion order)."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[path] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(prefix=f"{path}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(prefix=f"{path}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def set_training(self, flag: bool):
        for value in vars(self).values():
            if isinstance(value, Module):
                value.set_training(flag)
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        item.set_training(flag)
        if hasattr(self, "training"):
            self.training = flag
        return self


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True):
        self.weight = uniform_init(rng, (in_dim, out_dim), in_dim)
        self.bias = uniform_init(rng, (out_dim,), in_dim) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ad.affine(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm_affine(x, self.gamma, self.beta, self.eps)


class Dropout(Module):
    """Seeded inverted dropout; a no-op unless training mode is on."""

    def __init__(self, rate: float, rng: np.random.Generator):
        self.rate = rate
        self.rng = rng
        self.training = False

    def __call__(self, x: Tensor) -> Tensor:
        if not self.training or self.rate <= 0.0:
            return x
        keep = 1.0 - self.rate
        mask = (self.rng.random(x.data.shape) < keep) / keep
        return ad.mul(x, Tensor(mask))


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, heads: int):
    """Multi-head scaled dot-product attention on already-projected inputs.

    q is (Lq, C), k and v are (Lk, C); C must divide evenly into `heads`.
    Returns (context (Lq, C), weights (heads, Lq, Lk)).
    """
    lq, c = q.data.shape
    lk, ck = k.data.shape
    if ck != c or v.data.shape != (lk, c):
        raise ShapeMismatch(f"attention: q {q.data.shape}, k {k.data.shape}, v {v.data.shape} disagree")
    if c % heads != 0:
        raise ShapeMismatch(f"attention: width {c} not divisible by {heads} heads")
    d = c // heads
    qh = ad.split_heads(q, heads)
    kh = ad.split_heads(k, heads)
    vh = ad.split_heads(v, heads)
    scores = ad.mul(ad.matmul(qh, ad.transpose(kh, (0, 2, 1))), 1.0 / np.sqrt(d))
    weights = ad.softmax(scores, axis=-1)
    ctx = ad.merge_heads(ad.matmul(weights, vh))
    return ctx, weights


class CrossAttention(Module):
    """Standard multi-head attention with its projections.

    Query/key/value projections never carry biases so that zero inputs map to
    exactly-zero keys and values; the output projection bias is optional
    (disabled where a zero-value stream must pass a residual through
    unchanged). `last_weights` and `last_kv_probe` are refreshed every call
    for inspection.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, out_bias: bool = True):
        if dim % heads != 0:
            raise ShapeMismatch(f"attention: width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.w_q = Linear(dim, dim, rng, bias=False)
        self.w_k = Linear(dim, dim, rng, bias=False)
        self.w_v = Linear(dim, dim, rng, bias=False)
        self.w_out = Linear(dim, dim, rng, bias=out_bias)
        self.last_weights = None
        self.last_kv_probe = None

    def __call__(self, q_src: Tensor, kv_src: Tensor) -> Tensor:
        q = self.w_q(q_src)
        k = self.w_k(kv_src)
        v = self.w_v(kv_src)
        self.last_kv_probe = {"input": kv_src, "k_pre": k, "v_pre": v}
        ctx, weights = scaled_dot_attention(q, k, v, self.heads)
        self.last_weights = weights
        return self.w_out(ctx)


def sinusoidal_position_table(length: int, dim: int) -> np.ndarray:
    """Fixed sin/cos position table, one row per step."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(dim, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * np.floor(i / 2.0) / dim)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return table


def set_parameter_tensor(module: Module, path: str, tensor: Tensor):
    """Replace the parameter at a dotted `path` (as produced by
    named_parameters) with `tensor`; used by gradient-checking harnesses."""
    parts = path.split(".")
    target = module
    for part in parts[:-1]:
        target = target[int(part)] if isinstance(target, (list, tuple)) else getattr(target, part)
    leaf = parts[-1]
    holder = target[int(leaf)] if isinstance(target, (list, tuple)) else getattr(target, leaf)
    if not isinstance(holder, Tensor):
        raise AttributeError(f"set_parameter_tensor: '{path}' is not a parameter")
    tensor.requires_grad = True
    if isinstance(target, (list, tuple)):
        raise AttributeError(f"set_parameter_tensor: cannot replace list slot '{path}'")
    setattr(target, leaf, tensor)


def mlp(dims: list[int], rng: np.random.Generator, bias: bool = True) -> list[Linear]:
    return [Linear(a, b, rng, bias=bias) for a, b in zip(dims[:-1], dims[1:])]


def run_mlp(layers: list[Linear], x: Tensor) -> Tensor:
    """Apply `layers` with GELU between them (none after the last)."""
    for i, layer in enumerate(layers):
        x = layer(x)
        if i < len(layers) - 1:
            x = ad.gelu(x)
    return x
