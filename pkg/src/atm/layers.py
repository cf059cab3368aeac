"""Neural layers built on the autodiff engine.

The inventory is exactly what the scorer and the pretraining model need:
linear, strided 2-D convolution, layer norm, multi-head self-attention with
learned absolute position embeddings, gelu, and a depthwise temporal
convolution sub-block. Dropout exists but defaults to 0 (training here is
deterministic end to end).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractViolation


class Module:
    """Minimal parameter container; children discovered via attributes."""

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        for attr, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                out.append((attr, value))
            elif isinstance(value, Module):
                out.extend((f"{attr}.{n}", p) for n, p in value.named_parameters())
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend((f"{attr}.{i}.{n}", p) for n, p in item.named_parameters())
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def load_state(self, arrays: dict[str, np.ndarray], prefix: str = ""):
        for name, p in self.named_parameters():
            key = prefix + name
            if key not in arrays:
                raise ContractViolation(f"checkpoint missing parameter {key!r}")
            src = arrays[key]
            if src.shape != p.data.shape:
                raise ContractViolation(
                    f"shape mismatch for {key!r}: checkpoint {src.shape}, model {p.data.shape}")
            p.data = src.astype(p.data.dtype).copy()


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.weight = ad.parameter(_xavier(rng, d_in, d_out, (d_in, d_out)))
        self.bias = ad.parameter(np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = ad.parameter(np.ones(dim))
        self.beta = ad.parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta, eps=self.eps)


class Conv2d(Module):
    """Strided 2-D convolution with 'same' padding."""

    def __init__(self, c_in: int, c_out: int, kernel: int, stride: tuple[int, int],
                 rng: np.random.Generator):
        fan_in = c_in * kernel * kernel
        fan_out = c_out * kernel * kernel
        self.weight = ad.parameter(_xavier(rng, fan_in, fan_out, (c_out, c_in, kernel, kernel)))
        self.bias = ad.parameter(np.zeros(c_out))
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, stride=self.stride)


class Embedding(Module):
    """Lookup table; rows gathered by integer id."""

    def __init__(self, count: int, dim: int, rng: np.random.Generator):
        self.table = ad.parameter(rng.normal(0.0, 0.02, size=(count, dim)))

    def __call__(self, ids) -> Tensor:
        return ad.take_rows(self.table, ids)


class PositionalEmbedding(Module):
    """Learned absolute position embeddings, sliced to the sequence length."""

    def __init__(self, max_len: int, dim: int, rng: np.random.Generator):
        self.max_len = max_len
        self.emb = Embedding(max_len, dim, rng)

    def __call__(self, length: int) -> Tensor:
        if length > self.max_len:
            raise ContractViolation(f"sequence length {length} exceeds position table {self.max_len}")
        return self.emb(np.arange(length))


class MultiHeadSelfAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ContractViolation(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(dim, dim, rng)
        self.wv = Linear(dim, dim, rng)
        self.wo = Linear(dim, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        t, dim = x.shape
        h, hd = self.heads, self.head_dim

        def split(proj: Tensor) -> Tensor:
            return proj.reshape(t, h, hd).transpose(1, 0, 2)

        q, k, v = split(self.wq(x)), split(self.wk(x)), split(self.wv(x))
        scores = (q @ k.transpose(0, 2, 1)) * (1.0 / np.sqrt(hd))
        attn = ad.softmax(scores, axis=-1)
        ctx = (attn @ v).transpose(1, 0, 2).reshape(t, dim)
        return self.wo(ctx)


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.lin1 = Linear(dim, hidden, rng)
        self.lin2 = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(ad.gelu(self.lin1(x)))


class DepthwiseConv1d(Module):
    """Per-channel temporal convolution, same padding, built from shifts."""

    def __init__(self, dim: int, kernel: int, rng: np.random.Generator):
        if kernel % 2 == 0:
            raise ContractViolation("depthwise kernel must be odd for same padding")
        self.kernel = kernel
        self.weight = ad.parameter(rng.normal(0.0, 1.0 / np.sqrt(kernel), size=(kernel, dim)))
        self.bias = ad.parameter(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        t, dim = x.shape
        half = self.kernel // 2
        # Zero-pad by routing through a (t + 2*half, dim) canvas: taps are
        # slices of x itself, clipped at the boundaries.
        out = None
        for j in range(self.kernel):
            offset = j - half
            lo = max(0, -offset)
            hi = min(t, t - offset)
            if lo >= hi:
                continue
            tap = x[lo + offset:hi + offset] * self.weight[j]
            padded = _pad_rows(tap, lo, t - hi)
            out = padded if out is None else out + padded
        return out + self.bias


def _pad_rows(x: Tensor, before: int, after: int) -> Tensor:
    if before == 0 and after == 0:
        return x
    t, dim = x.shape
    out_data = np.pad(x.data, ((before, after), (0, 0)))

    def vjp(g):
        return (g[before:before + t],)

    return Tensor(out_data, op="pad_rows", parents=(x,), vjp=vjp)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity at rate 0 (the default everywhere)."""
    if rate <= 0.0:
        return x
    if rng is None:
        raise ContractViolation("dropout with rate > 0 requires an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return x * Tensor(keep)


class TransformerBlock(Module):
    """Pre-norm transformer block with an optional depthwise-conv sub-block."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator,
                 ffn_mult: int = 4, conv_kernel: int = 5, use_conv: bool = True):
        self.ln_attn = LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads, rng)
        self.use_conv = use_conv
        if use_conv:
            self.ln_conv = LayerNorm(dim)
            self.conv = DepthwiseConv1d(dim, conv_kernel, rng)
        self.ln_ffn = LayerNorm(dim)
        self.ffn = FeedForward(dim, dim * ffn_mult, rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.ln_attn(x))
        if self.use_conv:
            x = x + ad.gelu(self.conv(self.ln_conv(x)))
        x = x + self.ffn(self.ln_ffn(x))
        return x


class ConvSubsampler(Module):
    """Two stride-(2,2) convolutions: T' frames -> ceil(T'/4), then a linear
    projection of the flattened frequency axis to the model dimension."""

    def __init__(self, n_mels: int, channels: int, dim: int, rng: np.random.Generator):
        self.conv1 = Conv2d(1, channels, 3, (2, 2), rng)
        self.conv2 = Conv2d(channels, channels, 3, (2, 2), rng)
        freq = _ceil_div(_ceil_div(n_mels, 2), 2)
        self.proj = Linear(channels * freq, dim, rng)

    def __call__(self, frames: np.ndarray) -> Tensor:
        x = Tensor(frames[None, :, :])  # (1, T', F)
        x = ad.gelu(self.conv1(x))
        x = ad.gelu(self.conv2(x))
        c, t, f = x.shape
        return self.proj(x.transpose(1, 0, 2).reshape(t, c * f))
