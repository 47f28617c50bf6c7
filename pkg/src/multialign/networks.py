"""Denoising transformer, frozen encoder, projection head and discriminator.

All four are plain parameter containers with a ``__call__`` forward pass
built from :mod:`multialign.tensor` ops.  Parameters are enumerated with
``named_parameters()`` in a fixed order, which is the order used by the
checkpoint format.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import DimensionError, DomainError, Tensor

ENCODER_SEED = 0x5A2A01


class Module:
    """Minimal container: parameters are Tensor attributes, children are Modules."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, child in enumerate(value):
                    yield from child.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_arrays(self) -> dict:
        return {name: p.data for name, p in self.named_parameters()}

    def load_arrays(self, arrays: dict) -> None:
        for name, p in self.named_parameters():
            src = arrays[name]
            if src.shape != p.shape:
                raise DimensionError(f"{name}: expected {p.shape}, got {src.shape}")
            p.data = np.array(src, dtype=p.dtype)


def _xavier(rng, fan_in, fan_out, dtype):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


class Linear(Module):
    def __init__(self, fan_in: int, fan_out: int, rng, dtype=np.float32, zero: bool = False, trainable: bool = True):
        w = np.zeros((fan_in, fan_out), dtype) if zero else _xavier(rng, fan_in, fan_out, dtype)
        self.weight = Tensor(w, requires_grad=trainable)
        self.bias = Tensor(np.zeros(fan_out, dtype), requires_grad=trainable)

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


def sincos_pos_embed(dim: int, grid: int) -> np.ndarray:
    """Fixed 2-D sine-cosine position table, shape [grid*grid, dim]."""
    if dim % 4:
        raise DimensionError("position embedding width must be divisible by 4")
    quarter = dim // 4
    omega = 1.0 / 10000 ** (np.arange(quarter) / quarter)
    ys, xs = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")

    def emb(pos):
        out = pos.reshape(-1)[:, None] * omega[None]
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    return np.concatenate([emb(ys), emb(xs)], axis=1)


def timestep_features(t: np.ndarray, dim: int = 256, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal features of 1000*t (DiT convention)."""
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = 1000.0 * np.asarray(t, dtype=np.float64)[:, None] * freqs[None]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1)


def patchify(x: np.ndarray, p: int) -> np.ndarray:
    b, c, h, w = x.shape
    x = x.reshape(b, c, h // p, p, w // p, p).transpose(0, 2, 4, 3, 5, 1)
    return np.ascontiguousarray(x).reshape(b, (h // p) * (w // p), p * p * c)


def unpatchify(x: Tensor, c: int, h: int, w: int, p: int) -> Tensor:
    b = x.shape[0]
    x = x.reshape(b, h // p, w // p, p, p, c)
    return x.transpose(0, 5, 1, 3, 2, 4).reshape(b, c, h, w)


def attention(x: Tensor, qkv: Linear, proj: Linear, heads: int) -> Tensor:
    b, n, d = x.shape
    dh = d // heads
    y = qkv(x).reshape(b, n, 3, heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = y[0], y[1], y[2]
    att = T.softmax((q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh)))
    out = (att @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
    return proj(out)


# ---------------------------------------------------------------------------
# denoiser


@dataclass(frozen=True)
class DenoiserConfig:
    layers: int = 6
    hidden_dim: int = 128
    heads: int = 4
    patch_size: int = 2
    num_classes: int = 4
    alignment_depth: int = 2
    in_channels: int = 4
    input_size: int = 8
    mlp_ratio: int = 4
    freq_dim: int = 256

    def __post_init__(self):
        if self.hidden_dim % self.heads:
            raise ValueError("hidden_dim must be divisible by heads")
        if not 1 <= self.alignment_depth <= self.layers:
            raise ValueError("alignment_depth must lie in [1, layers]")
        if self.input_size % self.patch_size:
            raise ValueError("input_size must be divisible by patch_size")

    @property
    def grid(self) -> int:
        return self.input_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid**2

    @property
    def patch_dim(self) -> int:
        return self.patch_size**2 * self.in_channels


class DiTBlock(Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng, dtype):
        self.heads = heads
        self.ada = Linear(dim, 6 * dim, rng, dtype, zero=True)
        self.qkv = Linear(dim, 3 * dim, rng, dtype)
        self.proj = Linear(dim, dim, rng, dtype)
        self.fc1 = Linear(dim, mlp_ratio * dim, rng, dtype)
        self.fc2 = Linear(mlp_ratio * dim, dim, rng, dtype)

    def __call__(self, x: Tensor, cond: Tensor) -> Tensor:
        b, _, d = x.shape
        mod = self.ada(cond).reshape(b, 1, 6 * d)
        shift1, scale1, gate1, shift2, scale2, gate2 = (mod[:, :, i * d : (i + 1) * d] for i in range(6))
        h = T.layernorm(x) * (scale1 + 1.0) + shift1
        x = x + gate1 * attention(h, self.qkv, self.proj, self.heads)
        h = T.layernorm(x) * (scale2 + 1.0) + shift2
        return x + gate2 * self.fc2(T.gelu(self.fc1(h)))


class FinalLayer(Module):
    def __init__(self, dim: int, out_dim: int, rng, dtype):
        self.ada = Linear(dim, 2 * dim, rng, dtype, zero=True)
        self.linear = Linear(dim, out_dim, rng, dtype, zero=True)

    def __call__(self, x: Tensor, cond: Tensor) -> Tensor:
        b, _, d = x.shape
        mod = self.ada(cond).reshape(b, 1, 2 * d)
        shift, scale = mod[:, :, :d], mod[:, :, d:]
        return self.linear(T.layernorm(x) * (scale + 1.0) + shift)


class DenoiserNet(Module):
    """SiT-style transformer with adaLN-zero conditioning on (t, class).

    ``__call__`` returns ``(v_pred, z_den)`` where ``z_den`` is the residual
    stream right after block ``alignment_depth`` (1-indexed).
    """

    def __init__(self, cfg: DenoiserConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        d = cfg.hidden_dim
        self.x_embed = Linear(cfg.patch_dim, d, rng, dtype)
        self._pos = sincos_pos_embed(d, cfg.grid).astype(dtype)
        self.t_fc1 = Linear(cfg.freq_dim, d, rng, dtype)
        self.t_fc2 = Linear(d, d, rng, dtype)
        self.t_fc1.weight.data[:] = rng.normal(0, 0.02, self.t_fc1.weight.shape)
        self.t_fc2.weight.data[:] = rng.normal(0, 0.02, self.t_fc2.weight.shape)
        self.y_table = Tensor(rng.normal(0, 0.02, (cfg.num_classes + 1, d)).astype(dtype), requires_grad=True)
        self.blocks = [DiTBlock(d, cfg.heads, cfg.mlp_ratio, rng, dtype) for _ in range(cfg.layers)]
        self.final = FinalLayer(d, cfg.patch_dim, rng, dtype)

    @property
    def dtype(self):
        return self.x_embed.weight.dtype

    @property
    def null_class(self) -> int:
        return self.cfg.num_classes

    def __call__(self, x_t, t, y):
        cfg = self.cfg
        x_t = np.asarray(x_t.data if isinstance(x_t, Tensor) else x_t, dtype=self.dtype)
        expected = (cfg.in_channels, cfg.input_size, cfg.input_size)
        if x_t.ndim != 4 or x_t.shape[1:] != expected:
            raise DimensionError(f"expected input [b, {expected}], got {x_t.shape}")
        y = np.asarray(y, dtype=np.int64)
        if np.any(y < 0) or np.any(y > cfg.num_classes):
            raise DomainError(f"labels must lie in [0, {cfg.num_classes}]")
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x_t.shape[0],))

        x = self.x_embed(Tensor(patchify(x_t, cfg.patch_size))) + self._pos
        t_emb = self.t_fc2(T.silu(self.t_fc1(Tensor(timestep_features(t, cfg.freq_dim).astype(self.dtype)))))
        cond = T.silu(t_emb + T.take_rows(self.y_table, y))

        z_den = None
        for i, block in enumerate(self.blocks, start=1):
            x = block(x, cond)
            if i == cfg.alignment_depth:
                z_den = x
        out = self.final(x, cond)
        v = unpatchify(out, cfg.in_channels, cfg.input_size, cfg.input_size, cfg.patch_size)
        return v, z_den


# ---------------------------------------------------------------------------
# frozen encoder


@dataclass(frozen=True)
class EncoderConfig:
    width: int = 64
    depth: int = 4
    heads: int = 4
    patch_size: int = 2
    in_channels: int = 4
    input_size: int = 8
    seed: int = ENCODER_SEED


class EncoderBlock(Module):
    def __init__(self, dim: int, heads: int, rng, dtype):
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim, rng, dtype, trainable=False)
        self.proj = Linear(dim, dim, rng, dtype, trainable=False)
        self.fc1 = Linear(dim, 4 * dim, rng, dtype, trainable=False)
        self.fc2 = Linear(4 * dim, dim, rng, dtype, trainable=False)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + attention(T.layernorm(x), self.qkv, self.proj, self.heads)
        return x + self.fc2(T.gelu(self.fc1(T.layernorm(x))))


class FrozenEncoder(Module):
    """Random-weight pre-LN transformer drawn once from ``cfg.seed``; never trained.

    Its weights do not require grad, so they never show up in a gradient map
    and ``named_parameters()`` is empty.  ``frozen_arrays()`` exposes them.
    """

    def __init__(self, cfg: EncoderConfig = EncoderConfig(), dtype=np.float32):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        patch_dim = cfg.patch_size**2 * cfg.in_channels
        grid = cfg.input_size // cfg.patch_size
        self.embed = Linear(patch_dim, cfg.width, rng, dtype, trainable=False)
        self._pos = sincos_pos_embed(cfg.width, grid).astype(dtype)
        self.blocks = [EncoderBlock(cfg.width, cfg.heads, rng, dtype) for _ in range(cfg.depth)]
        self._dtype = dtype

    @property
    def num_patches(self) -> int:
        return (self.cfg.input_size // self.cfg.patch_size) ** 2

    def frozen_arrays(self) -> dict:
        out = {"embed.weight": self.embed.weight.data, "embed.bias": self.embed.bias.data}
        for i, blk in enumerate(self.blocks):
            for name in ("qkv", "proj", "fc1", "fc2"):
                lin = getattr(blk, name)
                out[f"blocks.{i}.{name}.weight"] = lin.weight.data
                out[f"blocks.{i}.{name}.bias"] = lin.bias.data
        return out

    def __call__(self, x0) -> Tensor:
        x0 = np.asarray(x0.data if isinstance(x0, Tensor) else x0, dtype=self._dtype)
        with T.no_grad():
            x = self.embed(Tensor(patchify(x0, self.cfg.patch_size))) + self._pos
            for block in self.blocks:
                x = block(x)
            out = T.layernorm(x)
        return Tensor(out.data, requires_grad=False)


def encode(enc: FrozenEncoder, x0) -> Tensor:
    return enc(x0)


# ---------------------------------------------------------------------------
# projection head


class ProjectionMLP(Module):
    """hidden_dim -> proj_dim -> proj_dim -> out_dim with SiLU between layers."""

    def __init__(self, in_dim: int, out_dim: int, rng, hidden: int = 256, dtype=np.float32):
        self.fc1 = Linear(in_dim, hidden, rng, dtype)
        self.fc2 = Linear(hidden, hidden, rng, dtype)
        self.fc3 = Linear(hidden, out_dim, rng, dtype)

    def __call__(self, z: Tensor) -> Tensor:
        if z.shape[-1] != self.fc1.weight.shape[0]:
            raise DimensionError(f"expected last axis {self.fc1.weight.shape[0]}, got {z.shape[-1]}")
        return self.fc3(T.silu(self.fc2(T.silu(self.fc1(z)))))


def project(mlp: ProjectionMLP, z_den: Tensor) -> Tensor:
    return mlp(z_den)


# ---------------------------------------------------------------------------
# discriminator


class Discriminator(Module):
    """1x1 conv adapter, two stride-2 3x3 conv blocks with SiLU, mean pool, linear logit."""

    def __init__(self, in_dim: int, rng, channels: int = 32, dtype=np.float32):
        def conv(o, c, k):
            bound = math.sqrt(6.0 / ((c + o) * k * k))
            return Tensor(rng.uniform(-bound, bound, (o, c, k, k)).astype(dtype), requires_grad=True)

        self.adapter_w = conv(channels, in_dim, 1)
        self.adapter_b = Tensor(np.zeros(channels, dtype), requires_grad=True)
        self.conv1_w = conv(channels, channels, 3)
        self.conv1_b = Tensor(np.zeros(channels, dtype), requires_grad=True)
        self.conv2_w = conv(channels, channels, 3)
        self.conv2_b = Tensor(np.zeros(channels, dtype), requires_grad=True)
        self.head = Linear(channels, 1, rng, dtype)

    def __call__(self, h: Tensor, frozen: bool = False) -> Tensor:
        """Raw logits [b, 1].  ``frozen`` treats the discriminator weights as constants."""
        h = T.as_tensor(h)
        b, n, d = h.shape
        side = math.isqrt(n)
        if side * side != n:
            raise DimensionError(f"token count {n} is not a perfect square")
        p = {name: (t.detach() if frozen else t) for name, t in self.named_parameters()}
        x = h.reshape(b, side, side, d).transpose(0, 3, 1, 2)
        x = T.conv2d(x, p["adapter_w"], p["adapter_b"])
        x = T.silu(T.conv2d(x, p["conv1_w"], p["conv1_b"], stride=2, padding=1))
        x = T.silu(T.conv2d(x, p["conv2_w"], p["conv2_b"], stride=2, padding=1))
        x = x.mean(axis=(2, 3))
        return x @ p["head.weight"] + p["head.bias"]


def discriminate(d: Discriminator, h: Tensor, frozen: bool = False) -> Tensor:
    return d(h, frozen=frozen)
