"""Trainable feature matching, region-level non-local attention and channel attention."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import Conv2d, Identity, Module, PReLU
from .tensor import ConfigurationError, Param, Tensor

ALPHA_INIT_STD = 0.1


# ---------------------------------------------------------------- TFM


@dataclass(frozen=True)
class TfmConfig:
    N: int = 32
    R: int = 4
    K: int = 3
    s: int = 2

    def __post_init__(self):
        if min(self.N, self.R, self.K, self.s) < 1:
            raise ConfigurationError(f"TFM sizes must be positive: {self}")

    @property
    def alpha_shape(self) -> tuple[int, int, int, int]:
        return (self.N, self.R, self.s * self.K, self.s * self.K)

    @property
    def deconv_padding(self) -> int:
        if (self.s * (self.K - 1)) % 2:
            raise ConfigurationError(f"s*(K-1) must be even for a size-preserving reconstruction, got s={self.s} K={self.K}")
        return self.s * (self.K - 1) // 2


def _axis_overlap(n: int, K: int, s: int, pad: int) -> np.ndarray:
    counts = np.zeros(s * n, dtype=np.int64)
    for i in range(n):
        lo = s * i - pad
        a, b = max(lo, 0), min(lo + s * K, s * n)
        if b > a:
            counts[a:b] += 1
    return counts


def overlap_count_map(H: int, W: int, K: int, s: int) -> np.ndarray:
    """Number of (input site, kernel tap) pairs landing on each output pixel."""
    pad = TfmConfig(1, 1, K, s).deconv_padding
    return np.outer(_axis_overlap(H, K, s, pad), _axis_overlap(W, K, s, pad)).astype(np.float64)


def tfm_match_kernel(alpha: Tensor, cfg: TfmConfig, t1: Conv2d) -> Tensor:
    """Down-sample the feature set to KxK and project R channels to one: (N, 1, K, K)."""
    small = T.bilinear_resize(alpha, cfg.K, cfg.K)
    return t1(small)


def tfm_weights(F: Tensor, alpha: Tensor, cfg: TfmConfig, ft: Conv2d, t1: Conv2d) -> Tensor:
    """Softmax matching weights over the N features, shaped (B*C, N, H, W)."""
    if cfg.K % 2 == 0:
        raise ConfigurationError("TFM matching needs an odd feature size K")
    b, c, h, w = F.shape
    f_match = ft(F).reshape(b * c, 1, h, w)
    k1 = tfm_match_kernel(alpha, cfg, t1)
    scores = T.conv2d(f_match, k1, None, 1, cfg.K // 2)
    return T.softmax(scores, axis=1)


def tfm_forward(F: Tensor, alpha: Tensor, cfg: TfmConfig, ft: Conv2d, t1: Conv2d, t2: Conv2d) -> Tensor:
    """Per-channel feature matching followed by overlap-averaged reconstruction.

    ``F`` is (B, C, H, W); the result is (B, C, sH, sW).
    """
    if alpha.shape != cfg.alpha_shape:
        raise ConfigurationError(f"alpha has shape {alpha.shape}, expected {cfg.alpha_shape}")
    b, c, h, w = F.shape
    weights = tfm_weights(F, alpha, cfg, ft, t1)
    k2 = t2(alpha)  # (N, 1, sK, sK)
    recon = T.conv_transpose2d(weights, k2, None, cfg.s, cfg.deconv_padding)
    counts = overlap_count_map(h, w, cfg.K, cfg.s).astype(recon.dtype)
    return (recon / counts).reshape(b, c, cfg.s * h, cfg.s * w)


class TFM(Module):
    """Feature matching against one trainable feature set per recurrence."""

    def __init__(self, C: int, cfg: TfmConfig, n_sets: int, rng: np.random.Generator, bias: bool = True):
        self.cfg = cfg
        self.ft = Conv2d(C, C, 1, rng, bias=bias)
        self.t1 = Conv2d(cfg.R, 1, 1, rng, bias=bias)
        self.t2 = Conv2d(cfg.R, 1, 1, rng, bias=bias)
        self.alpha = [
            Param(rng.normal(0.0, ALPHA_INIT_STD, size=cfg.alpha_shape).astype(T.default_dtype()))
            for _ in range(n_sets)
        ]

    def forward(self, F: Tensor, i: int) -> Tensor:
        return tfm_forward(F, self.alpha[i], self.cfg, self.ft, self.t1, self.t2)


# ---------------------------------------------------------------- non-local


class NonLocal(Module):
    """Embedded-Gaussian non-local block over all sites of its input."""

    def __init__(self, C: int, C1: int, rng: np.random.Generator, residual: bool = True):
        self.residual = residual
        self.theta = Conv2d(C, C1, 1, rng)
        self.phi = Conv2d(C, C1, 1, rng)
        self.g = Conv2d(C, C1, 1, rng)
        self.out = Conv2d(C1, C, 1, rng)

    def forward(self, X: Tensor) -> Tensor:
        return nonlocal_block(X, self)


def nonlocal_block(X: Tensor, nl: NonLocal) -> Tensor:
    b, c, h, w = X.shape
    hw = h * w
    with T.mac_tag("transform"):
        q = nl.theta(X)
        k = nl.phi(X)
        v = nl.g(X)
    c1 = q.shape[1]
    q = q.reshape(b, c1, hw).transpose(0, 2, 1)
    k = k.reshape(b, c1, hw)
    v = v.reshape(b, c1, hw).transpose(0, 2, 1)
    with T.mac_tag("match"):
        attn = T.softmax(T.matmul(q, k), axis=-1)
    with T.mac_tag("reconstruct"):
        y = T.matmul(attn, v)
    y = y.transpose(0, 2, 1).reshape(b, c1, h, w)
    with T.mac_tag("output"):
        out = nl.out(y)
    return out + X if nl.residual else out


# ---------------------------------------------------------------- SRNL


@dataclass(frozen=True)
class Block:
    top: int
    left: int
    group: str  # A, B, C or D; later groups cover earlier ones


@dataclass(frozen=True)
class SrnlLayout:
    H: int
    W: int
    P: int
    l: int
    m: int
    ph: int
    pw: int
    blocks: tuple[Block, ...]

    def owner_map(self) -> np.ndarray:
        """Index of the block whose result survives at each pixel."""
        owner = np.full((self.H, self.W), -1, dtype=np.int64)
        for t, blk in enumerate(self.blocks):
            owner[blk.top:blk.top + self.ph, blk.left:blk.left + self.pw] = t
        return owner


def srnl_divide(H: int, W: int, P: int) -> SrnlLayout:
    """Split an HxW map into same-size PxP blocks drawn from four overlapping regions."""
    if min(H, W, P) < 1:
        raise ConfigurationError("H, W and P must be positive")
    l = math.ceil(H / P) - 1
    m = math.ceil(W / P) - 1
    ph, pw = min(P, H), min(P, W)
    blocks = [Block(a * P, b * P, "A") for a in range(l) for b in range(m)]
    blocks += [Block(H - ph, b * P, "B") for b in range(m)]
    blocks += [Block(a * P, W - pw, "C") for a in range(l)]
    blocks.append(Block(H - ph, W - pw, "D"))
    return SrnlLayout(H, W, P, l, m, ph, pw, tuple(blocks))


def extract_blocks(F: Tensor, layout: SrnlLayout) -> Tensor:
    """Stack every block: (B, C, H, W) -> (T*B, C, ph, pw), block-major."""
    ph, pw = layout.ph, layout.pw
    stacked = np.stack([F.data[:, :, b.top:b.top + ph, b.left:b.left + pw] for b in layout.blocks])
    nb = len(layout.blocks)

    def back(g):
        g = g.reshape((nb,) + F.shape[:2] + (ph, pw))
        gx = np.zeros_like(F.data)
        for t, b in enumerate(layout.blocks):
            gx[:, :, b.top:b.top + ph, b.left:b.left + pw] += g[t]
        return (gx,)

    return Tensor.from_op(stacked.reshape((nb * F.shape[0],) + F.shape[1:2] + (ph, pw)), (F,), back)


def cover_blocks(stack: Tensor, layout: SrnlLayout, batch: int) -> Tensor:
    """Write blocks back in precedence order; later blocks overwrite earlier ones."""
    ph, pw = layout.ph, layout.pw
    nb = len(layout.blocks)
    blocks = stack.data.reshape((nb, batch) + stack.shape[1:2] + (ph, pw))
    out = np.zeros((batch, stack.shape[1], layout.H, layout.W), dtype=stack.dtype)
    for t, b in enumerate(layout.blocks):
        out[:, :, b.top:b.top + ph, b.left:b.left + pw] = blocks[t]
    owner = layout.owner_map()

    def back(g):
        gs = np.zeros_like(blocks)
        for t, b in enumerate(layout.blocks):
            keep = owner[b.top:b.top + ph, b.left:b.left + pw] == t
            gs[t] = g[:, :, b.top:b.top + ph, b.left:b.left + pw] * keep
        return (gs.reshape(stack.shape),)

    return Tensor.from_op(out, (stack,), back)


def srnl_forward(F: Tensor, P: int, nl: NonLocal) -> Tensor:
    """Non-local attention applied independently inside each same-size block."""
    b, c, h, w = F.shape
    layout = srnl_divide(h, w, P)
    omega = extract_blocks(F, layout)
    omega_nl = nonlocal_block(omega, nl)
    return cover_blocks(omega_nl, layout, b)


class SRNL(Module):
    def __init__(self, C: int, C1: int, P: int, rng: np.random.Generator, residual: bool = True):
        self.P = P
        self.nl = NonLocal(C, C1, rng, residual)

    def forward(self, F: Tensor) -> Tensor:
        return srnl_forward(F, self.P, self.nl)


# ---------------------------------------------------------------- CA


class ChannelAttention(Module):
    def __init__(self, C: int, C2: int, rng: np.random.Generator, mid_activation: bool = True):
        if C2 >= C:
            raise ConfigurationError(f"reduced channel count {C2} must be below {C}")
        self.reduce = Conv2d(C, C2, 1, rng)
        self.act = PReLU() if mid_activation else Identity()
        self.expand = Conv2d(C2, C, 1, rng)

    def attention(self, Y: Tensor) -> Tensor:
        z = self.expand(self.act(self.reduce(T.global_avg_pool(Y))))
        return T.softmax(z, axis=1)

    def forward(self, Y: Tensor) -> Tensor:
        return Y * self.attention(Y)


def ca_forward(Y: Tensor, ca: ChannelAttention) -> Tensor:
    return ca(Y)
