"""Bi-level routing attention and the transformer block built around it.

The attention runs in two stages: a coarse routing step ranks regions of
the feature map by the affinity of their pooled queries and keys and keeps
the top-k regions per query region; exact token-to-token attention then
runs only over the kept regions. A depthwise convolution over the value
map (local context enhancement) is added to the attention output before
the final projection, so every position keeps a local receptive field even
when its region routes elsewhere.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .tensor import ConfigError, ShapeError, Tensor, get_default_dtype


@dataclass
class BraConfig:
    """Geometry of one routing-attention layer.

    The feature map is split into a region_grid x region_grid grid of
    regions; each query region attends to the tokens of its topk routed
    regions.
    """

    channels: int
    region_grid: int
    topk: int
    heads: int = 1
    lce_kernel: int = 5

    def __post_init__(self):
        squares = self.region_grid * self.region_grid
        if self.region_grid < 1:
            raise ConfigError(f"region_grid must be positive, got {self.region_grid}")
        if not 1 <= self.topk <= squares:
            raise ConfigError(
                f"topk={self.topk} out of range [1, {squares}] for an "
                f"{self.region_grid}x{self.region_grid} region grid"
            )
        if self.channels % self.heads:
            raise ConfigError(
                f"channels={self.channels} not divisible by heads={self.heads}"
            )

    @property
    def num_regions(self) -> int:
        return self.region_grid * self.region_grid


# ---------------------------------------------------------------------------
# region bookkeeping


def region_partition(x: Tensor, grid: int) -> Tensor:
    """(B, C, H, W) -> (B, grid^2, HW/grid^2, C).

    Regions are ordered row-major over the grid and tokens row-major inside
    each region; region_merge inverts this exactly.
    """
    b, c, h, w = x.shape
    if h % grid or w % grid:
        raise ShapeError(
            f"region_partition: spatial size {h}x{w} not divisible by grid {grid}"
        )
    rh, rw = h // grid, w // grid
    t = ops.reshape(x, (b, c, grid, rh, grid, rw))
    t = ops.transpose(t, (0, 2, 4, 3, 5, 1))
    return ops.reshape(t, (b, grid * grid, rh * rw, c))


def region_merge(x: Tensor, grid: int, h: int, w: int) -> Tensor:
    """Inverse of region_partition back to (B, C, H, W)."""
    b, regions, tokens, c = x.shape
    rh, rw = h // grid, w // grid
    if regions != grid * grid or tokens != rh * rw:
        raise ShapeError(
            f"region_merge: got {regions} regions of {tokens} tokens, expected "
            f"{grid * grid} regions of {rh * rw}"
        )
    t = ops.reshape(x, (b, grid, grid, rh, rw, c))
    t = ops.transpose(t, (0, 5, 1, 3, 2, 4))
    return ops.reshape(t, (b, c, h, w))


def region_summaries(q: Tensor, k: Tensor) -> tuple[Tensor, Tensor]:
    """Per-region token means of the query/key tensors (..., regions, tokens, C)."""
    return ops.mean_axis(q, q.ndim - 2), ops.mean_axis(k, k.ndim - 2)


def routing(q_mean: Tensor, k_mean: Tensor, k: int) -> np.ndarray:
    """Top-k routed region indices from the region-to-region affinity matrix.

    q_mean, k_mean: (regions, C). Returns an int index matrix (regions, k)
    whose rows are duplicate-free and ordered by descending affinity.
    """
    qm = q_mean.data if isinstance(q_mean, Tensor) else np.asarray(q_mean)
    km = k_mean.data if isinstance(k_mean, Tensor) else np.asarray(k_mean)
    if qm.shape[-1] != km.shape[-1]:
        raise ShapeError(
            f"routing: channel axes differ, {qm.shape[-1]} vs {km.shape[-1]}"
        )
    affinity = qm @ km.T
    return ops.topk_rows(affinity, k)


def _batched_topk(affinity: np.ndarray, k: int) -> np.ndarray:
    order = np.argsort(-affinity, axis=-1, kind="stable")
    return order[..., :k].astype(np.int64)


# ---------------------------------------------------------------------------
# multiply-accumulate accounting


class MacCounter:
    """Collects token-attention multiply-accumulate counts keyed by label."""

    def __init__(self):
        self.qk: dict[str, int] = {}
        self.av: dict[str, int] = {}

    def add(self, label: str, qk: int, av: int) -> None:
        self.qk[label] = self.qk.get(label, 0) + qk
        self.av[label] = self.av.get(label, 0) + av

    def token_macs(self, label: str) -> int:
        return self.qk.get(label, 0) + self.av.get(label, 0)

    def total(self) -> int:
        return sum(self.qk.values()) + sum(self.av.values())


_COUNTER_STACK: list[MacCounter] = []


@contextlib.contextmanager
def count_attention_macs(counter: MacCounter):
    _COUNTER_STACK.append(counter)
    try:
        yield counter
    finally:
        _COUNTER_STACK.pop()


def _record_macs(label: str, qk: int, av: int) -> None:
    if _COUNTER_STACK:
        _COUNTER_STACK[-1].add(label, qk, av)


# ---------------------------------------------------------------------------
# parameter initialization helpers


def xavier_uniform(rng: np.random.Generator, fan_out: int, fan_in: int, *kernel) -> Tensor:
    shape = (fan_out, fan_in) + kernel
    receptive = int(np.prod(kernel)) if kernel else 1
    limit = np.sqrt(6.0 / ((fan_in + fan_out) * receptive))
    data = rng.uniform(-limit, limit, size=shape)
    return Tensor(data, requires_grad=True, dtype=get_default_dtype())


def he_normal(rng: np.random.Generator, shape: tuple, fan_in: int) -> Tensor:
    data = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
    return Tensor(data, requires_grad=True, dtype=get_default_dtype())


def zeros_param(*shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, dtype=get_default_dtype())


def ones_param(*shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True, dtype=get_default_dtype())


# ---------------------------------------------------------------------------
# the attention layer


class BiLevelRoutingAttention:
    """Routing attention with local context enhancement.

    Pipeline: project tokens to Q/K/V, pool per-region means, route each
    query region to its topk regions, gather the routed keys/values, run
    per-head scaled dot-product attention over the gathered tokens, add the
    depthwise-convolved value map, and project the result back.
    """

    def __init__(self, cfg: BraConfig, rng: np.random.Generator, label: str = "bra"):
        c = cfg.channels
        self.cfg = cfg
        self.label = label
        self.wq = xavier_uniform(rng, c, c)
        self.bq = zeros_param(c)
        self.wk = xavier_uniform(rng, c, c)
        self.bk = zeros_param(c)
        self.wv = xavier_uniform(rng, c, c)
        self.bv = zeros_param(c)
        self.wo = xavier_uniform(rng, c, c)
        self.bo = zeros_param(c)
        k = cfg.lce_kernel
        self.lce_weight = he_normal(rng, (c, 1, k, k), fan_in=k * k)
        self.lce_bias = zeros_param(c)

    def named_parameters(self, prefix: str = ""):
        for name in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
                     "lce_weight", "lce_bias"):
            yield f"{prefix}{name}", getattr(self, name)

    def forward(self, x: Tensor) -> Tensor:
        cfg = self.cfg
        b, c, h, w = x.shape
        if c != cfg.channels:
            raise ShapeError(f"attention expects {cfg.channels} channels, got {c}")
        grid = cfg.region_grid
        regions = cfg.num_regions
        tokens = region_partition(x, grid)          # (B, R, n, C)
        n = tokens.shape[2]

        q = ops.linear(tokens, self.wq, self.bq)
        k = ops.linear(tokens, self.wk, self.bk)
        v = ops.linear(tokens, self.wv, self.bv)

        q_mean, k_mean = region_summaries(q, k)     # (B, R, C)
        affinity = np.matmul(q_mean.data, np.swapaxes(k_mean.data, -1, -2))
        indices = _batched_topk(affinity, cfg.topk)  # (B, R, topk)

        kg = ops.reshape(ops.gather_rows_batched(k, indices), (b, regions, cfg.topk * n, c))
        vg = ops.reshape(ops.gather_rows_batched(v, indices), (b, regions, cfg.topk * n, c))

        heads, dim = cfg.heads, c // cfg.heads
        kn = cfg.topk * n
        qh = ops.transpose(ops.reshape(q, (b, regions, n, heads, dim)), (0, 1, 3, 2, 4))
        kh = ops.transpose(ops.reshape(kg, (b, regions, kn, heads, dim)), (0, 1, 3, 4, 2))
        vh = ops.transpose(ops.reshape(vg, (b, regions, kn, heads, dim)), (0, 1, 3, 2, 4))

        logits = ops.mul(ops.matmul(qh, kh), float(1.0 / np.sqrt(dim)))
        attn = ops.softmax_lastdim(logits)
        mixed = ops.matmul(attn, vh)                # (B, R, heads, n, dim)
        _record_macs(self.label,
                     qk=b * regions * n * kn * c,
                     av=b * regions * n * kn * c)

        mixed = ops.reshape(ops.transpose(mixed, (0, 1, 3, 2, 4)), (b, regions, n, c))
        out_map = region_merge(mixed, grid, h, w)

        v_map = region_merge(v, grid, h, w)
        lce = ops.conv2d(v_map, self.lce_weight, self.lce_bias,
                         padding=cfg.lce_kernel // 2, groups=c)
        out_map = ops.add(out_map, lce)

        flat = ops.transpose(out_map, (0, 2, 3, 1))
        flat = ops.linear(flat, self.wo, self.bo)
        return ops.transpose(flat, (0, 3, 1, 2))


class BiformerBlock:
    """Depthwise positional conv, routing attention and an MLP, each behind
    a residual connection with channel layer norm in front of the latter two."""

    def __init__(self, cfg: BraConfig, rng: np.random.Generator,
                 mlp_ratio: float = 3.0, label: str = "bra"):
        c = cfg.channels
        self.cfg = cfg
        self.dw_weight = he_normal(rng, (c, 1, 3, 3), fan_in=9)
        self.dw_bias = zeros_param(c)
        self.norm1_gamma = ones_param(c)
        self.norm1_beta = zeros_param(c)
        self.attention = BiLevelRoutingAttention(cfg, rng, label=label)
        self.norm2_gamma = ones_param(c)
        self.norm2_beta = zeros_param(c)
        hidden = max(1, int(round(c * mlp_ratio)))
        self.mlp_w1 = xavier_uniform(rng, hidden, c)
        self.mlp_b1 = zeros_param(hidden)
        self.mlp_w2 = xavier_uniform(rng, c, hidden)
        self.mlp_b2 = zeros_param(c)

    def named_parameters(self, prefix: str = ""):
        for name in ("dw_weight", "dw_bias", "norm1_gamma", "norm1_beta"):
            yield f"{prefix}{name}", getattr(self, name)
        yield from self.attention.named_parameters(prefix + "attention.")
        for name in ("norm2_gamma", "norm2_beta", "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2"):
            yield f"{prefix}{name}", getattr(self, name)

    def forward(self, x: Tensor) -> Tensor:
        c = self.cfg.channels
        pos = ops.conv2d(x, self.dw_weight, self.dw_bias, padding=1, groups=c)
        y1 = ops.add(x, pos)

        normed = ops.layer_norm(y1, self.norm1_gamma, self.norm1_beta, axis=1)
        y2 = ops.add(y1, self.attention.forward(normed))

        normed = ops.layer_norm(y2, self.norm2_gamma, self.norm2_beta, axis=1)
        flat = ops.transpose(normed, (0, 2, 3, 1))
        flat = ops.linear(flat, self.mlp_w1, self.mlp_b1)
        flat = ops.gelu(flat)
        flat = ops.linear(flat, self.mlp_w2, self.mlp_b2)
        return ops.add(y2, ops.transpose(flat, (0, 3, 1, 2)))


# ---------------------------------------------------------------------------
# dense oracle


def dense_attention_reference(x: np.ndarray, layer: BiLevelRoutingAttention) -> np.ndarray:
    """Full token-to-token attention with the layer's own projections and
    local-context conv, written directly against the attention definition
    (no region partitioning, no routing, no gather).

    Equals the routed forward whenever topk covers the whole region grid.
    """
    cfg = layer.cfg
    b, c, h, w = x.shape
    t = x.transpose(0, 2, 3, 1).reshape(b, h * w, c)
    q = t @ layer.wq.data.T + layer.bq.data
    k = t @ layer.wk.data.T + layer.bk.data
    v = t @ layer.wv.data.T + layer.bv.data

    heads, dim = cfg.heads, c // cfg.heads
    tokens = h * w
    out = np.empty_like(q)
    for head in range(heads):
        sl = slice(head * dim, (head + 1) * dim)
        logits = q[:, :, sl] @ k[:, :, sl].transpose(0, 2, 1) / np.sqrt(dim)
        logits -= logits.max(axis=-1, keepdims=True)
        weights = np.exp(logits)
        weights /= weights.sum(axis=-1, keepdims=True)
        out[:, :, sl] = weights @ v[:, :, sl]
    _record_macs("dense", qk=b * tokens * tokens * c, av=b * tokens * tokens * c)

    # depthwise local-context conv on the value map, direct sliding window
    kk = cfg.lce_kernel
    pad = kk // 2
    v_map = v.reshape(b, h, w, c).transpose(0, 3, 1, 2)
    vp = np.pad(v_map, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    lce = np.zeros_like(v_map)
    for i in range(kk):
        for j in range(kk):
            lce += vp[:, :, i:i + h, j:j + w] * layer.lce_weight.data[None, :, 0, i, j, None, None]
    lce += layer.lce_bias.data[None, :, None, None]

    merged = out.reshape(b, h, w, c).transpose(0, 3, 1, 2) + lce
    flat = merged.transpose(0, 2, 3, 1) @ layer.wo.data.T + layer.bo.data
    return flat.transpose(0, 3, 1, 2)
