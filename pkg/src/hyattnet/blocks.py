"""Convolutional building blocks: CBAM gating, the attention-residual
module, patch embedding and the feature-fusion correction module."""

from __future__ import annotations

import numpy as np

from . import ops
from .attention import he_normal, ones_param, xavier_uniform, zeros_param
from .tensor import ConfigError, ShapeError, Tensor, get_default_dtype


class BatchNorm2d:
    """Per-channel batch normalization with running statistics."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = ones_param(channels)
        self.beta = zeros_param(channels)
        # float32 to match the checkpoint payload exactly
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta, self.running_mean,
                              self.running_var, training, self.momentum, self.eps)

    def named_parameters(self, prefix: str = ""):
        yield f"{prefix}gamma", self.gamma
        yield f"{prefix}beta", self.beta

    def named_buffers(self, prefix: str = ""):
        yield f"{prefix}running_mean", self.running_mean
        yield f"{prefix}running_var", self.running_var


class ChannelAttention:
    """Shared two-layer MLP over average- and max-pooled channel descriptors,
    squashed to a (0, 1) per-channel gate."""

    def __init__(self, channels: int, reduction: int, rng: np.random.Generator):
        if channels % reduction:
            raise ConfigError(
                f"channel attention: reduction {reduction} does not divide {channels}"
            )
        hidden = channels // reduction
        self.w1 = xavier_uniform(rng, hidden, channels)
        self.w2 = xavier_uniform(rng, channels, hidden)
        self.channels = channels

    def named_parameters(self, prefix: str = ""):
        yield f"{prefix}w1", self.w1
        yield f"{prefix}w2", self.w2

    def _mlp(self, pooled: Tensor) -> Tensor:
        b = pooled.shape[0]
        flat = ops.reshape(pooled, (b, self.channels))
        return ops.linear(ops.relu(ops.linear(flat, self.w1)), self.w2)

    def __call__(self, f: Tensor) -> Tensor:
        if f.shape[1] != self.channels:
            raise ShapeError(
                f"channel attention built for {self.channels} channels, got {f.shape[1]}"
            )
        avg = self._mlp(ops.pool(f, "global_avg"))
        mx = self._mlp(ops.pool(f, "global_max"))
        gate = ops.sigmoid(ops.add(avg, mx))
        return ops.reshape(gate, (f.shape[0], self.channels, 1, 1))


class SpatialAttention:
    """7x7 conv over stacked per-pixel channel mean/max, sigmoid gate."""

    def __init__(self, rng: np.random.Generator, kernel: int = 7):
        self.weight = he_normal(rng, (1, 2, kernel, kernel), fan_in=2 * kernel * kernel)
        self.bias = zeros_param(1)
        self.kernel = kernel

    def named_parameters(self, prefix: str = ""):
        yield f"{prefix}weight", self.weight
        yield f"{prefix}bias", self.bias

    def __call__(self, f: Tensor) -> Tensor:
        stack = ops.concat(
            [ops.pool(f, "spatial_channel_avg"), ops.pool(f, "spatial_channel_max")], axis=1
        )
        return ops.sigmoid(
            ops.conv2d(stack, self.weight, self.bias, padding=self.kernel // 2)
        )


class Cbam:
    """Channel gate followed by spatial gate, both multiplicative."""

    def __init__(self, channels: int, reduction: int, rng: np.random.Generator):
        self.channel = ChannelAttention(channels, reduction, rng)
        self.spatial = SpatialAttention(rng)

    def named_parameters(self, prefix: str = ""):
        yield from self.channel.named_parameters(prefix + "channel.")
        yield from self.spatial.named_parameters(prefix + "spatial.")

    def __call__(self, f: Tensor) -> Tensor:
        refined = ops.mul(self.channel(f), f)
        return ops.mul(self.spatial(refined), refined)


class AttentionResidualModule:
    """Two dilated 3x3 convs (dilation 1 then 2) with batch norm, CBAM on the
    result, and a 1x1-convolved residual path under an outer ReLU."""

    def __init__(self, in_channels: int, out_channels: int, cbam_reduction: int,
                 rng: np.random.Generator):
        self.conv1_w = he_normal(rng, (out_channels, in_channels, 3, 3),
                                 fan_in=in_channels * 9)
        self.conv1_b = zeros_param(out_channels)
        self.norm1 = BatchNorm2d(out_channels)
        self.conv2_w = he_normal(rng, (out_channels, out_channels, 3, 3),
                                 fan_in=out_channels * 9)
        self.conv2_b = zeros_param(out_channels)
        self.norm2 = BatchNorm2d(out_channels)
        self.cbam = Cbam(out_channels, cbam_reduction, rng)
        self.res_w = he_normal(rng, (out_channels, in_channels, 1, 1), fan_in=in_channels)
        self.res_b = zeros_param(out_channels)

    def named_parameters(self, prefix: str = ""):
        yield f"{prefix}conv1_w", self.conv1_w
        yield f"{prefix}conv1_b", self.conv1_b
        yield from self.norm1.named_parameters(prefix + "norm1.")
        yield f"{prefix}conv2_w", self.conv2_w
        yield f"{prefix}conv2_b", self.conv2_b
        yield from self.norm2.named_parameters(prefix + "norm2.")
        yield from self.cbam.named_parameters(prefix + "cbam.")
        yield f"{prefix}res_w", self.res_w
        yield f"{prefix}res_b", self.res_b

    def named_buffers(self, prefix: str = ""):
        yield from self.norm1.named_buffers(prefix + "norm1.")
        yield from self.norm2.named_buffers(prefix + "norm2.")

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        h = ops.conv2d(x, self.conv1_w, self.conv1_b, padding=1, dilation=1)
        h = ops.relu(self.norm1(h, training))
        h = ops.conv2d(h, self.conv2_w, self.conv2_b, padding=2, dilation=2)
        h = self.cbam(self.norm2(h, training))
        res = ops.conv2d(x, self.res_w, self.res_b)
        return ops.relu(ops.add(res, h))


class PatchEmbed:
    """4x4 stride-4 convolution from the single-channel image to the first
    feature space, followed by channel layer norm."""

    def __init__(self, out_channels: int, rng: np.random.Generator):
        self.weight = he_normal(rng, (out_channels, 1, 4, 4), fan_in=16)
        self.bias = zeros_param(out_channels)
        self.gamma = ones_param(out_channels)
        self.beta = zeros_param(out_channels)

    def named_parameters(self, prefix: str = ""):
        for name in ("weight", "bias", "gamma", "beta"):
            yield f"{prefix}{name}", getattr(self, name)

    def forward(self, image: Tensor) -> Tensor:
        if image.shape[2] % 4 or image.shape[3] % 4:
            raise ShapeError(
                f"patch embedding needs height/width divisible by 4, got {image.shape[2:]}"
            )
        h = ops.conv2d(image, self.weight, self.bias, stride=4)
        return ops.layer_norm(h, self.gamma, self.beta, axis=1)


class FeatureFusionCorrection:
    """Fuses the last decoder map and the intermediate heatmap with a pooled
    whole-image context vector at full input resolution.

    ``features`` returns the fused map; ``head`` maps it to per-landmark
    heatmap channels with a 1x1 conv.
    """

    def __init__(self, decoder_dim: int, num_landmarks: int, stem_channels: int,
                 context_dim: int, fuse_channels: int, rng: np.random.Generator):
        self.stem_w = he_normal(rng, (stem_channels, 1, 3, 3), fan_in=9)
        self.stem_b = zeros_param(stem_channels)
        self.fc1_w = xavier_uniform(rng, context_dim, stem_channels)
        self.fc1_b = zeros_param(context_dim)
        self.fc2_w = xavier_uniform(rng, context_dim, context_dim)
        self.fc2_b = zeros_param(context_dim)
        fused_in = decoder_dim + num_landmarks + context_dim
        self.fuse_w = he_normal(rng, (fuse_channels, fused_in, 3, 3), fan_in=fused_in * 9)
        self.fuse_b = zeros_param(fuse_channels)
        self.head_w = zeros_param(num_landmarks, fuse_channels, 1, 1)
        self.head_b = zeros_param(num_landmarks)
        self.stem_channels = stem_channels

    def named_parameters(self, prefix: str = ""):
        for name in ("stem_w", "stem_b", "fc1_w", "fc1_b", "fc2_w", "fc2_b",
                     "fuse_w", "fuse_b", "head_w", "head_b"):
            yield f"{prefix}{name}", getattr(self, name)

    def context_vector(self, image: Tensor) -> Tensor:
        h = ops.relu(ops.conv2d(image, self.stem_w, self.stem_b, padding=1))
        pooled = ops.reshape(ops.pool(h, "global_avg"), (image.shape[0], self.stem_channels))
        return ops.linear(ops.relu(ops.linear(pooled, self.fc1_w, self.fc1_b)),
                          self.fc2_w, self.fc2_b)

    def features(self, u5: Tensor, h2: Tensor, image: Tensor) -> Tensor:
        if u5.shape[2:] != h2.shape[2:] or u5.shape[0] != h2.shape[0]:
            raise ShapeError(
                f"fusion inputs misaligned: decoder map {u5.shape} vs heatmap {h2.shape}"
            )
        full = image.shape[2:]
        context = self.context_vector(image)
        fused = ops.concat(
            [
                ops.bilinear_resize(u5, full),
                ops.bilinear_resize(h2, full),
                ops.expand_spatial(context, full),
            ],
            axis=1,
        )
        return ops.conv2d(fused, self.fuse_w, self.fuse_b, padding=1)

    def head(self, features: Tensor) -> Tensor:
        return ops.conv2d(features, self.head_w, self.head_b)

    def forward(self, u5: Tensor, h2: Tensor, image: Tensor) -> Tensor:
        return self.head(self.features(u5, h2, image))
