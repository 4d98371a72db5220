"""The U-shaped landmark detector.

Five encoder stages pair a routing-attention transformer block with an
attention-residual conv module at strides 4 to 64; a transposed-conv
decoder with 1x1-projected skips brings features back up, and three heads
emit heatmaps at strides 8, 4 and 1. The full-resolution head runs through
the feature-fusion correction module.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import heatmaps, ops
from .attention import BiformerBlock, BraConfig, he_normal, xavier_uniform, zeros_param
from .blocks import AttentionResidualModule, FeatureFusionCorrection, PatchEmbed
from .tensor import ConfigError, ShapeError, Tensor, get_default_dtype

CHECKPOINT_MAGIC = b"HYATT1"
STAGE_STRIDES = (4, 8, 16, 32, 64)


@dataclass
class HyattConfig:
    """Architecture and training hyperparameters."""

    input_size: tuple = (128, 128)
    num_landmarks: int = 4
    stage_dims: tuple = (16, 32, 64, 96, 128)
    stage_region_grid: tuple = (4, 4, 2, 2, 1)
    stage_topk: tuple = (4, 8, 2, 4, 1)
    stage_heads: tuple = (1, 2, 2, 4, 4)
    decoder_dim: int = 256
    mlp_ratio: float = 3.0
    head_channels: int = 64
    cbam_reduction: int = 4
    lce_kernel: int = 5
    ffcm_stem_channels: int = 16
    ffcm_context_dim: int = 32
    ffcm_fuse_channels: int = 64
    sigma: tuple = (2.0, 2.0, 4.0)
    loss_weights: tuple = (1.0, 3.0, 3.0)
    peak_normalize: bool = True
    lr: float = 4e-4
    weight_decay: float = 0.01
    epochs: int = 150
    seed: int = 0

    def __post_init__(self):
        for name in ("input_size", "stage_dims", "stage_region_grid", "stage_topk",
                     "stage_heads", "sigma", "loss_weights"):
            setattr(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self):
        h, w = self.input_size
        if h % 64 or w % 64:
            raise ConfigError(
                f"input size {h}x{w} must be divisible by 64 "
                "(patch embedding plus four stage downsamples)"
            )
        for name in ("stage_dims", "stage_region_grid", "stage_topk", "stage_heads"):
            if len(getattr(self, name)) != 5:
                raise ConfigError(f"{name} must list exactly 5 stages")
        if len(self.sigma) != 3 or len(self.loss_weights) != 3:
            raise ConfigError("sigma and loss_weights must list exactly 3 heads")
        for i, stride in enumerate(STAGE_STRIDES):
            sh, sw = h // stride, w // stride
            grid = self.stage_region_grid[i]
            if sh < 1 or sw < 1:
                raise ConfigError(f"stage {i + 1} feature map would be empty")
            if sh % grid or sw % grid:
                raise ConfigError(
                    f"stage {i + 1} feature size {sh}x{sw} not divisible by its "
                    f"region grid {grid}"
                )
            if self.stage_topk[i] > grid * grid:
                raise ConfigError(
                    f"stage {i + 1} topk {self.stage_topk[i]} exceeds {grid * grid} regions"
                )
            if self.stage_dims[i] % self.stage_heads[i]:
                raise ConfigError(
                    f"stage {i + 1} dim {self.stage_dims[i]} not divisible by "
                    f"{self.stage_heads[i]} heads"
                )
            if self.stage_dims[i] % self.cbam_reduction:
                raise ConfigError(
                    f"stage {i + 1} dim {self.stage_dims[i]} not divisible by the "
                    f"CBAM reduction {self.cbam_reduction}"
                )
        if self.num_landmarks < 1:
            raise ConfigError("num_landmarks must be at least 1")

    def stage_hw(self, index: int) -> tuple:
        h, w = self.input_size
        stride = STAGE_STRIDES[index]
        return h // stride, w // stride

    def to_json_dict(self) -> dict:
        out = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in out.items()}


def toy_config(**overrides) -> HyattConfig:
    """Small configuration that trains in minutes on a CPU (~0.43M params)."""
    base = dict(
        input_size=(128, 128),
        num_landmarks=4,
        stage_dims=(8, 16, 32, 48, 64),
        stage_region_grid=(4, 4, 2, 2, 1),
        stage_topk=(4, 8, 2, 4, 1),
        stage_heads=(1, 2, 2, 4, 4),
        decoder_dim=64,
        mlp_ratio=2.0,
        head_channels=48,
        ffcm_stem_channels=16,
        ffcm_context_dim=32,
        ffcm_fuse_channels=32,
    )
    base.update(overrides)
    return HyattConfig(**base)


def tiny_config(**overrides) -> HyattConfig:
    """Minimal 64x64 configuration used for end-to-end gradient checks."""
    base = dict(
        input_size=(64, 64),
        num_landmarks=2,
        stage_dims=(8, 8, 16, 16, 16),
        stage_region_grid=(2, 2, 2, 1, 1),
        stage_topk=(2, 4, 2, 1, 1),
        stage_heads=(1, 1, 2, 2, 2),
        decoder_dim=16,
        mlp_ratio=1.5,
        head_channels=8,
        cbam_reduction=4,
        ffcm_stem_channels=4,
        ffcm_context_dim=8,
        ffcm_fuse_channels=8,
    )
    base.update(overrides)
    return HyattConfig(**base)


@dataclass
class HeatmapStack:
    """Deep-supervision heatmaps: h1 at input/8, h2 at input/4, h3 at full
    resolution, each with num_landmarks channels."""

    h1: Tensor
    h2: Tensor
    h3: Tensor
    sigmas: tuple = (2.0, 2.0, 4.0)


def average_heads(stack: HeatmapStack, full_hw) -> np.ndarray:
    """Upsample the two sub-resolution heads to full resolution and average
    all three heatmaps per channel. Returns a (B, N, H, W) array."""
    merged = ops.add(
        ops.add(ops.bilinear_resize(stack.h1, full_hw),
                ops.bilinear_resize(stack.h2, full_hw)),
        stack.h3,
    )
    return merged.data / 3.0


class _Head:
    """3x3 conv then 1x1 conv down to one channel per landmark."""

    def __init__(self, in_channels, mid_channels, landmarks, rng):
        self.conv_w = xavier_uniform(rng, mid_channels, in_channels, 3, 3)
        self.conv_b = zeros_param(mid_channels)
        self.out_w = zeros_param(landmarks, mid_channels, 1, 1)
        self.out_b = zeros_param(landmarks)

    def named_parameters(self, prefix=""):
        for name in ("conv_w", "conv_b", "out_w", "out_b"):
            yield f"{prefix}{name}", getattr(self, name)

    def forward(self, x):
        return ops.conv2d(ops.conv2d(x, self.conv_w, self.conv_b, padding=1),
                          self.out_w, self.out_b)


class HyattNet:
    def __init__(self, cfg: HyattConfig, seed: int | None = None):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        dims = cfg.stage_dims

        self.patch_embed = PatchEmbed(dims[0], rng)
        self.downsamples = []
        for i in range(1, 5):
            w = he_normal(rng, (dims[i], dims[i - 1], 3, 3), fan_in=dims[i - 1] * 9)
            b = zeros_param(dims[i])
            self.downsamples.append((w, b))
        self.biformers = [
            BiformerBlock(
                BraConfig(channels=dims[i], region_grid=cfg.stage_region_grid[i],
                          topk=cfg.stage_topk[i], heads=cfg.stage_heads[i],
                          lce_kernel=cfg.lce_kernel),
                rng, mlp_ratio=cfg.mlp_ratio, label=f"stage{i + 1}",
            )
            for i in range(5)
        ]
        self.arms = [
            AttentionResidualModule(dims[i], dims[i], cfg.cbam_reduction, rng)
            for i in range(5)
        ]
        # the decoder is a linear chain (no activations), so variance-
        # preserving init keeps the head inputs at a sane scale
        self.skip_projs = []
        for i in range(5):
            w = xavier_uniform(rng, cfg.decoder_dim, dims[i], 1, 1)
            b = zeros_param(cfg.decoder_dim)
            self.skip_projs.append((w, b))
        self.deconvs = []
        for _ in range(4):
            w = xavier_uniform(rng, cfg.decoder_dim, cfg.decoder_dim, 2, 2)
            b = zeros_param(cfg.decoder_dim)
            self.deconvs.append((w, b))
        self.head1 = _Head(cfg.decoder_dim, cfg.head_channels, cfg.num_landmarks, rng)
        self.head2 = _Head(cfg.decoder_dim, cfg.head_channels, cfg.num_landmarks, rng)
        self.ffcm = FeatureFusionCorrection(
            cfg.decoder_dim, cfg.num_landmarks, cfg.ffcm_stem_channels,
            cfg.ffcm_context_dim, cfg.ffcm_fuse_channels, rng,
        )

    # -- parameter registry ------------------------------------------------

    def named_parameters(self):
        yield from self.patch_embed.named_parameters("patch_embed.")
        for i, (w, b) in enumerate(self.downsamples):
            yield f"down{i + 2}.weight", w
            yield f"down{i + 2}.bias", b
        for i, block in enumerate(self.biformers):
            yield from block.named_parameters(f"stage{i + 1}.biformer.")
        for i, arm in enumerate(self.arms):
            yield from arm.named_parameters(f"stage{i + 1}.arm.")
        for i, (w, b) in enumerate(self.skip_projs):
            yield f"proj{i + 1}.weight", w
            yield f"proj{i + 1}.bias", b
        for i, (w, b) in enumerate(self.deconvs):
            yield f"deconv{i + 1}.weight", w
            yield f"deconv{i + 1}.bias", b
        yield from self.head1.named_parameters("head1.")
        yield from self.head2.named_parameters("head2.")
        yield from self.ffcm.named_parameters("ffcm.")

    def named_buffers(self):
        for i, arm in enumerate(self.arms):
            yield from arm.named_buffers(f"stage{i + 1}.arm.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    # -- forward -----------------------------------------------------------

    def encode(self, image: Tensor, training: bool = False) -> list:
        cfg = self.cfg
        if image.ndim != 4 or image.shape[1] != 1:
            raise ShapeError(f"expected a (B, 1, H, W) image, got {image.shape}")
        if tuple(image.shape[2:]) != tuple(cfg.input_size):
            raise ShapeError(
                f"image is {image.shape[2]}x{image.shape[3]}, configured input "
                f"size is {cfg.input_size[0]}x{cfg.input_size[1]}"
            )
        pyramid = []
        x = self.patch_embed.forward(image)
        for i in range(5):
            if i > 0:
                w, b = self.downsamples[i - 1]
                x = ops.conv2d(x, w, b, stride=2, padding=1)
            x = self.biformers[i].forward(x)
            x = self.arms[i].forward(x, training)
            pyramid.append(x)
        return pyramid

    def decode(self, pyramid: list) -> list:
        projected = [
            ops.conv2d(feat, w, b)
            for feat, (w, b) in zip(pyramid, self.skip_projs)
        ]
        u = projected[4]
        decoded = [u]
        for i in range(4):
            w, b = self.deconvs[i]
            up = ops.transposed_conv2d(u, w, b, stride=2)
            u = ops.add(up, projected[3 - i])
            decoded.append(u)
        return decoded

    def forward(self, image: Tensor, training: bool = False) -> HeatmapStack:
        pyramid = self.encode(image, training)
        decoded = self.decode(pyramid)
        h1 = self.head1.forward(decoded[3])
        h2 = self.head2.forward(decoded[4])
        h3 = self.ffcm.forward(decoded[4], h2, image)
        return HeatmapStack(h1=h1, h2=h2, h3=h3, sigmas=self.cfg.sigma)

    def predict(self, image: Tensor) -> np.ndarray:
        """Averaged-head landmark coordinates, (B, N, 2) in input pixels."""
        stack = self.forward(image, training=False)
        averaged = average_heads(stack, tuple(image.shape[2:]))
        points = np.stack([
            heatmaps.decode_heatmap(averaged[b]).points
            for b in range(averaged.shape[0])
        ])
        return points

    def loss(self, stack: HeatmapStack, landmarks_batch: np.ndarray) -> Tensor:
        cfg = self.cfg
        return heatmaps.combined_loss(
            stack, landmarks_batch, cfg.input_size, cfg.sigma,
            cfg.loss_weights, cfg.peak_normalize,
        )


# ---------------------------------------------------------------------------
# checkpoint container: magic, little-endian manifest length, JSON manifest
# (config + per-entry name/shape/offset), then raw little-endian float32 data


def save_checkpoint(net: HyattNet, path) -> None:
    entries = []
    payload = bytearray()
    for name, param in net.named_parameters():
        entries.append({
            "name": name,
            "shape": list(param.shape),
            "offset": len(payload),
            "kind": "param",
        })
        payload.extend(np.ascontiguousarray(param.data, dtype="<f4").tobytes())
    for name, buf in net.named_buffers():
        entries.append({
            "name": name,
            "shape": list(buf.shape),
            "offset": len(payload),
            "kind": "buffer",
        })
        payload.extend(np.ascontiguousarray(buf, dtype="<f4").tobytes())
    manifest = json.dumps(
        {"config": net.cfg.to_json_dict(), "entries": entries},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(manifest)))
        fh.write(manifest)
        fh.write(bytes(payload))


def load_checkpoint(path) -> HyattNet:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ConfigError(f"{path}: not a checkpoint (magic {magic!r})")
        (manifest_len,) = struct.unpack("<I", fh.read(4))
        manifest = json.loads(fh.read(manifest_len).decode("utf-8"))
        payload = fh.read()
    cfg = HyattConfig(**{k: v for k, v in manifest["config"].items()})
    net = HyattNet(cfg)
    params = dict(net.named_parameters())
    buffers = dict(net.named_buffers())
    for entry in manifest["entries"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        data = np.frombuffer(payload, dtype="<f4", count=count, offset=start)
        data = data.reshape(shape)
        if entry["kind"] == "param":
            target = params.get(entry["name"])
            if target is None or target.shape != shape:
                raise ConfigError(f"checkpoint entry {entry['name']} does not match the model")
            target.data = data.astype(target.data.dtype)
        else:
            target = buffers.get(entry["name"])
            if target is None or target.shape != shape:
                raise ConfigError(f"checkpoint entry {entry['name']} does not match the model")
            target[:] = data.astype(target.dtype)
    return net
