"""End-to-end model: spatial conv encoder, selective-SSM temporal encoder,
and the two decoding branches.

Forward data flow for a batch (N, T, C, H, W):

    frames (N*T, C, H, W) -> ConvBlock -> (N*T, C1, H, W)
    -> pixel sequences (N*H*W, T, C1) -> Mamba block (same shape)
    classification branch: valid-masked max over T -> (N, C1, H, W)
                           -> ClsHead -> logits (N, K, H, W)
    reconstruction branch: shared affine map C1 -> C per timestep
                           -> (N, T, C, H, W)

The reconstruction branch exists only for training supervision;
``predict`` runs the classification branch alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import ShapeError, Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .data import SitsBatch
from .spatial import ClsHead, ConvBlock
from .ssm import MambaBlock, SsmConfig


@dataclass
class ModelConfig:
    input_channels: int
    num_classes: int
    hidden: int = 128
    d_state: int = 16
    expand: int = 2
    conv_width: int = 4
    dt_rank: int | None = None
    residual_wrapper: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        if min(self.input_channels, self.num_classes, self.hidden) < 1:
            raise ValueError("all extents must be positive")

    @property
    def np_dtype(self):
        return {"float32": np.float32, "float64": np.float64}[self.dtype]

    def ssm_config(self) -> SsmConfig:
        return SsmConfig(d_model=self.hidden, d_state=self.d_state, expand=self.expand,
                         conv_width=self.conv_width, dt_rank=self.dt_rank,
                         residual_wrapper=self.residual_wrapper)


@dataclass
class ModelOutput:
    class_logits: Tensor                 # (N, K, H, W)
    reconstruction: Tensor | None        # (N, L, C, H, W)
    encoded: Tensor                      # (N, H*W, L, C1)


class SitsClassifier:
    def __init__(self, config: ModelConfig, rng: np.random.Generator | int = 0):
        if isinstance(rng, (int, np.integer)):
            rng = np.random.default_rng(rng)
        self.config = config
        dtype = config.np_dtype
        self.spatial = ConvBlock(config.input_channels, config.hidden, rng, dtype=dtype)
        self.temporal = MambaBlock(config.ssm_config(), rng, dtype=dtype)
        self.cls_head = ClsHead(config.hidden, config.num_classes, rng, dtype=dtype)
        self.rbranch = nn.Linear(config.hidden, config.input_channels, rng, bias=True, dtype=dtype)

    # ------------------------------------------------------------------
    def named_parameters(self):
        yield from self.spatial.named_params("spatial")
        yield from self.temporal.named_params("temporal")
        yield from self.cls_head.named_params("cls_head")
        yield from self.rbranch.named_params("rbranch")

    def named_buffers(self):
        yield from self.spatial.named_buffers("spatial")
        yield from self.cls_head.named_buffers("cls_head")

    def count_parameters(self) -> int:
        return sum(int(t.size) for _, t in self.named_parameters())

    # ------------------------------------------------------------------
    def forward(self, batch: SitsBatch, training: bool = False,
                with_reconstruction: bool = True) -> ModelOutput:
        series = np.asarray(batch.series)
        if series.ndim != 5 or series.shape[2] != self.config.input_channels:
            raise ShapeError(f"forward: series shape {series.shape}")
        if not np.isfinite(series).all():
            raise ad.NonFiniteError("forward: input series contains non-finite values")
        n, t, c, h, w = series.shape
        mask = np.asarray(batch.valid_mask, dtype=bool)
        if mask.shape != (n, t):
            raise ShapeError(f"forward: valid mask shape {mask.shape} != {(n, t)}")

        x = Tensor(series.astype(self.config.np_dtype, copy=False))
        frames = ad.reshape(x, (n * t, c, h, w))
        feat = self.spatial(frames, training)                       # (N*T, C1, H, W)
        c1 = self.config.hidden
        feat = ad.reshape(feat, (n, t, c1, h, w))
        seq = ad.reshape(ad.transpose(feat, (0, 3, 4, 1, 2)), (n * h * w, t, c1))
        encoded = self.temporal(seq)                                # (N*H*W, T, C1)

        pooled = self.temporal_maxpool(encoded, mask, (h, w))       # (N*H*W, C1)
        grid = ad.transpose(ad.reshape(pooled, (n, h, w, c1)), (0, 3, 1, 2))
        logits = self.cls_head(grid, training)                      # (N, K, H, W)

        reconstruction = None
        if with_reconstruction:
            rec = self.rbranch_decode(encoded)                      # (N*H*W, T, C)
            rec = ad.reshape(rec, (n, h, w, t, c))
            reconstruction = ad.transpose(rec, (0, 3, 4, 1, 2))     # (N, T, C, H, W)

        return ModelOutput(
            class_logits=logits,
            reconstruction=reconstruction,
            encoded=ad.reshape(encoded, (n, h * w, t, c1)),
        )

    def temporal_maxpool(self, encoded: Tensor, valid_mask: np.ndarray,
                         spatial: tuple[int, int]) -> Tensor:
        """Channelwise max over valid timesteps only; padded steps never win."""
        h, w = spatial
        n = valid_mask.shape[0]
        pixel_mask = np.repeat(valid_mask, h * w, axis=0)[:, :, None]
        if encoded.shape[0] != n * h * w:
            raise ShapeError("temporal_maxpool: pixel count mismatch")
        return ad.max_over_axis(encoded, axis=1, mask=pixel_mask)

    def rbranch_decode(self, encoded: Tensor) -> Tensor:
        """Shared affine map applied at every (pixel, timestep)."""
        return self.rbranch(encoded)

    def predict_logits(self, batch: SitsBatch) -> np.ndarray:
        """Inference-mode class logits (N, K, H, W), classification branch only."""
        with ad.no_grad():
            out = self.forward(batch, training=False, with_reconstruction=False)
        return out.class_logits.data

    def predict(self, batch: SitsBatch) -> np.ndarray:
        """Per-pixel argmax label map (N, H, W); ties go to the lowest index."""
        return np.argmax(self.predict_logits(batch), axis=1)

    # ------------------------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        state = {name: t.data for name, t in self.named_parameters()}
        state.update({name: buf for name, buf in self.named_buffers()})
        return state

    def save(self, path):
        save_checkpoint(self.state_arrays(), path)

    def load_state(self, state: dict[str, np.ndarray], strict: bool = False):
        dtype = self.config.np_dtype
        own_params = dict(self.named_parameters())
        own_buffers = dict(self.named_buffers())
        missing = (set(own_params) | set(own_buffers)) - set(state)
        extra = set(state) - (set(own_params) | set(own_buffers))
        if strict and (missing or extra):
            raise KeyError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, arr in state.items():
            if name in own_params:
                tgt = own_params[name]
                if tuple(arr.shape) != tgt.shape:
                    raise ShapeError(f"{name}: checkpoint shape {arr.shape} != {tgt.shape}")
                tgt.data = arr.astype(dtype)
                tgt.grad = None
            elif name in own_buffers:
                buf = own_buffers[name]
                if tuple(arr.shape) != buf.shape:
                    raise ShapeError(f"{name}: checkpoint shape {arr.shape} != {buf.shape}")
                buf[...] = arr.astype(buf.dtype)

    def load(self, path, strict: bool = False):
        self.load_state(load_checkpoint(path), strict=strict)


def count_parameters(config: ModelConfig) -> int:
    """Exact trainable-scalar count for a configuration."""
    return SitsClassifier(config).count_parameters()


def spatial_encoder_parameter_count(config: ModelConfig) -> int:
    model = SitsClassifier(config)
    return sum(int(t.size) for _, t in model.spatial.named_params("spatial"))
