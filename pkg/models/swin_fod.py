"""3D shifted-window transformer encoder-decoder for FOD coefficient patches.

Layout follows Swin UNETR: a full-resolution convolutional skip, a strided
patch embedding, Swin stages separated by patch merging, and a decoder that
upsamples with transposed convolutions and fuses the encoder skips. Tokens are
kept channel-last (B, D, H, W, C) inside the transformer and channel-first
(B, C, D, H, W) in the convolutional parts.
"""
import os
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
from einops import rearrange

from utils.config import ModelConfig
from utils.errors import ConfigError
from utils.logger import get_logger

logger = get_logger('model')

CHECKPOINT_MAGIC = 'FODSWIN-CKPT'
# 2: output normalisation buffers
CHECKPOINT_VERSION = 2
MASK_FILL = -100.0


@dataclass(frozen=True)
class WindowLayout:
    """Everything needed to undo `partition_windows`."""
    dims: Tuple[int, int, int]
    window: Tuple[int, int, int]
    shift: Tuple[int, int, int]
    batched: bool

    @property
    def grid(self) -> Tuple[int, int, int]:
        return tuple(d // w for d, w in zip(self.dims, self.window))


def window_partition(x, window):
    """(B, D, H, W, C) -> (B * nW, wd, wh, ww, C)."""
    return rearrange(x, 'b (s p1) (h p2) (w p3) c -> (b s h w) p1 p2 p3 c',
                     p1=window[0], p2=window[1], p3=window[2])


def window_reverse(windows, window, dims):
    """Inverse of `window_partition` for a volume of spatial size `dims`."""
    return rearrange(windows, '(b s h w) p1 p2 p3 c -> b (s p1) (h p2) (w p3) c',
                     s=dims[0] // window[0], h=dims[1] // window[1], w=dims[2] // window[2])


def partition_windows(feat: torch.Tensor, window, shift=(0, 0, 0)):
    """Cyclically shift a feature map by -shift and cut it into non-overlapping windows.

    Args:
        feat: (D, H, W, C) or (B, D, H, W, C)
    Returns:
        windows of shape (nW [* B], wd * wh * ww, C) and the WindowLayout
    """
    batched = feat.dim() == 5
    if not batched:
        if feat.dim() != 4:
            raise ValueError(f"feature map must be (D,H,W,C) or (B,D,H,W,C), got {tuple(feat.shape)}")
        feat = feat.unsqueeze(0)
    dims = tuple(feat.shape[1:4])
    window, shift = tuple(int(w) for w in window), tuple(int(s) for s in shift)
    if any(w < 1 or d % w for d, w in zip(dims, window)):
        raise ValueError(f"feature dims {dims} not divisible by window {window}")
    if any(s < 0 or s >= w for s, w in zip(shift, window)):
        raise ValueError(f"shift {shift} must lie in [0, window) = [0, {window})")
    if any(shift):
        feat = torch.roll(feat, shifts=tuple(-s for s in shift), dims=(1, 2, 3))
    windows = window_partition(feat, window)
    windows = windows.reshape(windows.shape[0], -1, windows.shape[-1])
    return windows, WindowLayout(dims=dims, window=window, shift=shift, batched=batched)


def reverse_windows(windows: torch.Tensor, layout: WindowLayout) -> torch.Tensor:
    """Inverse of `partition_windows` (exact)."""
    windows = windows.reshape(windows.shape[0], *layout.window, windows.shape[-1])
    feat = window_reverse(windows, layout.window, layout.dims)
    if any(layout.shift):
        feat = torch.roll(feat, shifts=layout.shift, dims=(1, 2, 3))
    return feat if layout.batched else feat.squeeze(0)


def relative_position_index(window) -> torch.Tensor:
    """Index into a ((2wd-1)(2wh-1)(2ww-1), heads) bias table for every token pair."""
    coords = torch.stack(torch.meshgrid([torch.arange(w) for w in window], indexing='ij'))
    coords = torch.flatten(coords, 1)
    relative = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0).contiguous()
    relative[:, :, 0] += window[0] - 1
    relative[:, :, 1] += window[1] - 1
    relative[:, :, 2] += window[2] - 1
    relative[:, :, 0] *= (2 * window[1] - 1) * (2 * window[2] - 1)
    relative[:, :, 1] *= 2 * window[2] - 1
    return relative.sum(-1)


def shifted_window_mask(dims, window, shift) -> Optional[torch.Tensor]:
    """(nW, N, N) additive mask keeping attention inside regions that were contiguous before the roll."""
    if not any(shift):
        return None
    img_mask = torch.zeros((1, *dims, 1))
    slices = [(slice(0, -w), slice(-w, -s), slice(-s, None)) if s else (slice(0, None),)
              for w, s in zip(window, shift)]
    cnt = 0
    for sd in slices[0]:
        for sh in slices[1]:
            for sw in slices[2]:
                img_mask[:, sd, sh, sw, :] = cnt
                cnt += 1
    mask_windows = window_partition(img_mask, window).reshape(-1, int(np.prod(window)))
    attn_mask = mask_windows.unsqueeze(1) - mask_windows.unsqueeze(2)
    return attn_mask.masked_fill(attn_mask != 0, MASK_FILL).masked_fill(attn_mask == 0, 0.0)


class WindowAttention3D(nn.Module):
    """Multi-head self-attention inside a 3D window with a learned relative position bias per head."""

    def __init__(self, dim, window, num_heads):
        super().__init__()
        if dim % num_heads:
            raise ConfigError(f"dim {dim} not divisible by num_heads {num_heads}")
        self.dim = dim
        self.window = tuple(window)
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim ** -0.5
        n_rel = (2 * window[0] - 1) * (2 * window[1] - 1) * (2 * window[2] - 1)
        self.relative_position_bias_table = nn.Parameter(torch.zeros(n_rel, num_heads))
        self.register_buffer('relative_position_index', relative_position_index(self.window), persistent=False)
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def relative_bias(self) -> torch.Tensor:
        n = int(np.prod(self.window))
        bias = self.relative_position_bias_table[self.relative_position_index.reshape(-1)]
        return bias.reshape(n, n, -1).permute(2, 0, 1).contiguous()

    def forward(self, x, mask=None, return_attn=False):
        """
        Args:
            x: (num_windows * B, N, C) tokens of each window
            mask: (num_windows, N, N) additive mask or None
        """
        b_, n, c = x.shape
        if c != self.dim or n != int(np.prod(self.window)):
            raise ValueError(f"expected (*, {int(np.prod(self.window))}, {self.dim}) tokens, got {tuple(x.shape)}")
        qkv = self.qkv(x).reshape(b_, n, 3, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q * self.scale) @ k.transpose(-2, -1)
        attn = attn + self.relative_bias().unsqueeze(0)
        if mask is not None:
            n_windows = mask.shape[0]
            attn = attn.view(b_ // n_windows, n_windows, self.num_heads, n, n) + mask.unsqueeze(1).unsqueeze(0)
            attn = attn.view(-1, self.num_heads, n, n)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b_, n, c)
        out = self.proj(out)
        return (out, attn) if return_attn else out


class Mlp(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class SwinBlock3D(nn.Module):
    """(Shifted) window attention + MLP, both pre-norm residual."""

    def __init__(self, dim, resolution, num_heads, window, shift, mlp_ratio=4.0):
        super().__init__()
        self.resolution = tuple(resolution)
        self.window = tuple(window)
        self.shift = tuple(shift)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention3D(dim, self.window, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))
        self.register_buffer('attn_mask', shifted_window_mask(self.resolution, self.window, self.shift),
                             persistent=False)

    def forward(self, x):
        """x: (B, D, H, W, C)"""
        shortcut = x
        windows, layout = partition_windows(self.norm1(x), self.window, self.shift)
        mask = None if self.attn_mask is None else self.attn_mask.to(windows.dtype)
        x = shortcut + reverse_windows(self.attn(windows, mask=mask), layout)
        return x + self.mlp(self.norm2(x))


class PatchMerging3D(nn.Module):
    """Concatenate 2x2x2 neighbours and project 8C -> 2C."""

    def __init__(self, dim):
        super().__init__()
        self.norm = nn.LayerNorm(8 * dim)
        self.reduction = nn.Linear(8 * dim, 2 * dim, bias=False)

    def forward(self, x):
        x = rearrange(x, 'b (s p1) (h p2) (w p3) c -> b s h w (p3 p2 p1 c)', p1=2, p2=2, p3=2)
        return self.reduction(self.norm(x))


class SwinStage(nn.Module):
    def __init__(self, dim, resolution, depth, num_heads, window, shift, mlp_ratio):
        super().__init__()
        self.blocks = nn.ModuleList([
            SwinBlock3D(dim, resolution, num_heads, window,
                        shift=shift if i % 2 else (0, 0, 0), mlp_ratio=mlp_ratio)
            for i in range(depth)])
        self.norm = nn.LayerNorm(dim)

    def forward(self, x):
        for block in self.blocks:
            x = block(x)
        return self.norm(x)


class ConvBlock(nn.Module):
    """Two 3x3x3 convolutions with GELU and a 1x1x1 residual projection."""

    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.conv1 = nn.Conv3d(in_ch, out_ch, kernel_size=3, padding=1)
        self.conv2 = nn.Conv3d(out_ch, out_ch, kernel_size=3, padding=1)
        self.skip = nn.Conv3d(in_ch, out_ch, kernel_size=1) if in_ch != out_ch else nn.Identity()
        self.act = nn.GELU()

    def forward(self, x):
        return self.act(self.conv2(self.act(self.conv1(x))) + self.skip(x))


class UpBlock(nn.Module):
    """Upsample x2 with a transposed convolution, concatenate the skip, fuse."""

    def __init__(self, in_ch, skip_ch, out_ch):
        super().__init__()
        self.up = nn.ConvTranspose3d(in_ch, out_ch, kernel_size=2, stride=2)
        self.fuse = ConvBlock(out_ch + skip_ch, out_ch)

    def forward(self, x, skip):
        return self.fuse(torch.cat([self.up(x), skip], dim=1))


class FodSwinNet(nn.Module):
    """Maps a (B, 45, D, H, W) FOD patch to a refined patch of the same shape.

    Inputs are normalised per SH channel with the `channel_mean`/`channel_std`
    buffers. The head predicts unit-scale values that `output_mean`/`output_std`
    map to raw coefficients: the targets in direct regression, the
    target-minus-input correction in residual mode (the raw input is added back).
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        e = config.embed_dim
        resolutions = config.stage_resolutions()
        windows = config.stage_windows()
        shifts = config.stage_shifts()

        self.register_buffer('channel_mean', torch.zeros(config.in_channels))
        self.register_buffer('channel_std', torch.ones(config.in_channels))
        self.register_buffer('output_mean', torch.zeros(config.out_channels))
        self.register_buffer('output_std', torch.ones(config.out_channels))

        self.encoder0 = ConvBlock(config.in_channels, e)
        self.patch_embed = nn.Conv3d(config.in_channels, e, kernel_size=2, stride=2)
        self.stages = nn.ModuleList()
        self.merges = nn.ModuleList()
        for k, (depth, heads) in enumerate(zip(config.depths, config.num_heads)):
            dim = e * 2 ** k
            self.stages.append(SwinStage(dim, resolutions[k], depth, heads, windows[k], shifts[k], config.mlp_ratio))
            if k < config.num_stages - 1:
                self.merges.append(PatchMerging3D(dim))

        self.decoders = nn.ModuleList([
            UpBlock(e * 2 ** (k + 1), e * 2 ** k, e * 2 ** k)
            for k in reversed(range(config.num_stages - 1))])
        self.decoder0 = UpBlock(e, e, e)
        self.head = nn.Conv3d(e, config.out_channels, kernel_size=1)

    def set_normalization(self, mean, std, output_mean=None, output_std=None):
        """Per-channel input statistics and, optionally, output statistics."""
        pairs = [(self.channel_mean, mean), (self.channel_std, std)]
        if output_mean is not None or output_std is not None:
            if output_mean is None or output_std is None:
                raise ValueError("output_mean and output_std must be given together")
            pairs += [(self.output_mean, output_mean), (self.output_std, output_std)]
        values = [torch.as_tensor(np.asarray(v), dtype=buf.dtype) for buf, v in pairs]
        for (buf, _), value in zip(pairs, values):
            if value.shape != buf.shape:
                raise ValueError(f"normalization vector of shape {tuple(value.shape)}, expected {tuple(buf.shape)}")
        if any(torch.any(v <= 0) for v in values[1::2]):
            raise ValueError("channel std must be positive")
        for (buf, _), value in zip(pairs, values):
            buf.copy_(value)

    @staticmethod
    def _channels(vector):
        return vector.view(1, -1, 1, 1, 1)

    def forward(self, x):
        expected = (self.config.in_channels, *self.config.patch_size)
        if x.dim() != 5 or tuple(x.shape[1:]) != expected:
            raise ValueError(f"expected input (B, {expected}), got {tuple(x.shape)}")
        xn = (x - self._channels(self.channel_mean)) / self._channels(self.channel_std)

        skip0 = self.encoder0(xn)
        h = rearrange(self.patch_embed(xn), 'b c d h w -> b d h w c')
        skips = []
        for k, stage in enumerate(self.stages):
            h = stage(h)
            skips.append(rearrange(h, 'b d h w c -> b c d h w'))
            if k < len(self.merges):
                h = self.merges[k](h)

        h = skips[-1]
        for decoder, skip in zip(self.decoders, reversed(skips[:-1])):
            h = decoder(h, skip)
        out = self.head(self.decoder0(h, skip0))
        out = out * self._channels(self.output_std) + self._channels(self.output_mean)
        if self.config.residual:
            out = out + x
        return out

    def save_pretrained(self, path, **metadata):
        """Write a single-file checkpoint atomically (temp file + rename).

        Container: magic, version, model config, named tensors with shapes, and
        free metadata (train config, seed, epoch, validation mse...).
        """
        directory = os.path.dirname(os.path.abspath(path))
        os.makedirs(directory, exist_ok=True)
        state = {k: v.detach().cpu() for k, v in self.state_dict().items()}
        payload = {
            'magic': CHECKPOINT_MAGIC,
            'version': CHECKPOINT_VERSION,
            'model_config': self.config.to_dict(),
            'state_dict': state,
            'tensor_shapes': {k: list(v.shape) for k, v in state.items()},
            'metadata': metadata,
        }
        tmp_path = f'{path}.tmp'
        torch.save(payload, tmp_path)
        os.replace(tmp_path, path)
        logger.debug(f"Checkpoint saved to {path}")

    @classmethod
    def from_pretrained(cls, path, device='cpu'):
        """Rebuild a model from `save_pretrained` output; returns (model, metadata)."""
        if not os.path.isfile(path):
            raise FileNotFoundError(f"Checkpoint not found: {path}")
        payload = torch.load(path, map_location=device, weights_only=True)
        if not isinstance(payload, dict) or payload.get('magic') != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a FOD swin checkpoint")
        if payload.get('version') != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')}")
        model = cls(ModelConfig.from_dict(payload['model_config']))
        state = payload['state_dict']
        dtype = next(iter(state.values())).dtype
        model.to(dtype)
        model.load_state_dict(state)
        model.to(device)
        model.eval()
        logger.info(f"Loaded FodSwinNet from {path}")
        return model, payload.get('metadata', {})


def _init_weights(module, zero_head):
    for name, m in module.named_modules():
        if isinstance(m, (nn.Linear, nn.Conv3d, nn.ConvTranspose3d)):
            nn.init.trunc_normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, WindowAttention3D):
            nn.init.trunc_normal_(m.relative_position_bias_table, std=0.02)
    if zero_head:
        nn.init.zeros_(module.head.weight)
        nn.init.zeros_(module.head.bias)


def init_params(config: ModelConfig, seed=0, dtype=torch.float32) -> FodSwinNet:
    """Build a model with deterministic truncated-normal (std 0.02) initialisation."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = FodSwinNet(config)
        _init_weights(model, config.zero_head)
    return model.to(dtype)


def identity_model(patch_size=(16, 16, 16), in_channels=45, **overrides) -> FodSwinNet:
    """Diagnostic model whose forward pass is exactly the identity (residual mode, zero head)."""
    config = ModelConfig.from_dict({'patch_size': patch_size, 'in_channels': in_channels,
                                    'out_channels': in_channels, 'residual': True,
                                    'zero_head': True, **overrides})
    return init_params(config, seed=0)


def predict_patches(model: FodSwinNet, patches: np.ndarray) -> np.ndarray:
    """Channel-last numpy patches (B, X, Y, Z, C) -> model output of the same shape."""
    param = next(model.parameters())
    x = torch.from_numpy(np.ascontiguousarray(patches)).to(device=param.device, dtype=param.dtype)
    with torch.no_grad():
        out = model(rearrange(x, 'b x y z c -> b c x y z'))
    return rearrange(out, 'b c x y z -> b x y z c').cpu().numpy()
