from typing import Dict, Optional, Tuple

import torch
import torch.nn as nn


class ChannelScaledMSE(nn.Module):
    """MSE after dividing every channel of the residual by its scale.

    With the model's output std as scale each SH channel contributes at unit
    weight, so the small high-degree coefficients are not drowned by l=0.
    """

    def __init__(self, scale: torch.Tensor):
        super().__init__()
        if torch.any(scale <= 0):
            raise ValueError("channel scale must be positive")
        self.register_buffer('scale', scale.detach().clone().view(1, -1, 1, 1, 1))

    def forward(self, prediction: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        return mse(prediction / self.scale.to(prediction.dtype), target / self.scale.to(target.dtype))


def get_loss(name='mse', channel_scale: Optional[torch.Tensor] = None):
    """Training criterion by config name."""
    if name == 'mse':
        return nn.MSELoss(reduction='mean')
    if name == 'normalized_mse':
        if channel_scale is None:
            raise ValueError("normalized_mse needs the per-channel output scale")
        return ChannelScaledMSE(channel_scale)
    raise ValueError(f"unknown loss {name!r}")


def mse(prediction: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over all voxels and channels of the squared difference."""
    if prediction.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(prediction.shape)} vs {tuple(target.shape)}")
    return torch.mean((prediction - target) ** 2)


def loss_and_grads(model: nn.Module, inputs: torch.Tensor, targets: torch.Tensor,
                   ) -> Tuple[float, Dict[str, torch.Tensor]]:
    """MSE of model(inputs) against targets and the gradient of every parameter.

    Inputs/targets are channel-first batches (B, C, D, H, W). Gradients come from
    autograd, returned as detached copies keyed like `named_parameters`; the
    model's own `.grad` fields are left untouched.
    """
    if inputs.shape[0] != targets.shape[0] or inputs.shape[2:] != targets.shape[2:]:
        raise ValueError(f"shape mismatch: {tuple(inputs.shape)} vs {tuple(targets.shape)}")
    names, params = zip(*[(n, p) for n, p in model.named_parameters() if p.requires_grad])
    loss = mse(model(inputs), targets)
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return float(loss.detach()), {
        n: (torch.zeros_like(p) if g is None else g.detach().clone())
        for n, p, g in zip(names, params, grads)}
