"""Central finite-difference verification of autograd gradients."""
from dataclasses import dataclass
from typing import Callable, Dict, List

import numpy as np
import torch

from utils.logger import get_logger
from utils.losses import loss_and_grads, mse

logger = get_logger('gradcheck')


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    n_checked: int


def relative_error(analytic: float, numeric: float, floor=1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_tensor(loss_fn: Callable[[], torch.Tensor], tensor: torch.Tensor, analytic: torch.Tensor,
                 n_samples=20, eps=1e-6, seed=0, name='tensor', floor=1e-6) -> GradCheckResult:
    """Compare `analytic` to (L(x+eps) - L(x-eps)) / 2eps at sampled coordinates of `tensor`.

    `tensor` is perturbed in place (under no_grad) and restored afterwards.
    """
    rng = np.random.default_rng(seed)
    flat = tensor.data.view(-1)
    grad_flat = analytic.reshape(-1)
    count = min(n_samples, flat.numel())
    coords = rng.choice(flat.numel(), size=count, replace=False)
    worst = 0.0
    with torch.no_grad():
        for idx in coords:
            original = flat[idx].item()
            flat[idx] = original + eps
            plus = float(loss_fn())
            flat[idx] = original - eps
            minus = float(loss_fn())
            flat[idx] = original
            numeric = (plus - minus) / (2 * eps)
            worst = max(worst, relative_error(float(grad_flat[idx]), numeric, floor))
    return GradCheckResult(name=name, max_rel_error=worst, n_checked=count)


def check_model_gradients(model: torch.nn.Module, inputs: torch.Tensor, targets: torch.Tensor,
                          n_samples=20, eps=1e-6, seed=0) -> List[GradCheckResult]:
    """Finite-difference check of every parameter tensor and of the input.

    Run on a float64 model; float32 differences are too noisy for the check.
    """
    if next(model.parameters()).dtype != torch.float64:
        raise ValueError("gradient checks need a float64 model (model.double())")
    inputs = inputs.detach().clone().requires_grad_(True)
    _, grads = loss_and_grads(model, inputs, targets)

    def loss_fn():
        return mse(model(inputs), targets)

    results = []
    params: Dict[str, torch.nn.Parameter] = dict(model.named_parameters())
    for i, (name, grad) in enumerate(grads.items()):
        results.append(check_tensor(loss_fn, params[name], grad, n_samples, eps, seed + i, name))

    input_grad, = torch.autograd.grad(loss_fn(), inputs)
    results.append(check_tensor(loss_fn, inputs, input_grad, n_samples, eps, seed, 'input'))
    worst = max(results, key=lambda r: r.max_rel_error)
    logger.info(f"Gradient check: {len(results)} tensors, worst {worst.name} rel err {worst.max_rel_error:.2e}")
    return results
